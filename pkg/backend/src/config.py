import os

from dotenv import load_dotenv

# Pick up POSETRACK_* variables from a local .env file, if one exists.
load_dotenv()

# backend/, the parent of this package; run outputs go under its instance/
BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
INSTANCE_FOLDER = os.path.join(BASE_DIR, "instance")

# Default location for run directories written by the CLI
DEFAULT_OUTPUT_DIR: str = os.environ.get(
    "POSETRACK_OUT_DIR", os.path.join(INSTANCE_FOLDER, "runs")
)

LOG_LEVEL: str = os.environ.get("POSETRACK_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Versions stamped into every artifact
SCHEMA_VERSION = 1
ARTIFACT_VERSION = "0.1.0"

# Numeric tolerances
UNIT_TOL = 1e-9
DRIFT_TOL = 1e-7
MAX_STEP = 0.1

# Significant digits used for every float written to disk
FLOAT_FORMAT = ".17g"
