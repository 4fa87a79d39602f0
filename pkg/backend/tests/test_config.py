import os

from backend.src import config


def test_paths_are_anchored_at_backend():
    """Tests that run outputs default to the instance folder of backend/."""
    assert os.path.basename(config.BASE_DIR) == "backend"
    assert os.path.isdir(os.path.join(config.BASE_DIR, "src"))
    assert config.INSTANCE_FOLDER == os.path.join(config.BASE_DIR, "instance")
    if "POSETRACK_OUT_DIR" not in os.environ:
        assert config.DEFAULT_OUTPUT_DIR == os.path.join(
            config.INSTANCE_FOLDER, "runs"
        )
