"""Episode runners that fail in a known place.

They live at module level so worker processes can unpickle them.
"""

from backend.src.errors import EpisodeRuntimeError
from backend.src.experiment_harness import EpisodeLog
from backend.src.models import ExperimentConfig

FAILURE_TICK = 7


def failing_episode(cfg: ExperimentConfig, seed: int) -> EpisodeLog:
    raise EpisodeRuntimeError("thrust lost", tick=FAILURE_TICK, t=0.14, seed=seed)
