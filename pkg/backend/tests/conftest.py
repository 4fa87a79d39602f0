import pytest

from backend.src.models import (
    DisturbanceField,
    ExperimentConfig,
    ReferenceTrajectory,
    SensorModel,
)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Six-second lemniscate at 50 Hz with four GP updates."""
    return ExperimentConfig(
        name="tiny",
        trajectory=ReferenceTrajectory(shape="lemniscate", amplitude=2.0, duration=6.0),
        disturbance=DisturbanceField(always_on=True),
        sensor=SensorModel(pose_rate=25.0, pos_sigma=0.02, feedback="propagate"),
        control_rate=50.0,
        gp_capacity=100,
        batch_size=20,
        n_end=3,
        warmup=10,
        target_window=3,
        bound_samples=20,
        seeds=[0, 1],
    )
