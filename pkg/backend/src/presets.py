"""Named experiment scenarios.

Presets are partial configuration trees laid over the model defaults, so a
config file or ``--set`` override can refine them field by field before the
result is validated as an :class:`~backend.src.models.ExperimentConfig`.
"""

import copy
from typing import Any, Dict, List

from .errors import ConfigError
from .models import SensorModel

# The pose source runs at 25 Hz with the position noise left after fusion.
_SENSOR: Dict[str, Any] = SensorModel.post_fusion().model_dump(mode="json")

_LEARNING: Dict[str, Any] = {
    "kernel_grid": {},
    "gp_capacity": 400,
    "batch_size": 50,
    "n_end": 8,
    "warmup": 30,
    "compute_bounds": True,
}


def _localized(compensate: bool) -> Dict[str, Any]:
    return {
        "name": "lemniscate-localized",
        "trajectory": {
            "shape": "lemniscate",
            "amplitude": 2.5,
            "duration": 40.0,
            "speed_profile": {"kind": "linearly_decreasing", "v0": 1.5, "v1": 0.3},
        },
        "disturbance": {"center": [0.0, 0.0, 1.5], "radius": 0.6},
        "sensor": dict(_SENSOR),
        "compensate": compensate,
        **_LEARNING,
    }


def _always_on(shape: str, amplitude: float) -> Dict[str, Any]:
    return {
        "name": shape,
        "trajectory": {
            "shape": shape,
            "amplitude": amplitude,
            "duration": 40.0,
            "speed_profile": {"kind": "constant", "v0": 1.0},
        },
        "disturbance": {"always_on": True},
        "sensor": dict(_SENSOR),
        "compensate": True,
        **_LEARNING,
    }


PRESETS: Dict[str, Dict[str, Any]] = {
    "lemniscate-openloop": _localized(compensate=False),
    "lemniscate-closedloop": _localized(compensate=True),
    "lemniscate": _always_on("lemniscate", 2.5),
    "circle": _always_on("circle", 2.0),
    "spiral": _always_on("spiral", 2.0),
}

PRESET_DESCRIPTIONS: Dict[str, str] = {
    "lemniscate-openloop": "Localized disturbance, decreasing speed, GP not injected",
    "lemniscate-closedloop": "Localized disturbance, decreasing speed, GP injected",
    "lemniscate": "Always-on disturbance, 1 m/s lemniscate",
    "circle": "Always-on disturbance, 1 m/s circle",
    "spiral": "Always-on disturbance, 1 m/s climbing spiral",
}


def preset_names() -> List[str]:
    return list(PRESETS)


def preset_tree(name: str) -> Dict[str, Any]:
    """Independent copy of a preset's configuration tree.

    Raises:
        ConfigError: For unknown preset names.
    """
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(
            f"Unknown preset '{name}'; available: {', '.join(PRESETS)}"
        ) from None
