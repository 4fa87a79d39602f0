"""Velocity-level pose controller, its GP-compensated variant and the
Lyapunov quantities used to certify both."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import brentq

from .dq_algebra import (
    FloatArray,
    PoseError,
    Twist,
    pure_array,
    qconj_array,
    qmul_array,
)
from .errors import OutOfRangeError
from .models import GainSchedule, UltimateBound

logger = logging.getLogger(__name__)

# max of s * sqrt(1 - s) on [0, 1], reached at s = 2/3
_GAP_LEVEL = 2.0 / (3.0 * math.sqrt(3.0))
_GAP_ARG = 2.0 / 3.0


@dataclass(frozen=True, eq=False)
class VelocityCommand:
    """Commanded body angular velocity (rad/s) and inertial velocity (m/s)."""

    omega_cmd: FloatArray
    v_cmd: FloatArray

    def __post_init__(self) -> None:
        for name in ("omega_cmd", "v_cmd"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise OutOfRangeError(f"{name} is not finite: {arr}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def as_twist(self) -> Twist:
        return Twist(omega=self.omega_cmd, vel=self.v_cmd)


def _sign(x: float) -> float:
    return 1.0 if x >= 0.0 else -1.0


def _feedforward(err: PoseError, omega_d: FloatArray) -> FloatArray:
    """``vec(dq* o w~_d o dq)``, the reference rate seen in the body frame."""
    dq = err.dQ.to_array()[:4]
    return qmul_array(qmul_array(qconj_array(dq), pure_array(omega_d)), dq)[:3]


def nominal_control(
    err: PoseError,
    tw_d: Twist,
    gains: GainSchedule,
    rho: Optional[FloatArray] = None,
) -> VelocityCommand:
    """Pose-tracking law with unwinding protection.

    ``w = vec(dq* o w~_d o dq) - sign(dq0) K_w dq_vec`` and
    ``v = v_d - K_v dp`` with the inertial position error and ``sign(0) = 1``.
    ``rho`` is forwarded to the gain schedule, if one is attached.
    """
    k_omega, k_v = gains.at(rho)
    omega = _feedforward(err, tw_d.omega) - _sign(err.dq0) * (k_omega @ err.dq_vec)
    vel = tw_d.vel - k_v @ err.dp_inertial
    return VelocityCommand(omega_cmd=omega, v_cmd=vel)


def learned_control(
    nominal: VelocityCommand, mu_omega: ArrayLike, mu_v: ArrayLike
) -> VelocityCommand:
    """Subtract the GP disturbance estimates from the nominal command."""
    return VelocityCommand(
        omega_cmd=nominal.omega_cmd - np.asarray(mu_omega, dtype=np.float64),
        v_cmd=nominal.v_cmd - np.asarray(mu_v, dtype=np.float64),
    )


def lyapunov_V(err: PoseError) -> float:
    """``V = ||dq_vec||^2 + 1/2 ||dp||^2``."""
    return float(err.dq_vec @ err.dq_vec + 0.5 * err.dp_inertial @ err.dp_inertial)


def lyapunov_rate(err: PoseError, tw: Twist, tw_d: Twist) -> float:
    """Exact ``dV/dt`` for an arbitrary applied twist.

    ``dV/dt = dq0 dq_vec^T P(dOmega) + dp^T (v - v_d)``.
    """
    rel_omega = tw.omega - _feedforward(err, tw_d.omega)
    return float(
        err.dq0 * (err.dq_vec @ rel_omega) + err.dp_inertial @ (tw.vel - tw_d.vel)
    )


def nominal_lyapunov_rate(err: PoseError, gains: GainSchedule) -> float:
    """``-|dq0| dq^T K_w dq - dp^T K_v dp``, the rate under :func:`nominal_control`."""
    k_omega, k_v = gains.at()
    return float(
        -abs(err.dq0) * (err.dq_vec @ k_omega @ err.dq_vec)
        - err.dp_inertial @ k_v @ err.dp_inertial
    )


def worst_case_constants(
    max_rho_omega: float, max_rho_v: float, gains: GainSchedule
) -> Tuple[float, float]:
    """``c_omega = max rho_omega`` and ``c_v = max(rho_v)^2 / (2 alpha_v)``."""
    if max_rho_omega < 0 or max_rho_v < 0:
        raise OutOfRangeError("model-error bounds must be nonnegative")
    assert gains.alpha_v is not None
    return float(max_rho_omega), float(max_rho_v**2 / (2.0 * gains.alpha_v))


def _level_on_slice(s: FloatArray, eps0: float) -> FloatArray:
    """Largest ``V`` at ``||dq_vec||^2 = s`` inside the sublevel set."""
    return s + 0.5 * (eps0 - s * np.sqrt(1.0 - s))


def bound_level(
    eps0: float, reachable_only: bool = True, resolution: float = 1e-3
) -> float:
    """Maximum of ``V`` over ``{|dq0| ||dq_vec||^2 + ||dp||^2 <= eps0}``.

    With ``s = ||dq_vec||^2`` the constraint reads ``s sqrt(1 - s) + ||dp||^2 <=
    eps0``. For ``eps0`` below ``2 / (3 sqrt 3)`` the feasible ``s`` split into
    a component around the identity and one around ``dq0 = 0``; with
    ``reachable_only`` only the first is used. The edge of that component is
    bracketed on a grid of the given resolution and refined with Brent's method.
    """
    if eps0 < 0:
        raise OutOfRangeError(f"eps0 must be nonnegative, got {eps0}")
    if eps0 == 0.0 and reachable_only:
        return 0.0
    if not reachable_only or eps0 >= _GAP_LEVEL:
        return 1.0 + 0.5 * eps0

    grid = np.append(np.arange(0.0, _GAP_ARG, resolution), _GAP_ARG)
    gap = grid * np.sqrt(1.0 - grid)
    first_out = int(np.argmax(gap > eps0))
    edge = brentq(
        lambda s: s * math.sqrt(1.0 - s) - eps0,
        grid[first_out - 1],
        grid[first_out],
        xtol=1e-14,
    )
    feasible = grid[:first_out]
    candidates = np.append(_level_on_slice(feasible, eps0), edge)
    return float(np.max(candidates))


def ultimate_bound(
    c_omega: float,
    c_v: float,
    gains: GainSchedule,
    gamma_omega: float,
    gamma_v: float,
    reachable_only: bool = True,
) -> UltimateBound:
    """Ultimate bound of the learned closed loop.

    ``eps0 = (c_omega + c_v) / alpha_n`` with ``alpha_n = 1/2 min(alpha_w,
    alpha_v)``; ``M`` comes from :func:`bound_level`.

    Raises:
        OutOfRangeError: On negative constants or confidences outside (0, 1].
    """
    if c_omega < 0 or c_v < 0:
        raise OutOfRangeError(f"constants must be nonnegative: {c_omega}, {c_v}")
    for gamma in (gamma_omega, gamma_v):
        if not 0.0 < gamma <= 1.0:
            raise OutOfRangeError(f"confidence {gamma} outside (0, 1]")
    alpha_n = gains.alpha_n
    eps0 = (c_omega + c_v) / alpha_n
    level = bound_level(eps0, reachable_only=reachable_only)
    if level >= 1.0:
        logger.warning(
            f"Ultimate bound admits half-turn attitude errors: eps0={eps0:.4g}, "
            f"M={level:.4g}"
        )
    return UltimateBound(
        c_omega=c_omega,
        c_v=c_v,
        alpha_n=alpha_n,
        eps0=eps0,
        M=level,
        gamma=min(gamma_omega, gamma_v),
    )
