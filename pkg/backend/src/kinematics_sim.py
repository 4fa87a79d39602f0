"""Seeded kinematic simulation: reference trajectories, the disturbance
field, noisy actuation and pose measurements, and the extraction of GP
training samples from what the vehicle actually observes.

Randomness is counter based. The noise used at control step ``k`` is drawn
from ``numpy.random.Philox`` keyed by ``(episode seed, sensor seed, channel)``
with the counter set from ``k``, so a run is a pure function of its
configuration and seed and any single step can be replayed on its own.
"""

import functools
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike

from .controller import VelocityCommand
from .dq_algebra import (
    FloatArray,
    Pose,
    PoseError,
    Twist,
    UnitDualQuaternion,
    UnitQuaternion,
    dq_from_pose,
    dq_mul,
    dq_to_pose,
    integrate_step,
    qconj_array,
    qmul_array,
    quat_exp_array,
    rotvec,
)
from .errors import InvalidInputError, OutOfRangeError
from .interfaces import DisturbanceSource
from .models import (
    ReferenceTrajectory,
    SensorModel,
    SpeedProfileKind,
    TrajectoryShape,
)

logger = logging.getLogger(__name__)

_PROCESS_CHANNEL = 1
_MEASURE_CHANNEL = 2
_SEED_LIMIT = 2**32


# ---------------------------------------------------------------------------
# Reference trajectories
# ---------------------------------------------------------------------------


def _arc(traj: ReferenceTrajectory, t: float) -> Tuple[float, float, float]:
    """Distance travelled along the profile and its first two derivatives."""
    profile = traj.speed_profile
    v0 = profile.v0
    if profile.kind == SpeedProfileKind.LINEARLY_DECREASING:
        assert profile.v1 is not None
        slope = (profile.v1 - v0) / traj.duration
        return v0 * t + 0.5 * slope * t * t, v0 + slope * t, slope
    return v0 * t, v0, 0.0


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


# Lemniscate of unit amplitude: theta is recovered from arc length through a
# table of per-interval Gauss-Legendre lengths, refined by Newton steps.
_LEMNISCATE_INTERVALS = 2048
_NEWTON_STEPS = 3
_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _lemniscate_speed(theta: FloatArray) -> FloatArray:
    """``|dp/dtheta|`` of the unit lemniscate; bounded away from zero."""
    return np.sqrt(np.cos(theta) ** 2 + np.cos(2.0 * theta) ** 2)


def _lemniscate_speed_at(theta: float) -> float:
    return math.hypot(math.cos(theta), math.cos(2.0 * theta))


def _lemniscate_speed_slope(theta: float) -> float:
    c, s = math.cos(theta), math.sin(theta)
    c2, s2 = math.cos(2.0 * theta), math.sin(2.0 * theta)
    return -(c * s + 2.0 * c2 * s2) / _lemniscate_speed_at(theta)


def _lemniscate_length(a: ArrayLike, b: ArrayLike) -> FloatArray:
    """Arc length of the unit lemniscate between ``a`` and ``b``."""
    lo = np.asarray(a, dtype=np.float64)
    hi = np.asarray(b, dtype=np.float64)
    half = 0.5 * (hi - lo)
    nodes = (0.5 * (lo + hi))[..., None] + half[..., None] * _GAUSS_NODES
    return half * (_lemniscate_speed(nodes) @ _GAUSS_WEIGHTS)


@functools.lru_cache(maxsize=1)
def _lemniscate_table() -> Tuple[FloatArray, FloatArray]:
    knots = np.linspace(0.0, 2.0 * math.pi, _LEMNISCATE_INTERVALS + 1)
    pieces = _lemniscate_length(knots[:-1], knots[1:])
    lengths = np.concatenate([[0.0], np.cumsum(pieces)])
    knots.setflags(write=False)
    lengths.setflags(write=False)
    return knots, lengths


def lemniscate_lap_length(amplitude: float) -> float:
    """Length of one full lap of the lemniscate with the given amplitude."""
    return amplitude * float(_lemniscate_table()[1][-1])


def _lemniscate_angle(distance: float) -> float:
    """Curve parameter at which the unit lemniscate has covered ``distance``."""
    knots, lengths = _lemniscate_table()
    laps, rest = divmod(distance, float(lengths[-1]))
    k = int(np.searchsorted(lengths, rest, side="right")) - 1
    k = min(max(k, 0), _LEMNISCATE_INTERVALS - 1)
    theta = float(np.interp(rest, lengths, knots))
    for _ in range(_NEWTON_STEPS):
        covered = float(lengths[k] + _lemniscate_length(knots[k], theta))
        theta -= (covered - rest) / _lemniscate_speed_at(theta)
    return theta + 2.0 * math.pi * laps


def reference_at(
    traj: ReferenceTrajectory, t: float
) -> Tuple[UnitDualQuaternion, Twist]:
    """Desired pose and twist at time ``t``.

    The curve is parametrized by the distance ``s(t)`` of the speed profile, so
    the profile is the exact path speed on every shape; the spiral adds its
    constant climb on top. Yaw follows the horizontal velocity, roll and pitch
    are zero, and the returned twist is the analytic derivative of the pose.

    Raises:
        OutOfRangeError: If ``t`` is outside ``[0, duration]``.
    """
    if t < -1e-12 or t > traj.duration + 1e-9:
        raise OutOfRangeError(f"t={t} outside [0, {traj.duration}]")
    A = traj.amplitude
    h = traj.base_height
    s, s_dot, s_ddot = _arc(traj, t)

    if traj.shape == TrajectoryShape.LEMNISCATE:
        th = _lemniscate_angle(s / A)
        th_d = s_dot / (A * _lemniscate_speed_at(th))
        th_dd = (s_ddot / A - _lemniscate_speed_slope(th) * th_d**2) / (
            _lemniscate_speed_at(th)
        )
        sin, cos = math.sin(th), math.cos(th)
        sin2, cos2 = math.sin(2.0 * th), math.cos(2.0 * th)
        pos = np.array([A * sin, 0.5 * A * sin2, h])
        vel = np.array([A * cos * th_d, A * cos2 * th_d, 0.0])
        acc = np.array(
            [
                -A * sin * th_d**2 + A * cos * th_dd,
                -2.0 * A * sin2 * th_d**2 + A * cos2 * th_dd,
                0.0,
            ]
        )
        # heading stays inside (-3pi/2, pi/2) on this curve, so cutting there
        # keeps the yaw continuous
        psi = -0.5 * math.pi + _wrap(math.atan2(vel[1], vel[0]) + 0.5 * math.pi)
        speed_sq = vel[0] ** 2 + vel[1] ** 2
        psi_dot = (vel[0] * acc[1] - vel[1] * acc[0]) / speed_sq
    else:
        th, th_d = s / A, s_dot / A
        sin, cos = math.sin(th), math.cos(th)
        climb = traj.climb_rate if traj.shape == TrajectoryShape.SPIRAL else 0.0
        pos = np.array([A * cos, A * sin, h + climb * t])
        vel = np.array([-A * sin * th_d, A * cos * th_d, climb])
        psi = th + 0.5 * math.pi
        psi_dot = th_d

    attitude = UnitQuaternion.from_yaw(psi)
    Q_d = dq_from_pose(Pose(attitude=attitude, position=pos))
    return Q_d, Twist(omega=np.array([0.0, 0.0, psi_dot]), vel=vel)


def reference_twist(traj: ReferenceTrajectory, t: float) -> Twist:
    return reference_at(traj, min(max(t, 0.0), traj.duration))[1]


# ---------------------------------------------------------------------------
# Disturbance field
# ---------------------------------------------------------------------------


def disturbance_at(
    field: DisturbanceSource, Q_true: UnitDualQuaternion
) -> Tuple[FloatArray, FloatArray]:
    """``(rho_omega, rho_v)`` of the field at the true pose, as fresh arrays."""
    rho_omega, rho_v = field.at(Q_true)
    return (
        np.array(rho_omega, dtype=np.float64).reshape(3),
        np.array(rho_v, dtype=np.float64).reshape(3),
    )


# ---------------------------------------------------------------------------
# Simulation state and stepping
# ---------------------------------------------------------------------------


def noise_key(seed: int, sensor_seed: int) -> int:
    if not (0 <= seed < _SEED_LIMIT and 0 <= sensor_seed < _SEED_LIMIT):
        raise InvalidInputError(f"seeds must lie in [0, 2**32), got {seed}")
    return (seed << 32) | sensor_seed


def _stream(key: int, channel: int, step: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=(key << 2) | channel, counter=step << 64)
    )


@dataclass(frozen=True, eq=False)
class SimState:
    """True vehicle state between control steps.

    Attributes:
        t: Simulation time (s).
        step: Index of the next control step.
        Q_true: True pose.
        key: Noise key derived from the episode and sensor seeds.
        last_applied: Twist applied during the previous step.
    """

    t: float
    step: int
    Q_true: UnitDualQuaternion
    key: int
    last_applied: Optional[Twist] = None

    @classmethod
    def start(
        cls, Q0: UnitDualQuaternion, seed: int, noise: SensorModel
    ) -> "SimState":
        return cls(t=0.0, step=0, Q_true=Q0, key=noise_key(seed, noise.seed))


def apply_and_step(
    state: SimState,
    cmd: VelocityCommand,
    field: DisturbanceSource,
    noise: SensorModel,
    dt: float,
) -> SimState:
    """Advance the true pose under ``cmd + rho(Q) + nu``.

    The angular noise has variance ``gyro_arw^2 / dt`` and the linear noise
    ``vel_noise_density^2 / dt`` per axis, i.e. discretized white noise.
    """
    rho_omega, rho_v = disturbance_at(field, state.Q_true)
    omega = cmd.omega_cmd + rho_omega
    vel = cmd.v_cmd + rho_v
    if noise.gyro_arw > 0 or noise.vel_noise_density > 0:
        z = _stream(state.key, _PROCESS_CHANNEL, state.step).standard_normal(6)
        omega = omega + (noise.gyro_arw / math.sqrt(dt)) * z[:3]
        vel = vel + (noise.vel_noise_density / math.sqrt(dt)) * z[3:]
    applied = Twist(omega=omega, vel=vel)
    return SimState(
        t=(state.step + 1) * dt,
        step=state.step + 1,
        Q_true=integrate_step(state.Q_true, applied, dt),
        key=state.key,
        last_applied=applied,
    )


def measurement_offset(state: SimState, noise: SensorModel) -> UnitDualQuaternion:
    """Right-multiplied corruption ``Q_rho`` of the measurement at this step."""
    if noise.mag_angle_sigma == 0 and noise.pos_sigma == 0:
        return UnitDualQuaternion.identity()
    z = _stream(state.key, _MEASURE_CHANNEL, state.step).standard_normal(7)
    axis = z[:3]
    angle = noise.mag_angle_sigma * z[3]
    q_rho = UnitQuaternion.from_axis_angle(axis, angle)
    return dq_from_pose(Pose(attitude=q_rho, position=noise.pos_sigma * z[4:]))


def measure(state: SimState, noise: SensorModel) -> Pose:
    """Corrupted pose ``Q o Q_rho`` at the current step."""
    Q_meas = dq_mul(state.Q_true, measurement_offset(state, noise))
    return dq_to_pose(Q_meas)


class PoseSensor:
    """Delivers a fresh measurement every ``control_rate / pose_rate`` steps
    and holds (or propagates) it in between."""

    def __init__(self, noise: SensorModel, control_rate: float):
        ratio = control_rate / noise.pose_rate
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise InvalidInputError(
                f"pose_rate {noise.pose_rate} does not divide {control_rate}"
            )
        self.noise = noise
        self.decimation = int(round(ratio))
        self._held: Optional[UnitDualQuaternion] = None

    def is_pose_tick(self, step: int) -> bool:
        return step % self.decimation == 0

    def observe(self, state: SimState) -> Tuple[UnitDualQuaternion, bool]:
        """Return the measurement used for feedback and whether it is fresh."""
        if self._held is None or self.is_pose_tick(state.step):
            self._held = dq_from_pose(measure(state, self.noise))
            return self._held, True
        return self._held, False

    def advance(self, state: SimState, cmd: VelocityCommand, dt: float) -> None:
        """Carry the held measurement across one control step.

        In ``"propagate"`` mode the attitude follows the gyro reading of the
        last step and the position follows the commanded velocity.
        """
        if self.noise.feedback != "propagate" or self._held is None:
            return
        gyro = state.last_applied.omega if state.last_applied else cmd.omega_cmd
        self._held = integrate_step(self._held, Twist(omega=gyro, vel=cmd.v_cmd), dt)


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualSample:
    """One training pair for each GP.

    Attributes:
        x_rot: Measured attitude error quaternion.
        x_trans: Measured pose error dual quaternion.
        y_rot: Estimated angular-velocity disturbance (rad/s, body frame).
        y_trans: Estimated linear-velocity disturbance (m/s, inertial frame).
    """

    x_rot: FloatArray
    x_trans: FloatArray
    y_rot: FloatArray
    y_trans: FloatArray


@dataclass(frozen=True)
class _PoseMark:
    q: FloatArray
    p: FloatArray
    error: FloatArray
    q_cmd: FloatArray
    p_cmd: FloatArray


class ResidualCollector:
    """Estimates the disturbance from measured poses and issued commands.

    The commands are integrated exactly (body rotations composed, inertial
    velocities summed). Over a window of ``window`` pose intervals the motion
    the commands predict is compared with the measured motion; the
    difference divided by the window duration is the target. Both inputs are
    the measured error at the middle pose tick of the window.
    """

    def __init__(self, window: int, pose_dt: float):
        if window < 1:
            raise InvalidInputError(f"window must be at least 1, got {window}")
        self.window = window
        self.duration = window * pose_dt
        self._marks: Deque[_PoseMark] = deque(maxlen=window + 1)
        self._q_cmd = np.array([0.0, 0.0, 0.0, 1.0])
        self._p_cmd = np.zeros(3)

    def record_command(self, cmd: VelocityCommand, dt: float) -> None:
        step = quat_exp_array(cmd.omega_cmd * dt)
        q = qmul_array(self._q_cmd, step)
        self._q_cmd = q / np.linalg.norm(q)
        self._p_cmd = self._p_cmd + cmd.v_cmd * dt

    def record_pose(
        self, Q_meas: UnitDualQuaternion, err_meas: PoseError
    ) -> Optional[ResidualSample]:
        self._marks.append(
            _PoseMark(
                q=Q_meas.attitude.to_array(),
                p=Q_meas.position,
                error=err_meas.dQ.to_array(),
                q_cmd=self._q_cmd.copy(),
                p_cmd=self._p_cmd.copy(),
            )
        )
        if len(self._marks) <= self.window:
            return None
        start, end = self._marks[0], self._marks[-1]
        middle = self._marks[len(self._marks) - 1 - self.window // 2]
        delta = qmul_array(qconj_array(start.q_cmd), end.q_cmd)
        predicted = qmul_array(start.q, delta)
        mismatch = qmul_array(qconj_array(predicted), end.q)
        mismatch = mismatch / np.linalg.norm(mismatch)
        y_rot = rotvec(UnitQuaternion.from_array(mismatch)) / self.duration
        y_trans = (end.p - start.p - (end.p_cmd - start.p_cmd)) / self.duration
        return ResidualSample(
            x_rot=middle.error[:4].copy(),
            x_trans=middle.error.copy(),
            y_rot=y_rot,
            y_trans=y_trans,
        )
