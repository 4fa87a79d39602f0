"""Quaternion and dual-quaternion algebra for rigid-body pose kinematics.

Storage convention: every quaternion is stored as ``(x, y, z, w)``, i.e. the
vector part first and the scalar part last. A dual quaternion is flattened
as ``(real, dual)``, eight numbers in total. The same order is used by the
episode logs, by the GP input features and by
``scipy.spatial.transform.Rotation`` (``scalar_first=False``), so arrays cross
module boundaries without reshuffling.

All value types are immutable. Their numpy buffers are marked read-only and
the operations below never mutate their arguments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Self, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .config import MAX_STEP, UNIT_TOL
from .errors import (
    InvalidInputError,
    NonUnitInputError,
    OutOfRangeError,
    StepTooLargeError,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ErrorFrame = Literal["body", "inertial"]


def _frozen(values: ArrayLike, size: int, name: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise InvalidInputError(f"{name} must have {size} components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite components: {arr}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Array kernels. These accept (..., 4) / (..., 8) arrays and broadcast, so the
# GP module can reuse them on whole training sets.
# ---------------------------------------------------------------------------


def qmul_array(a: FloatArray, b: FloatArray) -> FloatArray:
    """Quaternion product on ``(..., 4)`` arrays.

    Expanded form of ``[[a0 I + S(a), a], [-a^T, a0]] @ b``.
    """
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + bw * ax + ay * bz - az * by,
            aw * by + bw * ay + az * bx - ax * bz,
            aw * bz + bw * az + ax * by - ay * bx,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def qconj_array(q: FloatArray) -> FloatArray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., :3] *= -1.0
    return out


def pure_array(v: ArrayLike) -> FloatArray:
    vec = np.asarray(v, dtype=np.float64)
    return np.concatenate([vec, np.zeros(vec.shape[:-1] + (1,))], axis=-1)


def dqmul_array(A: FloatArray, B: FloatArray) -> FloatArray:
    real = qmul_array(A[..., :4], B[..., :4])
    dual = qmul_array(A[..., :4], B[..., 4:]) + qmul_array(A[..., 4:], B[..., :4])
    return np.concatenate([real, dual], axis=-1)


def dqconj_array(Q: FloatArray) -> FloatArray:
    return np.concatenate([qconj_array(Q[..., :4]), qconj_array(Q[..., 4:])], axis=-1)


def position_array(Q: FloatArray) -> FloatArray:
    """Translation ``vec(2 D(Q) o P(Q)*)`` for ``(..., 8)`` arrays."""
    return 2.0 * qmul_array(Q[..., 4:], qconj_array(Q[..., :4]))[..., :3]


def skew(v: ArrayLike) -> FloatArray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Quaternion:
    """General quaternion ``q = (v, s)``.

    Attributes:
        v: Vector part, three components.
        s: Scalar (real) part.
    """

    v: FloatArray
    s: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "v", _frozen(self.v, 3, "quaternion vector part"))
        s = float(self.s)
        if not np.isfinite(s):
            raise InvalidInputError(f"quaternion scalar part is not finite: {s}")
        object.__setattr__(self, "s", s)

    @classmethod
    def from_array(cls, arr: ArrayLike) -> Self:
        values = np.asarray(arr, dtype=np.float64).reshape(-1)
        if values.shape != (4,):
            raise InvalidInputError(f"expected 4 components, got {values.size}")
        return cls(v=values[:3], s=values[3])

    def to_array(self) -> FloatArray:
        return np.append(self.v, self.s)

    def norm(self) -> float:
        return float(np.sqrt(self.v @ self.v + self.s * self.s))

    def __neg__(self) -> "Quaternion":
        return type(self)(v=-self.v, s=-self.s)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(v={self.v.tolist()}, s={self.s})"


@dataclass(frozen=True, eq=False, repr=False)
class UnitQuaternion(Quaternion):
    """Quaternion with ``| ||q|| - 1 | <= 1e-9``; represents an attitude."""

    def __post_init__(self) -> None:
        super().__post_init__()
        deviation = abs(self.norm() - 1.0)
        if deviation > UNIT_TOL:
            raise NonUnitInputError(
                f"quaternion norm deviates from 1 by {deviation:.3e}"
            )

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(v=np.zeros(3), s=1.0)

    @classmethod
    def normalized(cls, arr: ArrayLike) -> "UnitQuaternion":
        values = np.asarray(arr, dtype=np.float64).reshape(4)
        return cls.from_array(values / np.linalg.norm(values))

    @classmethod
    def from_axis_angle(cls, axis: ArrayLike, angle: float) -> "UnitQuaternion":
        a = np.asarray(axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        return cls(v=np.sin(0.5 * angle) * a, s=np.cos(0.5 * angle))

    @classmethod
    def from_rotvec(cls, phi: ArrayLike) -> "UnitQuaternion":
        return cls.from_array(quat_exp_array(np.asarray(phi, dtype=np.float64)))

    @classmethod
    def from_yaw(cls, psi: float) -> "UnitQuaternion":
        return cls(v=np.array([0.0, 0.0, np.sin(0.5 * psi)]), s=np.cos(0.5 * psi))


@dataclass(frozen=True, eq=False, repr=False)
class PureQuaternion(Quaternion):
    """Quaternion with zero scalar part, the embedding of a 3-vector."""

    s: float = 0.0

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.s != 0.0:
            raise InvalidInputError(f"pure quaternion has scalar part {self.s}")


@dataclass(frozen=True, eq=False)
class DualQuaternion:
    """General dual quaternion ``Q = P + eps D`` with ``eps**2 = 0``.

    Attributes:
        real: Principal part ``P(Q)``.
        dual: Dual part ``D(Q)``.
    """

    real: Quaternion
    dual: Quaternion

    @classmethod
    def from_array(cls, arr: ArrayLike) -> Self:
        values = np.asarray(arr, dtype=np.float64).reshape(-1)
        if values.shape != (8,):
            raise InvalidInputError(f"expected 8 components, got {values.size}")
        return cls(
            real=Quaternion.from_array(values[:4]),
            dual=Quaternion.from_array(values[4:]),
        )

    @classmethod
    def zero(cls) -> Self:
        return cls.from_array(np.zeros(8))

    def to_array(self) -> FloatArray:
        return np.concatenate([self.real.to_array(), self.dual.to_array()])

    def __neg__(self) -> "DualQuaternion":
        return type(self).from_array(-self.to_array())


@dataclass(frozen=True, eq=False)
class UnitDualQuaternion(DualQuaternion):
    """Unit dual quaternion, i.e. a pose.

    ``||P(Q)|| = 1`` and ``P o D* + D o P* = 0`` both hold within 1e-9.
    """

    def __post_init__(self) -> None:
        P = self.real.to_array()
        D = self.dual.to_array()
        deviation = abs(float(np.linalg.norm(P)) - 1.0)
        if deviation > UNIT_TOL:
            raise NonUnitInputError(
                f"principal part norm deviates from 1 by {deviation:.3e}"
            )
        residual = qmul_array(P, qconj_array(D)) + qmul_array(D, qconj_array(P))
        worst = float(np.max(np.abs(residual)))
        if worst > UNIT_TOL:
            raise NonUnitInputError(
                f"dual part is not orthogonal to the principal part ({worst:.3e})"
            )
        if not isinstance(self.real, UnitQuaternion):
            object.__setattr__(self, "real", UnitQuaternion(v=P[:3], s=P[3]))

    @classmethod
    def identity(cls) -> "UnitDualQuaternion":
        return cls.from_array(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))

    @property
    def attitude(self) -> UnitQuaternion:
        return self.real

    @property
    def position(self) -> FloatArray:
        return position_array(self.to_array())


@dataclass(frozen=True, eq=False)
class Pose:
    """Attitude (body to inertial) and inertial position in metres."""

    attitude: UnitQuaternion
    position: FloatArray

    def __post_init__(self) -> None:
        if not isinstance(self.attitude, UnitQuaternion):
            raise NonUnitInputError("pose attitude must be a UnitQuaternion")
        object.__setattr__(self, "position", _frozen(self.position, 3, "position"))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(attitude=UnitQuaternion.identity(), position=np.zeros(3))

    @classmethod
    def from_array(cls, arr: ArrayLike) -> "Pose":
        """Build from ``(qx, qy, qz, qw, px, py, pz)``."""
        values = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(
            attitude=UnitQuaternion.from_array(values[:4]),
            position=values[4:],
        )

    def to_array(self) -> FloatArray:
        return np.concatenate([self.attitude.to_array(), self.position])


@dataclass(frozen=True, eq=False)
class Twist:
    """Body angular velocity (rad/s) and inertial linear velocity (m/s)."""

    omega: FloatArray
    vel: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega", _frozen(self.omega, 3, "omega"))
        object.__setattr__(self, "vel", _frozen(self.vel, 3, "vel"))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(omega=np.zeros(3), vel=np.zeros(3))

    def __add__(self, other: "Twist") -> "Twist":
        return Twist(omega=self.omega + other.omega, vel=self.vel + other.vel)


@dataclass(frozen=True, eq=False)
class PoseError:
    """Pose error ``dQ = Q_d* o Q`` with its cached components.

    Attributes:
        dQ: The error dual quaternion.
        dq_vec: Vector part of the attitude error quaternion.
        dq0: Scalar part of the attitude error quaternion.
        dp_inertial: Position error ``p - p_d`` in the inertial frame.
        dp_body: Position error expressed in the desired frame.
        reference: The desired pose ``Q_d`` the error was formed against.
    """

    dQ: UnitDualQuaternion
    dq_vec: FloatArray
    dq0: float
    dp_inertial: FloatArray
    dp_body: FloatArray
    reference: UnitDualQuaternion = field(repr=False)

    @classmethod
    def from_error(cls, dQ: UnitDualQuaternion, Q_d: UnitDualQuaternion) -> "PoseError":
        arr = dQ.to_array()
        dp_body = position_array(arr)
        dp_inertial = rotation_matrix(Q_d.attitude) @ dp_body
        return cls(
            dQ=dQ,
            dq_vec=_frozen(arr[:3], 3, "dq_vec"),
            dq0=float(arr[3]),
            dp_inertial=_frozen(dp_inertial, 3, "dp_inertial"),
            dp_body=_frozen(dp_body, 3, "dp_body"),
            reference=Q_d,
        )

    @property
    def attitude_error(self) -> UnitQuaternion:
        return self.dQ.attitude


# ---------------------------------------------------------------------------
# Quaternion operations
# ---------------------------------------------------------------------------


def quat_mul(p: Quaternion, q: Quaternion) -> Quaternion:
    return Quaternion.from_array(qmul_array(p.to_array(), q.to_array()))


def quat_conj(q: Quaternion) -> Quaternion:
    return type(q)(v=-q.v, s=q.s)


def quat_norm(q: Quaternion) -> float:
    return q.norm()


def quat_exp_array(phi: FloatArray) -> FloatArray:
    """Unit quaternion of the rotation vector ``phi`` (rad)."""
    angle = float(np.linalg.norm(phi))
    if angle < 1e-12:
        out = np.append(0.5 * phi, 1.0)
        return out / np.linalg.norm(out)
    return np.append(np.sin(0.5 * angle) * phi / angle, np.cos(0.5 * angle))


def rotvec(q: UnitQuaternion) -> FloatArray:
    """Rotation vector (axis times angle) of a unit quaternion."""
    return np.asarray(Rotation.from_quat(q.to_array()).as_rotvec(), dtype=np.float64)


def rotation_matrix(q: Quaternion) -> FloatArray:
    """``R(q) = (q0^2 - q^T q) I + 2 q q^T + 2 q0 S(q)``."""
    v, s = q.v, q.s
    return (s * s - v @ v) * np.eye(3) + 2.0 * np.outer(v, v) + 2.0 * s * skew(v)


def rotate_vector(q: UnitQuaternion, x: ArrayLike) -> FloatArray:
    """Vector part of ``q o x~ o q*``."""
    qa = q.to_array()
    return qmul_array(qmul_array(qa, pure_array(x)), qconj_array(qa))[:3]


# ---------------------------------------------------------------------------
# Dual-quaternion operations
# ---------------------------------------------------------------------------


def _as_unit_dq(Q: DualQuaternion) -> UnitDualQuaternion:
    if isinstance(Q, UnitDualQuaternion):
        return Q
    return UnitDualQuaternion.from_array(Q.to_array())


def dq_mul(A: DualQuaternion, B: DualQuaternion) -> DualQuaternion:
    """Dual-quaternion product; unit inputs give a unit result."""
    product = dqmul_array(A.to_array(), B.to_array())
    if isinstance(A, UnitDualQuaternion) and isinstance(B, UnitDualQuaternion):
        return UnitDualQuaternion.from_array(product)
    return DualQuaternion.from_array(product)


def dq_conj(Q: DualQuaternion) -> DualQuaternion:
    return type(Q).from_array(dqconj_array(Q.to_array()))


def dq_from_pose(pose: Pose) -> UnitDualQuaternion:
    """``Q = q + eps 1/2 (p~ o q)``."""
    q = pose.attitude.to_array()
    dual = 0.5 * qmul_array(pure_array(pose.position), q)
    return UnitDualQuaternion.from_array(np.concatenate([q, dual]))


def dq_to_pose(Q: DualQuaternion) -> Pose:
    """Recover ``(q, p)`` with ``p~ = 2 D(Q) o P(Q)*``.

    Raises:
        NonUnitInputError: If ``Q`` violates the unit dual quaternion invariants.
    """
    unit = _as_unit_dq(Q)
    return Pose(attitude=unit.attitude, position=unit.position)


def twist_dq(Q: UnitDualQuaternion, tw: Twist) -> DualQuaternion:
    """Twist dual quaternion with ``P = w~`` and ``D = q* o v~ o q``."""
    return DualQuaternion.from_array(_twist_array(Q.to_array()[:4], tw.omega, tw.vel))


def _twist_array(q: FloatArray, omega: FloatArray, vel: FloatArray) -> FloatArray:
    dual = qmul_array(qmul_array(qconj_array(q), pure_array(vel)), q)
    dual[3] = 0.0
    return np.concatenate([pure_array(omega), dual])


def _rate_array(x: FloatArray, omega: FloatArray, vel: FloatArray) -> FloatArray:
    return 0.5 * dqmul_array(x, _twist_array(x[:4], omega, vel))


def dq_derivative(Q: UnitDualQuaternion, tw: Twist) -> DualQuaternion:
    """Kinematics ``dQ/dt = 1/2 Q o Omega``."""
    return DualQuaternion.from_array(_rate_array(Q.to_array(), tw.omega, tw.vel))


# ---------------------------------------------------------------------------
# Pose error and its dynamics
# ---------------------------------------------------------------------------


def pose_error(Q_d: DualQuaternion, Q: DualQuaternion) -> PoseError:
    """Error ``dQ = Q_d* o Q`` together with its attitude and position parts.

    Raises:
        NonUnitInputError: If either argument is not a unit dual quaternion.
    """
    ref = _as_unit_dq(Q_d)
    actual = _as_unit_dq(Q)
    dQ = UnitDualQuaternion.from_array(
        dqmul_array(dqconj_array(ref.to_array()), actual.to_array())
    )
    return PoseError.from_error(dQ, ref)


def _error_rate_array(
    dQ: FloatArray,
    q_d: FloatArray,
    tw: Twist,
    tw_d: Twist,
    frame: ErrorFrame,
) -> FloatArray:
    dq = dQ[:4]
    dq_c = qconj_array(dq)
    dp_body = position_array(dQ)
    rot_d = rotation_matrix(Quaternion.from_array(q_d))
    principal = pure_array(tw.omega) - qmul_array(
        qmul_array(dq_c, pure_array(tw_d.omega)), dq
    )
    if frame == "body":
        dp_body_rate = np.cross(dp_body, tw_d.omega) + rot_d.T @ (tw.vel - tw_d.vel)
        dual = qmul_array(qmul_array(dq_c, pure_array(dp_body_rate)), dq)
    elif frame == "inertial":
        q = qmul_array(q_d, dq)
        dual = qmul_array(
            qmul_array(dq_c, pure_array(skew(dp_body) @ tw_d.omega)), dq
        ) + qmul_array(qmul_array(qconj_array(q), pure_array(tw.vel - tw_d.vel)), q)
    else:
        raise InvalidInputError(f"unknown error frame {frame!r}")
    principal[3] = 0.0
    dual[3] = 0.0
    return 0.5 * dqmul_array(dQ, np.concatenate([principal, dual]))


def error_derivative(
    err: PoseError, tw: Twist, tw_d: Twist, frame: ErrorFrame = "body"
) -> DualQuaternion:
    """Error kinematics ``d(dQ)/dt = 1/2 dQ o dOmega``.

    ``P(dOmega) = w~ - dq* o w~_d o dq``. With ``frame="body"`` the dual part
    is ``dq* o d/dt(dp~_b) o dq`` where
    ``d/dt dp_b = dp_b x w_d + R(q_d)^T (v - v_d)``. With ``frame="inertial"``
    the equivalent form ``dq* o (S(dp_b) w_d)~ o dq + q* o dv~ o q`` is used.
    """
    return DualQuaternion.from_array(
        _error_rate_array(
            err.dQ.to_array(), err.reference.attitude.to_array(), tw, tw_d, frame
        )
    )


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------


def project_unit_array(x: FloatArray) -> FloatArray:
    """Normalize ``P`` then remove ``1/2 (P o D* + D o P*) o P`` from ``D``."""
    P = x[:4] / np.linalg.norm(x[:4])
    D = x[4:]
    sym = qmul_array(P, qconj_array(D)) + qmul_array(D, qconj_array(P))
    D = D - 0.5 * qmul_array(sym, P)
    return np.concatenate([P, D])


def _rk4(
    x: FloatArray, f: Callable[[float, FloatArray], FloatArray], t: float, h: float
) -> FloatArray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_step(dt: float) -> None:
    if dt > MAX_STEP:
        raise StepTooLargeError(f"dt={dt} exceeds the maximum step of {MAX_STEP} s")
    if not dt > 0.0:
        raise OutOfRangeError(f"dt must be positive, got {dt}")


def integrate_flow(
    Q: UnitDualQuaternion,
    twist_fn: Callable[[float], Twist],
    t: float,
    dt: float,
) -> UnitDualQuaternion:
    """One RK4 step of the pose kinematics under a time-varying twist.

    Args:
        Q: Pose at time ``t``.
        twist_fn: Twist as a function of time, sampled at ``t``, ``t + dt/2``
            and ``t + dt``.
        t: Start time of the step (s).
        dt: Step length, ``0 < dt <= 0.1`` s.

    Returns:
        The projected unit dual quaternion at ``t + dt``.

    Raises:
        StepTooLargeError: If ``dt > 0.1``.
    """
    _check_step(dt)

    def rate(tau: float, x: FloatArray) -> FloatArray:
        tw = twist_fn(tau)
        return _rate_array(x, tw.omega, tw.vel)

    x = _rk4(Q.to_array(), rate, t, dt)
    return UnitDualQuaternion.from_array(project_unit_array(x))


def integrate_step(Q: UnitDualQuaternion, tw: Twist, dt: float) -> UnitDualQuaternion:
    """RK4 step of ``dQ/dt = 1/2 Q o Omega`` under a constant twist, projected.

    Raises:
        StepTooLargeError: If ``dt > 0.1``.
    """
    _check_step(dt)
    omega, vel = tw.omega, tw.vel
    x = _rk4(Q.to_array(), lambda _t, y: _rate_array(y, omega, vel), 0.0, dt)
    return UnitDualQuaternion.from_array(project_unit_array(x))


def integrate_error(
    err: PoseError,
    reference_fn: Callable[[float], UnitDualQuaternion],
    twist_fn: Callable[[float], Twist],
    reference_twist_fn: Callable[[float], Twist],
    t: float,
    dt: float,
    frame: ErrorFrame = "body",
) -> PoseError:
    """Integrate the error kinematics directly for one RK4 step.

    ``reference_fn`` supplies ``Q_d`` at the stage times, since the rate of
    the body-frame position error depends on ``R(q_d)``.
    """
    _check_step(dt)

    def rate(tau: float, x: FloatArray) -> FloatArray:
        q_d = reference_fn(tau).to_array()[:4]
        return _error_rate_array(x, q_d, twist_fn(tau), reference_twist_fn(tau), frame)

    x = project_unit_array(_rk4(err.dQ.to_array(), rate, t, dt))
    return PoseError.from_error(
        UnitDualQuaternion.from_array(x), reference_fn(t + dt)
    )


# ---------------------------------------------------------------------------
# Measurement corruption algebra
# ---------------------------------------------------------------------------


def measurement_error_decomposition(
    dQ: UnitDualQuaternion, Q_rho: UnitDualQuaternion
) -> Tuple[UnitQuaternion, FloatArray]:
    """Attitude and body position error seen through a corrupted measurement.

    The measured error is ``dQ o Q_rho``. Its principal part is
    ``dq o q_rho`` and its position part is
    ``(dq o p~_rho o q_rho + dp~_b o dq o q_rho) o q_rho* o dq*``.

    Returns:
        ``(dq_rho, dp_body_rho)``.
    """
    dq = dQ.attitude.to_array()
    q_rho = Q_rho.attitude.to_array()
    p_rho = pure_array(Q_rho.position)
    dp_body = pure_array(dQ.position)
    dq_rho = qmul_array(dq, q_rho)
    inner = qmul_array(qmul_array(dq, p_rho), q_rho) + qmul_array(
        qmul_array(dp_body, dq), q_rho
    )
    dp_rho = qmul_array(qmul_array(inner, qconj_array(q_rho)), qconj_array(dq))
    return UnitQuaternion.normalized(dq_rho), dp_rho[:3]


def pose_to_dq_array(poses: FloatArray) -> FloatArray:
    """Vectorized :func:`dq_from_pose` for ``(N, 7)`` pose rows."""
    q = poses[..., :4]
    return np.concatenate([q, 0.5 * qmul_array(pure_array(poses[..., 4:]), q)], axis=-1)


def attitude_angle(q: UnitQuaternion, other: Optional[UnitQuaternion] = None) -> float:
    """Rotation angle of ``q`` (or of ``q* o other``) in ``[0, pi]``."""
    rel = q.to_array()
    if other is not None:
        rel = qmul_array(qconj_array(rel), other.to_array())
    return float(2.0 * np.arctan2(np.linalg.norm(rel[:3]), abs(rel[3])))
