import math
from datetime import datetime, timezone
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

from .config import ARTIFACT_VERSION, MAX_STEP, SCHEMA_VERSION
from .dq_algebra import FloatArray, UnitDualQuaternion
from .errors import OutOfRangeError

if TYPE_CHECKING:
    from .interfaces import GainScheduleFn


def _identity3(scale: float) -> List[List[float]]:
    return [[scale if i == j else 0.0 for j in range(3)] for i in range(3)]


class TrajectoryShape(str, Enum):
    """Closed-form reference curves the simulator can track."""

    LEMNISCATE = "lemniscate"
    CIRCLE = "circle"
    SPIRAL = "spiral"


class SpeedProfileKind(str, Enum):
    CONSTANT = "constant"
    LINEARLY_DECREASING = "linearly_decreasing"


class SpeedProfile(BaseModel):
    """Speed law along the reference curve.

    Attributes:
        kind: Constant speed or a linear ramp from ``v0`` down to ``v1``.
        v0: Constant speed, or initial speed of the ramp (m/s).
        v1: Final speed of the ramp (m/s); unused for constant profiles.
    """

    kind: SpeedProfileKind = Field(
        SpeedProfileKind.CONSTANT, description="Constant or linearly decreasing"
    )
    v0: float = Field(1.0, gt=0, description="Initial (or constant) speed in m/s")
    v1: Optional[float] = Field(None, gt=0, description="Final speed in m/s")

    @model_validator(mode="after")
    def _check_ramp(self) -> "SpeedProfile":
        if self.kind == SpeedProfileKind.LINEARLY_DECREASING:
            if self.v1 is None:
                raise ValueError("a linearly decreasing profile needs v1")
            if self.v1 > self.v0:
                raise ValueError(f"v1={self.v1} must not exceed v0={self.v0}")
        return self


class ReferenceTrajectory(BaseModel):
    """Reference pose trajectory.

    Attributes:
        shape: Lemniscate of Gerono, circle or ascending spiral.
        amplitude: Size parameter ``A`` of the curve (m).
        base_height: Altitude of the curve plane (m).
        duration: Length of the trajectory (s).
        speed_profile: Speed law driving the curve parameter.
        climb_rate: Vertical speed of the spiral (m/s).
    """

    shape: TrajectoryShape = Field(TrajectoryShape.LEMNISCATE, description="Curve")
    amplitude: float = Field(2.5, gt=0, description="Curve size A in m")
    base_height: float = Field(1.5, description="Altitude in m")
    duration: float = Field(40.0, gt=0, description="Duration in s")
    speed_profile: SpeedProfile = Field(default_factory=SpeedProfile)
    climb_rate: float = Field(0.05, ge=0, description="Spiral climb rate in m/s")

    @model_validator(mode="after")
    def _check_spiral(self) -> "ReferenceTrajectory":
        if self.shape == TrajectoryShape.SPIRAL and self.climb_rate <= 0:
            raise ValueError("a spiral needs a positive climb_rate")
        return self


class DisturbanceField(BaseModel):
    """State-dependent disturbance acting on yaw rate and vertical velocity.

    Attributes:
        enabled: When false the field is identically zero.
        center: Centre of the Gaussian bump (m).
        radius: Width of the bump (m).
        yaw_rate_amp: Peak yaw-rate disturbance (rad/s).
        climb_amp: Peak downward velocity disturbance (m/s).
        always_on: Ignore the bump and apply the peak everywhere.
    """

    enabled: bool = Field(True, description="Whether the field acts at all")
    center: List[float] = Field(
        default_factory=lambda: [0.0, 0.0, 1.5], description="Bump centre in m"
    )
    radius: float = Field(0.6, gt=0, description="Bump width in m")
    yaw_rate_amp: float = Field(0.3, description="Peak yaw-rate in rad/s")
    climb_amp: float = Field(0.5, description="Peak sink rate in m/s")
    always_on: bool = Field(False, description="Apply the peak everywhere")

    @field_validator("center")
    @classmethod
    def _three(cls, value: List[float]) -> List[float]:
        if len(value) != 3:
            raise ValueError("center must have three components")
        return value

    def at(self, Q_true: UnitDualQuaternion) -> Tuple[FloatArray, FloatArray]:
        """Yaw-rate and sink-rate disturbance at the given pose.

        The strength is ``exp(-||p - c||^2 / (2 r^2))``, or 1 when the field
        is always on.
        """
        if not self.enabled:
            return np.zeros(3), np.zeros(3)
        if self.always_on:
            strength = 1.0
        else:
            offset = Q_true.position - np.asarray(self.center)
            strength = math.exp(-float(offset @ offset) / (2.0 * self.radius**2))
        rho_omega = np.array([0.0, 0.0, self.yaw_rate_amp * strength])
        rho_v = np.array([0.0, 0.0, -self.climb_amp * strength])
        return rho_omega, rho_v


class SensorModel(BaseModel):
    """Sensor and process-noise figures.

    Attributes:
        mag_angle_sigma: Std of the attitude measurement error angle (rad).
        pos_sigma: Std of each position measurement component (m).
        gyro_arw: Gyro angle random walk (rad/sqrt(s)).
        vel_noise_density: Linear velocity noise density (m/s/sqrt(s)).
        pose_rate: Rate of fresh pose measurements (Hz).
        imu_rate: IMU rate (Hz); informational, gyro noise enters per control step.
        seed: Base seed mixed with the episode seed.
        feedback: ``"zoh"`` holds the last measurement between pose ticks,
            ``"propagate"`` advances it with the gyro and the commanded velocity.
    """

    mag_angle_sigma: float = Field(math.radians(0.5), ge=0)
    pos_sigma: float = Field(0.5, ge=0)
    gyro_arw: float = Field(math.radians(1.0) / 60.0, ge=0)
    vel_noise_density: float = Field(0.002, ge=0)
    pose_rate: float = Field(5.0, gt=0)
    imu_rate: float = Field(300.0, gt=0)
    seed: int = Field(0, ge=0)
    feedback: Literal["zoh", "propagate"] = Field("zoh")

    @classmethod
    def noiseless(cls, **kwargs: Any) -> "SensorModel":
        values: Dict[str, Any] = dict(
            mag_angle_sigma=0.0, pos_sigma=0.0, gyro_arw=0.0, vel_noise_density=0.0
        )
        values.update(kwargs)
        return cls(**values)

    @classmethod
    def post_fusion(cls, **kwargs: Any) -> "SensorModel":
        """Pose figures after fusing the raw 5 Hz fix with the IMU at 25 Hz."""
        values: Dict[str, Any] = dict(
            pose_rate=25.0, pos_sigma=0.02, feedback="propagate"
        )
        values.update(kwargs)
        return cls(**values)


class GainSchedule(BaseModel):
    """Feedback gains of the pose controller.

    The matrices are constant by default. A gain-scheduling callable can be
    attached with :meth:`with_schedule`; its output is checked against the
    ``alpha`` lower bounds every time it is evaluated.

    Attributes:
        K_omega: Attitude gain, 3x3 symmetric positive definite (1/s).
        K_v: Position gain, 3x3 symmetric positive definite (1/s).
        alpha_omega: Lower bound with ``K_omega >= alpha_omega I``. Defaults to
            the smallest eigenvalue of ``K_omega``.
        alpha_v: Lower bound with ``K_v >= alpha_v I``.
    """

    K_omega: List[List[float]] = Field(default_factory=lambda: _identity3(2.0))
    K_v: List[List[float]] = Field(default_factory=lambda: _identity3(2.0))
    alpha_omega: Optional[float] = Field(None, gt=0)
    alpha_v: Optional[float] = Field(None, gt=0)

    _k_omega: NDArray[np.float64] = PrivateAttr()
    _k_v: NDArray[np.float64] = PrivateAttr()
    _schedule: Any = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_gains(self) -> "GainSchedule":
        k_omega = _spd(self.K_omega, "K_omega")
        k_v = _spd(self.K_v, "K_v")
        min_omega = float(np.linalg.eigvalsh(k_omega)[0])
        min_v = float(np.linalg.eigvalsh(k_v)[0])
        if self.alpha_omega is None:
            self.alpha_omega = min_omega
        if self.alpha_v is None:
            self.alpha_v = min_v
        if min_omega < self.alpha_omega - 1e-12:
            raise ValueError(f"K_omega is not >= {self.alpha_omega} I")
        if min_v < self.alpha_v - 1e-12:
            raise ValueError(f"K_v is not >= {self.alpha_v} I")
        return self

    def model_post_init(self, __context: Any) -> None:
        self._k_omega = np.asarray(self.K_omega, dtype=np.float64)
        self._k_v = np.asarray(self.K_v, dtype=np.float64)
        self._k_omega.setflags(write=False)
        self._k_v.setflags(write=False)

    @classmethod
    def diagonal(cls, k_omega: float, k_v: float) -> "GainSchedule":
        return cls(K_omega=_identity3(k_omega), K_v=_identity3(k_v))

    @property
    def alpha_n(self) -> float:
        assert self.alpha_omega is not None and self.alpha_v is not None
        return 0.5 * min(self.alpha_omega, self.alpha_v)

    def with_schedule(self, schedule: "GainScheduleFn") -> "GainSchedule":
        scheduled = self.model_copy()
        scheduled._schedule = schedule
        return scheduled

    def at(
        self, rho: Optional[NDArray[np.float64]] = None
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Gain matrices for the scheduling variable ``rho``."""
        if self._schedule is None or rho is None:
            return self._k_omega, self._k_v
        k_omega, k_v = self._schedule(rho)
        k_omega = np.asarray(k_omega, dtype=np.float64)
        k_v = np.asarray(k_v, dtype=np.float64)
        assert self.alpha_omega is not None and self.alpha_v is not None
        if (
            np.linalg.eigvalsh(0.5 * (k_omega + k_omega.T))[0] < self.alpha_omega
            or np.linalg.eigvalsh(0.5 * (k_v + k_v.T))[0] < self.alpha_v
        ):
            raise OutOfRangeError("scheduled gains violate the declared lower bounds")
        return k_omega, k_v


def _spd(rows: List[List[float]], name: str) -> NDArray[np.float64]:
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {matrix.shape}")
    if np.max(np.abs(matrix - matrix.T)) > 1e-12:
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(matrix)[0] <= 0:
        raise ValueError(f"{name} is not positive definite")
    return matrix


class KernelConfig(BaseModel):
    """Squared-exponential kernel on unit quaternions or unit dual quaternions.

    Attributes:
        sigma_f2: Signal variance.
        ell: Length-scale.
        lam: Translation/rotation balance (m); only used on SE(3) inputs.
        ard_rot: Optional per-component weights of the quaternion distance.
        ard_pos: Optional per-axis weights of the translation distance.
    """

    sigma_f2: float = Field(0.1, gt=0, description="Signal variance")
    ell: float = Field(0.3, gt=0, description="Length-scale")
    lam: float = Field(1.0, gt=0, description="Translation scale in m")
    ard_rot: Optional[List[float]] = Field(None, description="Quaternion ARD weights")
    ard_pos: Optional[List[float]] = Field(None, description="Translation ARD weights")

    @field_validator("ard_rot")
    @classmethod
    def _four_positive(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and (len(value) != 4 or min(value) <= 0):
            raise ValueError("ard_rot needs four positive weights")
        return value

    @field_validator("ard_pos")
    @classmethod
    def _three_positive(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and (len(value) != 3 or min(value) <= 0):
            raise ValueError("ard_pos needs three positive weights")
        return value


class KernelGrid(BaseModel):
    """Search grid for hyperparameter fitting; every axis must be non-empty."""

    sigma_f2: List[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])
    ell: List[float] = Field(default_factory=lambda: [0.1, 0.3, 1.0])
    lam: List[float] = Field(default_factory=lambda: [0.5, 2.0])
    noise_var: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 1e-1])

    @field_validator("sigma_f2", "ell", "lam", "noise_var")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if not value or min(value) <= 0:
            raise ValueError("grid axes must be non-empty and positive")
        return sorted(value)

    def candidates(
        self, with_lam: bool, base: Optional[KernelConfig] = None
    ) -> Iterator[Tuple[KernelConfig, float]]:
        """Yield ``(kernel, noise_var)`` pairs in ascending order."""
        lams = self.lam if with_lam else [base.lam if base else 1.0]
        for ell in self.ell:
            for sigma_f2 in self.sigma_f2:
                for lam in lams:
                    for noise_var in self.noise_var:
                        cfg = KernelConfig(
                            sigma_f2=sigma_f2,
                            ell=ell,
                            lam=lam,
                            ard_rot=base.ard_rot if base else None,
                            ard_pos=base.ard_pos if base else None,
                        )
                        yield cfg, noise_var


class InitialOffset(BaseModel):
    """Initial pose error applied to the reference at t = 0."""

    rotvec: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    position: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])


class ExperimentConfig(BaseModel):
    """Full description of one experiment, i.e. everything but the seed.

    Attributes:
        name: Label used for grouping runs in summary tables.
        trajectory: Reference trajectory.
        disturbance: Disturbance field acting on the vehicle.
        sensor: Sensor and process noise model; post-fusion figures by default.
        gains: Controller gains.
        control_rate: Control loop rate (Hz).
        rot_kernel: Kernel of the attitude-disturbance GP (unit quaternion inputs).
        trans_kernel: Kernel of the velocity-disturbance GP (unit dual quaternion
            inputs).
        noise_var: GP observation noise variance shared by all outputs.
        kernel_grid: Hyperparameter search grid; ``None`` keeps the kernels fixed.
        gp_capacity: Sliding-window size of the GP datasets.
        batch_size: Samples collected between retraining events.
        n_end: Number of retraining events after the initial fit.
        warmup: Samples in the initial dataset.
        target_window: Pose ticks spanned by one training target.
        dataset_mode: ``"window"`` accumulates up to capacity, ``"fresh"`` keeps
            only the newest batch.
        compensate: Inject GP means into the commands.
        learning: Train GPs at all; when false no GP columns are logged.
        compute_bounds: Evaluate the probabilistic bounds at each update.
        rkhs_bound: Assumed RKHS norm bound of the unknown functions.
        gamma_omega: Confidence of the attitude-disturbance bound.
        gamma_v: Confidence of the velocity-disturbance bound.
        bound_samples: Logged errors added to the bound evaluation grid.
        retrain_latency: Delay between collecting a batch and using the new
            posterior (s).
        initial_offset: Initial pose error.
        seeds: Default seed list.
        warm_start_dir: Directory holding saved datasets used as the initial data.
    """

    name: str = Field("custom", description="Label used in summary tables")
    trajectory: ReferenceTrajectory = Field(default_factory=ReferenceTrajectory)
    disturbance: DisturbanceField = Field(default_factory=DisturbanceField)
    sensor: SensorModel = Field(default_factory=SensorModel.post_fusion)
    gains: GainSchedule = Field(default_factory=GainSchedule)
    control_rate: float = Field(100.0, gt=0)
    rot_kernel: KernelConfig = Field(default_factory=KernelConfig)
    trans_kernel: KernelConfig = Field(default_factory=KernelConfig)
    noise_var: float = Field(1e-2, gt=0)
    kernel_grid: Optional[KernelGrid] = None
    gp_capacity: int = Field(400, ge=1)
    batch_size: int = Field(50, ge=1)
    n_end: int = Field(8, ge=1)
    warmup: int = Field(30, ge=0)
    target_window: int = Field(5, ge=1)
    dataset_mode: Literal["window", "fresh"] = "window"
    compensate: bool = True
    learning: bool = True
    compute_bounds: bool = True
    rkhs_bound: float = Field(1.0, ge=0)
    gamma_omega: float = Field(0.9, gt=0, lt=1)
    gamma_v: float = Field(0.9, gt=0, lt=1)
    bound_samples: int = Field(100, ge=0)
    retrain_latency: float = Field(0.0, ge=0)
    initial_offset: InitialOffset = Field(default_factory=InitialOffset)
    seeds: List[int] = Field(default_factory=lambda: [0])
    warm_start_dir: Optional[str] = None

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def n_ticks(self) -> int:
        return int(round(self.trajectory.duration * self.control_rate))

    @property
    def pose_decimation(self) -> int:
        return int(round(self.control_rate / self.sensor.pose_rate))

    @property
    def pose_ticks(self) -> int:
        return -(-self.n_ticks // self.pose_decimation)

    @property
    def samples_needed(self) -> int:
        return self.warmup + self.n_end * self.batch_size

    @model_validator(mode="after")
    def _check_schedule(self) -> "ExperimentConfig":
        if self.dt > MAX_STEP:
            raise ValueError(f"control_rate gives dt={self.dt} above {MAX_STEP} s")
        ratio = self.control_rate / self.sensor.pose_rate
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                "pose_rate must divide control_rate, "
                f"got {self.sensor.pose_rate} and {self.control_rate}"
            )
        if self.learning:
            available = self.pose_ticks - self.target_window
            if self.samples_needed > available:
                raise ValueError(
                    f"warmup + n_end * batch_size = {self.samples_needed} samples "
                    f"but the episode only yields {available}"
                )
        return self


class UltimateBound(BaseModel):
    """Probabilistic ultimate bound of the learned closed loop.

    Attributes:
        c_omega: Worst-case attitude-model-error constant.
        c_v: Worst-case velocity-model-error constant.
        alpha_n: Half the smaller gain lower bound.
        eps0: ``(c_omega + c_v) / alpha_n``.
        M: Lyapunov level bounding the ultimate set.
        gamma: Confidence ``min(gamma_omega, gamma_v)``.
    """

    c_omega: float = Field(..., ge=0)
    c_v: float = Field(..., ge=0)
    alpha_n: float = Field(..., gt=0)
    eps0: float = Field(..., ge=0)
    M: float = Field(..., ge=0)
    gamma: float = Field(..., gt=0, le=1)


class ErrorBoundModel(BaseModel):
    """Confidence scaling of the GP model-error envelope.

    Attributes:
        rkhs_bound: Assumed RKHS norm bound ``xi``.
        info_gain: Information gain per output.
        beta: Confidence scaling per output.
        gamma: Confidence level.
        n_points: Dataset size the scaling was computed for.
    """

    rkhs_bound: float = Field(..., ge=0)
    info_gain: List[float] = Field(..., min_length=3, max_length=3)
    beta: List[float] = Field(..., min_length=3, max_length=3)
    gamma: float = Field(..., gt=0, lt=1)
    n_points: int = Field(..., ge=0)

    def beta_array(self) -> NDArray[np.float64]:
        return np.asarray(self.beta, dtype=np.float64)


class UpdateRecord(BaseModel):
    """One GP (re)training event; ``n = 0`` is the initial fit on the warm-up data."""

    n: int = Field(..., ge=0)
    tick: int = Field(..., ge=0)
    t: float
    t_active: float = Field(..., description="Time the new posterior took over")
    posterior_version: int = Field(..., ge=0)
    n_rot: int = Field(..., ge=0)
    n_trans: int = Field(..., ge=0)
    info_gain_rot: float = math.nan
    info_gain_trans: float = math.nan
    beta_rot: float = math.nan
    beta_trans: float = math.nan
    c_omega: float = math.nan
    c_v: float = math.nan
    alpha_n: float = math.nan
    eps0: float = math.nan
    M: float = math.nan
    gamma: float = math.nan
    sigma_f2_rot: float
    ell_rot: float
    noise_rot: float
    sigma_f2_trans: float
    ell_trans: float
    lam_trans: float
    noise_trans: float


class SummaryRow(BaseModel):
    """One cell pair of the with/without-GP comparison table."""

    trajectory: str
    quantity: Literal["attitude", "position"]
    metric: Literal["MAE", "MSE"]
    gp: float
    no_gp: float
    ratio: float


class RunManifest(BaseModel):
    """Metadata written next to the episode logs of one run directory.

    Attributes:
        name: Experiment label.
        config_digest: SHA-256 of the canonical JSON of the configuration.
        config: The resolved configuration.
        seeds: Seeds that were run.
        compensate: Whether GP means were injected.
        learning: Whether GPs were trained.
        artifact_version: Package version that wrote the run.
        schema_version: Version of the CSV/JSON log schemas.
        log_format: ``"csv"`` or ``"json"``.
        outputs: Per seed, the relative paths of the written logs.
        episode_digests: Git-style blob SHA-1 of each written log file.
        started_at: UTC start time.
        wall_clock_s: Wall-clock duration of the run (s).
    """

    name: str
    config_digest: str
    config: Dict[str, Any]
    seeds: List[int]
    compensate: bool
    learning: bool
    artifact_version: str = ARTIFACT_VERSION
    schema_version: int = SCHEMA_VERSION
    log_format: Literal["csv", "json"] = "csv"
    outputs: Dict[str, List[str]] = Field(default_factory=dict)
    episode_digests: Dict[str, str] = Field(default_factory=dict)
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    wall_clock_s: float = 0.0
