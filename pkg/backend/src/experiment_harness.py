"""Episode orchestration for the online-learning tracking loop, plus the
metrics and aggregate reports computed from episode logs."""

import asyncio
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .controller import (
    learned_control,
    lyapunov_V,
    nominal_control,
    ultimate_bound,
    worst_case_constants,
)
from .dq_algebra import (
    FloatArray,
    Pose,
    UnitDualQuaternion,
    UnitQuaternion,
    dq_from_pose,
    dq_mul,
    pose_error,
)
from .errors import (
    EpisodeRuntimeError,
    InvalidInputError,
    OutOfRangeError,
    PoseTrackingError,
)
from .gp_learning import (
    GPDataset,
    GPPosterior,
    dataset_push,
    error_bound_model,
    fit_hyperparameters,
    fit_posterior,
    load_dataset,
    max_rho_bound,
    predict_batch,
)
from .kinematics_sim import (
    PoseSensor,
    ResidualCollector,
    ResidualSample,
    SimState,
    apply_and_step,
    disturbance_at,
    reference_at,
)
from .models import (
    ErrorBoundModel,
    ExperimentConfig,
    KernelConfig,
    SummaryRow,
    UltimateBound,
    UpdateRecord,
)

logger = logging.getLogger(__name__)

_AXES = ("x", "y", "z")
_QUAT = ("x", "y", "z", "w")


def _group(prefix: str, names: Sequence[str]) -> List[str]:
    return [f"{prefix}_{n}" for n in names]


BASE_COLUMNS: List[str] = (
    ["t", "posterior_version"]
    + _group("q_true", _QUAT)
    + _group("p_true", _AXES)
    + _group("q_meas", _QUAT)
    + _group("p_meas", _AXES)
    + _group("q_ref", _QUAT)
    + _group("p_ref", _AXES)
    + _group("dq", _AXES)
    + ["dq0"]
    + _group("dp", _AXES)
    + ["V"]
    + _group("omega_cmd", _AXES)
    + _group("v_cmd", _AXES)
    + _group("rho_omega", _AXES)
    + _group("rho_v", _AXES)
)
GP_COLUMNS: List[str] = (
    _group("mu_omega", _AXES)
    + _group("mu_v", _AXES)
    + ["var_omega", "var_v", "rho_bound_omega", "rho_bound_v"]
)


def tick_columns(learning: bool) -> List[str]:
    return BASE_COLUMNS + (GP_COLUMNS if learning else [])


@dataclass
class EpisodeLog:
    """Time-ordered record of one episode.

    Attributes:
        name: Experiment label.
        seed: Episode seed.
        dt: Control step (s).
        compensate: Whether GP means were injected.
        learning: Whether GPs were trained (and GP columns logged).
        ticks: Per-tick columns; errors and ``V`` are the true values.
        updates: One row per GP (re)training event.
        datasets: Final attitude and velocity datasets, when learning.
    """

    name: str
    seed: int
    dt: float
    compensate: bool
    learning: bool
    ticks: Dict[str, FloatArray]
    updates: List[UpdateRecord] = field(default_factory=list)
    datasets: Optional[Tuple[GPDataset, GPDataset]] = None

    @property
    def n_ticks(self) -> int:
        return int(self.ticks["t"].shape[0])

    @property
    def time(self) -> FloatArray:
        return self.ticks["t"]

    @property
    def has_gp_columns(self) -> bool:
        return all(name in self.ticks for name in GP_COLUMNS)

    def vector(self, prefix: str) -> FloatArray:
        return np.column_stack([self.ticks[f"{prefix}_{a}"] for a in _AXES])

    def attitude_error(self) -> FloatArray:
        """``||dq_vec||`` per tick, i.e. ``sin`` of half the error angle."""
        return np.linalg.norm(self.vector("dq"), axis=1)

    def position_error(self) -> FloatArray:
        return np.linalg.norm(self.vector("dp"), axis=1)

    def final_bound(self) -> Optional[UltimateBound]:
        for rec in reversed(self.updates):
            if not math.isnan(rec.M):
                return UltimateBound(
                    c_omega=rec.c_omega,
                    c_v=rec.c_v,
                    alpha_n=rec.alpha_n,
                    eps0=rec.eps0,
                    M=rec.M,
                    gamma=rec.gamma,
                )
        return None


@dataclass
class MetricsWindow:
    """Sliding-window error statistics, one value per tick."""

    window_len: float
    t: FloatArray
    mae_att: FloatArray
    mse_att: FloatArray
    mae_pos: FloatArray
    mse_pos: FloatArray


def max_updates_for_storage(max_samples: int, batch_size: int) -> int:
    """Number of retraining events that fit a storage budget of samples."""
    if batch_size < 1:
        raise InvalidInputError("batch size must be positive")
    return max_samples // batch_size


# ---------------------------------------------------------------------------
# Online learning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Snapshot:
    version: int
    rot: GPPosterior
    trans: GPPosterior
    bound_rot: Optional[ErrorBoundModel]
    bound_trans: Optional[ErrorBoundModel]


class OnlineLearner:
    """Dataset bookkeeping and posterior swapping for one episode.

    The controller always queries :attr:`active`. A retrained snapshot is
    parked in :attr:`pending` until its activation time and then swapped in
    whole, so both GPs change version together.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rot_kernel: KernelConfig = cfg.rot_kernel
        self.trans_kernel: KernelConfig = cfg.trans_kernel
        self.rot_data = GPDataset.empty("S3", cfg.noise_var, cfg.gp_capacity)
        self.trans_data = GPDataset.empty("SE3", cfg.noise_var, cfg.gp_capacity)
        self.buffer: List[ResidualSample] = []
        self.errors: List[FloatArray] = []
        self.updates: List[UpdateRecord] = []
        self.n_done = -1
        self.pending: Optional[Tuple[float, _Snapshot]] = None
        self.active = self._snapshot(
            0,
            fit_posterior(self.rot_data, self.rot_kernel),
            fit_posterior(self.trans_data, self.trans_kernel),
        )
        if cfg.warm_start_dir:
            self._load_warm_start(cfg.warm_start_dir)

    def _load_warm_start(self, directory: str) -> None:
        rot = load_dataset(os.path.join(directory, "rot.npz"))
        trans = load_dataset(os.path.join(directory, "trans.npz"))
        self.rot_data = dataset_push(self.rot_data, rot.inputs, rot.targets)
        self.trans_data = dataset_push(self.trans_data, trans.inputs, trans.targets)
        logger.info(
            f"Warm start from {directory}: {len(self.rot_data)} attitude and "
            f"{len(self.trans_data)} velocity samples"
        )

    @property
    def initialized(self) -> bool:
        return self.n_done >= 0

    @property
    def finished(self) -> bool:
        return self.n_done >= self.cfg.n_end

    def _snapshot(
        self, version: int, rot: GPPosterior, trans: GPPosterior
    ) -> _Snapshot:
        bound_rot = bound_trans = None
        if self.cfg.compute_bounds:
            xi = self.cfg.rkhs_bound
            bound_rot = error_bound_model(rot, xi, self.cfg.gamma_omega)
            bound_trans = error_bound_model(trans, xi, self.cfg.gamma_v)
        return _Snapshot(version, rot, trans, bound_rot, bound_trans)

    def activate_pending(self, t: float) -> None:
        if self.pending is not None and t >= self.pending[0] - 1e-12:
            self.active = self.pending[1]
            self.pending = None
            logger.debug(f"Posterior version {self.active.version} active at t={t:.3f}")

    def query(self, x_trans: FloatArray) -> FloatArray:
        """GP columns ``mu_omega, mu_v, var_omega, var_v, rho_omega, rho_v``."""
        snap = self.active
        mu_rot, var_rot = predict_batch(snap.rot, x_trans[:4])
        mu_trans, var_trans = predict_batch(snap.trans, x_trans)
        rho_rot = rho_trans = math.nan
        if snap.bound_rot is not None and snap.bound_trans is not None:
            b_rot = snap.bound_rot.beta_array()
            b_trans = snap.bound_trans.beta_array()
            rho_rot = math.sqrt(var_rot[0] * float(b_rot @ b_rot))
            rho_trans = math.sqrt(var_trans[0] * float(b_trans @ b_trans))
        return np.concatenate(
            [
                mu_rot[0],
                mu_trans[0],
                [var_rot[0], var_trans[0], rho_rot, rho_trans],
            ]
        )

    def observe_error(self, x_trans: FloatArray) -> None:
        self.errors.append(x_trans)

    def start(self, tick: int, t: float) -> None:
        """Fit the initial posterior right away when no warm-up is needed."""
        if self.cfg.warmup == 0 or self.cfg.warm_start_dir:
            self._retrain(tick, t)

    def add(self, sample: ResidualSample, tick: int, t: float) -> None:
        if self.finished:
            return
        self.buffer.append(sample)
        needed = self.cfg.warmup if not self.initialized else self.cfg.batch_size
        if len(self.buffer) >= needed:
            self._retrain(tick, t)

    def _evaluation_grid(self, data: GPDataset, width: int) -> FloatArray:
        grid = [data.inputs]
        if self.errors and self.cfg.bound_samples > 0:
            idx = np.unique(
                np.linspace(0, len(self.errors) - 1, self.cfg.bound_samples).astype(int)
            )
            history = np.asarray([self.errors[i] for i in idx])[:, :width]
            grid.append(history)
        return np.vstack(grid)

    def _retrain(self, tick: int, t: float) -> None:
        cfg = self.cfg
        n = self.n_done + 1
        mode = cfg.dataset_mode if n > 0 else "window"
        if self.buffer:
            self.rot_data = dataset_push(
                self.rot_data,
                np.array([s.x_rot for s in self.buffer]),
                np.array([s.y_rot for s in self.buffer]),
                mode=mode,
            )
            self.trans_data = dataset_push(
                self.trans_data,
                np.array([s.x_trans for s in self.buffer]),
                np.array([s.y_trans for s in self.buffer]),
                mode=mode,
            )
        self.buffer = []

        if cfg.kernel_grid is not None:
            if len(self.rot_data) >= 3:
                choice = fit_hyperparameters(
                    self.rot_data, cfg.kernel_grid, base=self.rot_kernel
                )
                self.rot_kernel = choice.kernel
                self.rot_data = self.rot_data.with_noise(choice.noise_var)
            if len(self.trans_data) >= 3:
                choice = fit_hyperparameters(
                    self.trans_data, cfg.kernel_grid, base=self.trans_kernel
                )
                self.trans_kernel = choice.kernel
                self.trans_data = self.trans_data.with_noise(choice.noise_var)
            if len(self.rot_data) < 3 or len(self.trans_data) < 3:
                logger.warning(
                    f"Update {n}: fewer than 3 samples, kept previous hyperparameters"
                )

        version = self.active.version + 1
        if self.pending is not None:
            version = self.pending[1].version + 1
        rot = fit_posterior(self.rot_data, self.rot_kernel, version)
        trans = fit_posterior(self.trans_data, self.trans_kernel, version)
        snap = self._snapshot(version, rot, trans)

        record = dict(
            n=n,
            tick=tick,
            t=t,
            t_active=t + cfg.retrain_latency,
            posterior_version=version,
            n_rot=len(self.rot_data),
            n_trans=len(self.trans_data),
            sigma_f2_rot=self.rot_kernel.sigma_f2,
            ell_rot=self.rot_kernel.ell,
            noise_rot=self.rot_data.noise_var,
            sigma_f2_trans=self.trans_kernel.sigma_f2,
            ell_trans=self.trans_kernel.ell,
            lam_trans=self.trans_kernel.lam,
            noise_trans=self.trans_data.noise_var,
        )
        if snap.bound_rot is not None and snap.bound_trans is not None:
            max_rot = max_rho_bound(
                rot, snap.bound_rot, self._evaluation_grid(self.rot_data, 4)
            )
            max_trans = max_rho_bound(
                trans, snap.bound_trans, self._evaluation_grid(self.trans_data, 8)
            )
            c_omega, c_v = worst_case_constants(max_rot, max_trans, cfg.gains)
            bound = ultimate_bound(
                c_omega, c_v, cfg.gains, cfg.gamma_omega, cfg.gamma_v
            )
            record.update(
                info_gain_rot=snap.bound_rot.info_gain[0],
                info_gain_trans=snap.bound_trans.info_gain[0],
                beta_rot=snap.bound_rot.beta[0],
                beta_trans=snap.bound_trans.beta[0],
                c_omega=bound.c_omega,
                c_v=bound.c_v,
                alpha_n=bound.alpha_n,
                eps0=bound.eps0,
                M=bound.M,
                gamma=bound.gamma,
            )
        self.updates.append(UpdateRecord(**record))
        self.pending = (t + cfg.retrain_latency, snap)
        self.n_done = n
        logger.info(
            f"GP update {n} at t={t:.2f} s: N={len(self.rot_data)}, "
            f"version {version}, M={record.get('M', math.nan):.4g}"
        )


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


def initial_pose(cfg: ExperimentConfig) -> UnitDualQuaternion:
    """Reference pose at ``t = 0`` displaced by the configured offset."""
    Q_d0, _ = reference_at(cfg.trajectory, 0.0)
    offset = dq_from_pose(
        Pose(
            attitude=UnitQuaternion.from_rotvec(cfg.initial_offset.rotvec),
            position=np.asarray(cfg.initial_offset.position, dtype=np.float64),
        )
    )
    Q0 = dq_mul(Q_d0, offset)
    assert isinstance(Q0, UnitDualQuaternion)
    return Q0


def run_episode(cfg: ExperimentConfig, seed: int) -> EpisodeLog:
    """Run one closed-loop episode with online GP learning.

    The initial datasets (warm-up samples, possibly none) are fitted first and
    logged as update ``n = 0``. After that every ``batch_size`` new samples
    trigger a retraining, ``n_end`` times in total. Each retraining produces a
    complete new snapshot that replaces the one the controller uses only once
    ``retrain_latency`` has elapsed. With ``compensate`` off the GPs are still
    trained and queried but their means are not injected.

    Raises:
        EpisodeRuntimeError: Wrapping any package error raised inside the loop.
    """
    dt = cfg.dt
    n_ticks = cfg.n_ticks
    columns = tick_columns(cfg.learning)
    table = np.full((n_ticks, len(columns)), np.nan)
    base_width = len(BASE_COLUMNS)

    state = SimState.start(initial_pose(cfg), seed, cfg.sensor)
    sensor = PoseSensor(cfg.sensor, cfg.control_rate)
    collector = ResidualCollector(cfg.target_window, sensor.decimation * dt)
    learner = OnlineLearner(cfg) if cfg.learning else None

    logger.info(f"Episode '{cfg.name}' seed {seed}: {n_ticks} ticks at dt={dt}")
    k, t = 0, 0.0
    try:
        if learner is not None:
            learner.start(0, 0.0)
        for k in range(n_ticks):
            t = k * dt
            Q_d, tw_d = reference_at(cfg.trajectory, t)
            if learner is not None:
                learner.activate_pending(t)
            Q_meas, fresh = sensor.observe(state)
            err_meas = pose_error(Q_d, Q_meas)
            err_true = pose_error(Q_d, state.Q_true)
            cmd = nominal_control(err_meas, tw_d, cfg.gains)

            row = table[k]
            if learner is not None:
                x_trans = err_meas.dQ.to_array()
                gp = learner.query(x_trans)
                row[base_width:] = gp
                row[1] = learner.active.version
                if cfg.compensate:
                    cmd = learned_control(cmd, gp[0:3], gp[3:6])
                learner.observe_error(x_trans)
                if fresh:
                    sample = collector.record_pose(Q_meas, err_meas)
                    if sample is not None:
                        learner.add(sample, k, t)
            collector.record_command(cmd, dt)
            rho_omega, rho_v = disturbance_at(cfg.disturbance, state.Q_true)

            row[0] = t
            if learner is None:
                row[1] = 0
            row[2:6] = state.Q_true.attitude.to_array()
            row[6:9] = state.Q_true.position
            row[9:13] = Q_meas.attitude.to_array()
            row[13:16] = Q_meas.position
            row[16:20] = Q_d.attitude.to_array()
            row[20:23] = Q_d.position
            row[23:26] = err_true.dq_vec
            row[26] = err_true.dq0
            row[27:30] = err_true.dp_inertial
            row[30] = lyapunov_V(err_true)
            row[31:34] = cmd.omega_cmd
            row[34:37] = cmd.v_cmd
            row[37:40] = rho_omega
            row[40:43] = rho_v

            next_state = apply_and_step(state, cmd, cfg.disturbance, cfg.sensor, dt)
            sensor.advance(next_state, cmd, dt)
            state = next_state
    except PoseTrackingError as exc:
        raise EpisodeRuntimeError(str(exc), tick=k, t=t, seed=seed) from exc

    ticks = {name: table[:, i].copy() for i, name in enumerate(columns)}
    log = EpisodeLog(
        name=cfg.name,
        seed=seed,
        dt=dt,
        compensate=cfg.compensate,
        learning=cfg.learning,
        ticks=ticks,
        updates=list(learner.updates) if learner is not None else [],
        datasets=(
            (learner.rot_data, learner.trans_data) if learner is not None else None
        ),
    )
    logger.info(
        f"Episode '{cfg.name}' seed {seed} done: final V={ticks['V'][-1]:.3e}, "
        f"{len(log.updates)} GP updates"
    )
    return log


async def run_suite(
    cfg: ExperimentConfig, seeds: Sequence[int], workers: int = 1
) -> List[EpisodeLog]:
    """Run one episode per seed, in a bounded process pool when ``workers > 1``.

    Results come back in seed order regardless of completion order.
    """
    if workers <= 1 or len(seeds) <= 1:
        return [await asyncio.to_thread(run_episode, cfg, seed) for seed in seeds]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        futures = [loop.run_in_executor(pool, run_episode, cfg, seed) for seed in seeds]
        return list(await asyncio.gather(*futures))


# ---------------------------------------------------------------------------
# Metrics and reports
# ---------------------------------------------------------------------------


def _trailing_mean(values: FloatArray, width: int) -> FloatArray:
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(values.shape[0])
    lo = np.maximum(0, idx - width + 1)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def sliding_metrics(log: EpisodeLog, window_len: float = 10.0) -> MetricsWindow:
    """Trailing-window MAE and MSE of the attitude and position errors.

    The window holds ``round(window_len / dt)`` ticks and is truncated at the
    start of the episode.
    """
    if window_len <= 0:
        raise OutOfRangeError(f"window_len must be positive, got {window_len}")
    if log.n_ticks == 0:
        raise InvalidInputError("cannot compute metrics of an empty log")
    width = max(1, int(round(window_len / log.dt)))
    att = log.attitude_error()
    pos = log.position_error()
    return MetricsWindow(
        window_len=window_len,
        t=log.time.copy(),
        mae_att=_trailing_mean(np.abs(att), width),
        mse_att=_trailing_mean(att**2, width),
        mae_pos=_trailing_mean(np.abs(pos), width),
        mse_pos=_trailing_mean(pos**2, width),
    )


def episode_errors(log: EpisodeLog) -> Dict[Tuple[str, str], float]:
    """Whole-episode MAE and MSE keyed by ``(quantity, metric)``."""
    att = log.attitude_error()
    pos = log.position_error()
    return {
        ("attitude", "MAE"): float(np.mean(np.abs(att))),
        ("attitude", "MSE"): float(np.mean(att**2)),
        ("position", "MAE"): float(np.mean(np.abs(pos))),
        ("position", "MSE"): float(np.mean(pos**2)),
    }


def improvement_ratio(gp: float, no_gp: float) -> float:
    """``no_gp / gp``; NaN when either side is missing or both are zero."""
    if math.isnan(gp) or math.isnan(no_gp):
        return math.nan
    if gp == 0.0:
        return math.nan if no_gp == 0.0 else math.inf
    return no_gp / gp


def summary_table(
    cells: Mapping[Tuple[str, bool], Sequence[EpisodeLog]],
) -> List[SummaryRow]:
    """Seed-averaged whole-episode errors with and without GP compensation.

    Args:
        cells: Episode sets keyed by ``(trajectory label, compensated)``.

    Returns:
        Four rows per trajectory (attitude/position x MAE/MSE), trajectories
        in first-seen order.
    """
    averaged: Dict[Tuple[str, bool], Dict[Tuple[str, str], float]] = {}
    order: List[str] = []
    for (name, compensated), logs in cells.items():
        if not logs:
            raise InvalidInputError(
                f"no episodes for {name} (compensate={compensated})"
            )
        if name not in order:
            order.append(name)
        per_episode = [episode_errors(log) for log in logs]
        averaged[(name, compensated)] = {
            key: float(np.mean([e[key] for e in per_episode]))
            for key in per_episode[0]
        }
    rows: List[SummaryRow] = []
    for name in order:
        for quantity in ("attitude", "position"):
            for metric in ("MAE", "MSE"):
                key = (quantity, metric)
                gp = averaged.get((name, True), {}).get(key, math.nan)
                no_gp = averaged.get((name, False), {}).get(key, math.nan)
                rows.append(
                    SummaryRow(
                        trajectory=name,
                        quantity=quantity,  # type: ignore[arg-type]
                        metric=metric,  # type: ignore[arg-type]
                        gp=gp,
                        no_gp=no_gp,
                        ratio=improvement_ratio(gp, no_gp),
                    )
                )
    return rows


def _bound_level(log: EpisodeLog, bound: Optional[UltimateBound]) -> float:
    if bound is not None:
        return bound.M
    final = log.final_bound()
    if final is None:
        raise InvalidInputError(f"episode seed {log.seed} carries no ultimate bound")
    return final.M


def _post_settle_V(log: EpisodeLog, settle: float) -> FloatArray:
    duration = log.n_ticks * log.dt
    if settle >= duration:
        raise OutOfRangeError(f"settle={settle} s is not before the end ({duration} s)")
    return log.ticks["V"][log.time >= settle - 1e-12]


def verify_ultimate_bound(
    logs: Sequence[EpisodeLog], bound: Optional[UltimateBound], settle: float
) -> float:
    """Fraction of episodes whose ``V`` stays at or below ``M`` after ``settle``.

    With ``bound=None`` each episode is checked against the bound of its own
    last GP update.
    """
    if not logs:
        raise InvalidInputError("no episodes to verify")
    inside = 0
    for log in logs:
        if np.all(_post_settle_V(log, settle) <= _bound_level(log, bound) + 1e-12):
            inside += 1
    return inside / len(logs)


def post_settle_ratio(
    logs: Sequence[EpisodeLog], bound: Optional[UltimateBound], settle: float
) -> float:
    """Largest ``max V(t >= settle) / M`` over the episodes."""
    worst = 0.0
    for log in logs:
        peak = float(np.max(_post_settle_V(log, settle)))
        level = _bound_level(log, bound)
        if level == 0.0:
            ratio = 0.0 if peak == 0.0 else math.inf
        else:
            ratio = peak / level
        worst = max(worst, ratio)
    return worst
