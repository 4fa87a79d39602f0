"""Exact Gaussian-process regression on unit quaternions and unit dual
quaternions, with the confidence bounds used by the learned controller.

Three independent scalar GPs share one kernel and one noise level, so the
posterior variance is the same for every output column.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .config import UNIT_TOL
from .dq_algebra import (
    FloatArray,
    position_array,
    qconj_array,
    qmul_array,
)
from .errors import (
    FactorizationFailureError,
    InvalidConfidenceError,
    InvalidInputError,
)
from .interfaces import Kernel
from .models import ErrorBoundModel, KernelConfig, KernelGrid

logger = logging.getLogger(__name__)

InputSpace = Literal["S3", "SE3"]
DatasetMode = Literal["window", "fresh"]

_INPUT_DIM: Dict[str, int] = {"S3": 4, "SE3": 8}
_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def _space_of(dim: int) -> InputSpace:
    if dim == 4:
        return "S3"
    if dim == 8:
        return "SE3"
    raise InvalidInputError(f"inputs must have 4 or 8 components, got {dim}")


def check_inputs(inputs: FloatArray, space: InputSpace) -> None:
    """Raise :class:`InvalidInputError` unless every row is a unit (dual) quaternion."""
    if inputs.size == 0:
        return
    if not np.all(np.isfinite(inputs)):
        raise InvalidInputError("inputs contain non-finite values")
    real = inputs[:, :4]
    deviation = np.abs(np.linalg.norm(real, axis=1) - 1.0)
    if np.max(deviation) > UNIT_TOL:
        row = int(np.argmax(deviation))
        raise InvalidInputError(
            f"input row {row} is not unit-norm (deviation {deviation[row]:.3e})"
        )
    if space == "SE3":
        dual = inputs[:, 4:]
        residual = qmul_array(real, qconj_array(dual)) + qmul_array(
            dual, qconj_array(real)
        )
        worst = np.max(np.abs(residual), axis=1)
        if np.max(worst) > UNIT_TOL:
            row = int(np.argmax(worst))
            raise InvalidInputError(
                f"input row {row} is not a unit dual quaternion ({worst[row]:.3e})"
            )


def _frozen_rows(values: ArrayLike, cols: int, name: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64)
    if arr.size == 0:
        arr = np.zeros((0, cols))
    arr = arr.reshape(-1, cols)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GPDataset:
    """Immutable training set shared by the three output GPs.

    Attributes:
        inputs: ``(N, 4)`` unit quaternions or ``(N, 8)`` unit dual quaternions.
        targets: ``(N, 3)`` observed disturbance samples.
        noise_var: Observation noise variance shared by all outputs.
        capacity: Maximum number of samples kept.
        space: ``"S3"`` or ``"SE3"``.
    """

    inputs: FloatArray
    targets: FloatArray
    noise_var: float
    capacity: int
    space: InputSpace = "S3"

    def __post_init__(self) -> None:
        dim = _INPUT_DIM[self.space]
        inputs = _frozen_rows(self.inputs, dim, "inputs")
        targets = _frozen_rows(self.targets, 3, "targets")
        if inputs.shape[0] != targets.shape[0]:
            raise InvalidInputError(
                f"{inputs.shape[0]} inputs but {targets.shape[0]} targets"
            )
        if self.capacity < 1:
            raise InvalidInputError(f"capacity must be positive, got {self.capacity}")
        if inputs.shape[0] > self.capacity:
            raise InvalidInputError(
                f"{inputs.shape[0]} samples exceed capacity {self.capacity}"
            )
        if self.noise_var < 0 or not math.isfinite(self.noise_var):
            raise InvalidInputError(f"noise_var must be >= 0, got {self.noise_var}")
        if not np.all(np.isfinite(targets)):
            raise InvalidInputError("targets contain non-finite values")
        check_inputs(inputs, self.space)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @classmethod
    def empty(
        cls, space: InputSpace, noise_var: float, capacity: int
    ) -> "GPDataset":
        dim = _INPUT_DIM[space]
        return cls(
            inputs=np.zeros((0, dim)),
            targets=np.zeros((0, 3)),
            noise_var=noise_var,
            capacity=capacity,
            space=space,
        )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def with_noise(self, noise_var: float) -> "GPDataset":
        return GPDataset(
            self.inputs, self.targets, noise_var, self.capacity, self.space
        )


def dataset_push(
    data: GPDataset,
    inputs: ArrayLike,
    targets: ArrayLike,
    mode: DatasetMode = "window",
) -> GPDataset:
    """Append a batch, evicting the oldest samples beyond capacity.

    With ``mode="fresh"`` the previous samples are dropped and only the new
    batch is kept.

    Raises:
        InvalidInputError: If a batch input is not a unit (dual) quaternion or
            the batch shapes disagree.
    """
    dim = _INPUT_DIM[data.space]
    new_x = _frozen_rows(inputs, dim, "inputs")
    new_y = _frozen_rows(targets, 3, "targets")
    if new_x.shape[0] != new_y.shape[0]:
        raise InvalidInputError(
            f"batch has {new_x.shape[0]} inputs but {new_y.shape[0]} targets"
        )
    if new_x.shape[0] == 0:
        return data
    check_inputs(new_x, data.space)
    if mode == "fresh":
        x, y = new_x, new_y
    elif mode == "window":
        x = np.vstack([data.inputs, new_x])
        y = np.vstack([data.targets, new_y])
    else:
        raise InvalidInputError(f"unknown dataset mode {mode!r}")
    evicted = max(0, x.shape[0] - data.capacity)
    if evicted:
        logger.debug(f"Evicting {evicted} oldest samples from the {data.space} dataset")
    return GPDataset(
        inputs=x[evicted:],
        targets=y[evicted:],
        noise_var=data.noise_var,
        capacity=data.capacity,
        space=data.space,
    )


# ---------------------------------------------------------------------------
# Distances and kernels
# ---------------------------------------------------------------------------


def _rot_weights(cfg: KernelConfig) -> FloatArray:
    if cfg.ard_rot is None:
        return np.ones(4)
    return np.asarray(cfg.ard_rot, dtype=np.float64)


def _pos_weights(cfg: KernelConfig) -> FloatArray:
    if cfg.ard_pos is None:
        return np.ones(3)
    return np.asarray(cfg.ard_pos, dtype=np.float64)


def _chordal_sq(qa: FloatArray, qb: FloatArray, weights: FloatArray) -> FloatArray:
    """Pairwise ``min(||W(q - q')||, ||W(q + q')||)^2``."""
    wa = qa * weights
    wb = qb * weights
    return np.minimum(cdist(wa, wb, "sqeuclidean"), cdist(wa, -wb, "sqeuclidean"))


class QuaternionKernel:
    """Squared-exponential kernel over the antipodally invariant chordal distance."""

    space: InputSpace = "S3"

    def __init__(self, cfg: KernelConfig):
        self.cfg = cfg
        self._w = _rot_weights(cfg)

    def distance_sq(self, A: FloatArray, B: FloatArray) -> FloatArray:
        return _chordal_sq(A[:, :4], B[:, :4], self._w)

    def __call__(self, A: FloatArray, B: FloatArray) -> FloatArray:
        d2 = self.distance_sq(np.atleast_2d(A), np.atleast_2d(B))
        return self.cfg.sigma_f2 * np.exp(-d2 / (2.0 * self.cfg.ell**2))

    def diag(self, A: FloatArray) -> FloatArray:
        return np.full(np.atleast_2d(A).shape[0], self.cfg.sigma_f2)


class DualQuaternionKernel(QuaternionKernel):
    """Squared-exponential kernel on poses.

    ``d^2 = d_chordal(q, q')^2 + ||p - p'||^2 / lambda^2`` where ``p`` is
    recovered from the dual part, so negating either input leaves it unchanged.
    """

    space: InputSpace = "SE3"

    def __init__(self, cfg: KernelConfig):
        super().__init__(cfg)
        self._pw = _pos_weights(cfg) / cfg.lam

    def distance_sq(self, A: FloatArray, B: FloatArray) -> FloatArray:
        rot = _chordal_sq(A[:, :4], B[:, :4], self._w)
        pa = position_array(A) * self._pw
        pb = position_array(B) * self._pw
        return rot + cdist(pa, pb, "sqeuclidean")


def make_kernel(cfg: KernelConfig, space: InputSpace) -> Kernel:
    return DualQuaternionKernel(cfg) if space == "SE3" else QuaternionKernel(cfg)


def chordal_dist(q: ArrayLike, q2: ArrayLike) -> float:
    """``min(||q - q'||, ||q + q'||) = sqrt(2 - 2 |<q, q'>|)`` for unit inputs."""
    a = np.asarray(q, dtype=np.float64).reshape(1, 4)
    b = np.asarray(q2, dtype=np.float64).reshape(1, 4)
    return float(np.sqrt(_chordal_sq(a, b, np.ones(4))[0, 0]))


def se3_dist(Q: ArrayLike, Q2: ArrayLike, lam: float) -> float:
    """Pose distance balancing rotation and translation through ``lam`` (m)."""
    a = np.asarray(Q, dtype=np.float64).reshape(1, 8)
    b = np.asarray(Q2, dtype=np.float64).reshape(1, 8)
    kernel = DualQuaternionKernel(KernelConfig(sigma_f2=1.0, ell=1.0, lam=lam))
    return float(np.sqrt(kernel.distance_sq(a, b)[0, 0]))


def kernel_eval(cfg: KernelConfig, x: ArrayLike, x2: ArrayLike) -> float:
    """``sigma_f^2 exp(-d^2 / (2 ell^2))`` with the distance of the input space."""
    a = np.asarray(x, dtype=np.float64).reshape(1, -1)
    b = np.asarray(x2, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise InvalidInputError(f"mismatched inputs {a.shape} and {b.shape}")
    return float(make_kernel(cfg, _space_of(a.shape[1]))(a, b)[0, 0])


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GPPosterior:
    """Factorized posterior snapshot; never mutated after fitting.

    Attributes:
        dataset: Training data the posterior was fitted on.
        kernel: Kernel hyperparameters.
        chol: Lower Cholesky factor of ``K + (sigma^2 + jitter) I``.
        alpha: ``K^-1 Y``, one column per output.
        jitter: Diagonal jitter that was needed for the factorization.
        version: Monotone counter assigned by the caller.
    """

    dataset: GPDataset
    kernel: KernelConfig
    chol: FloatArray
    alpha: FloatArray
    jitter: float = 0.0
    version: int = 0
    _kernel_fn: Kernel = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_kernel_fn", make_kernel(self.kernel, self.dataset.space)
        )

    @property
    def noise_var(self) -> float:
        return self.dataset.noise_var

    @property
    def is_prior(self) -> bool:
        return len(self.dataset) == 0

    def covariance(self, A: FloatArray, B: FloatArray) -> FloatArray:
        return self._kernel_fn(A, B)


def gram_matrix(data: GPDataset, cfg: KernelConfig) -> FloatArray:
    """Noise-free kernel matrix of the training inputs."""
    return make_kernel(cfg, data.space)(data.inputs, data.inputs)


def fit_posterior(
    data: GPDataset, cfg: KernelConfig, version: int = 0
) -> GPPosterior:
    """Factorize ``K = k(X, X) + sigma^2 I`` once and solve for the weights.

    An empty dataset yields the prior. On a failed factorization the diagonal
    jitter is raised by decades from 1e-10 up to 1e-4.

    Raises:
        FactorizationFailureError: If the matrix is still not positive definite
            with the largest jitter.
    """
    n = len(data)
    if n == 0:
        return GPPosterior(
            dataset=data,
            kernel=cfg,
            chol=np.zeros((0, 0)),
            alpha=np.zeros((0, 3)),
            version=version,
        )
    K = gram_matrix(data, cfg)
    K[np.diag_indices_from(K)] += data.noise_var
    for jitter in _JITTER_LADDER:
        try:
            L = cholesky(
                K + jitter * np.eye(n), lower=True, check_finite=False
            )
        except LinAlgError:
            continue
        if not np.all(np.isfinite(L)):
            continue
        if jitter > 0:
            logger.warning(f"Gram matrix of size {n} needed jitter {jitter:.0e}")
        alpha = cho_solve((L, True), data.targets, check_finite=False)
        return GPPosterior(
            dataset=data,
            kernel=cfg,
            chol=L,
            alpha=alpha,
            jitter=jitter,
            version=version,
        )
    raise FactorizationFailureError(
        f"Gram matrix of size {n} not positive definite with jitter "
        f"{_JITTER_LADDER[-1]:.0e}"
    )


def predict_batch(post: GPPosterior, X: ArrayLike) -> Tuple[FloatArray, FloatArray]:
    """Posterior means ``(M, 3)`` and the shared variance ``(M,)`` at ``X``."""
    dim = _INPUT_DIM[post.dataset.space]
    Xs = np.asarray(X, dtype=np.float64).reshape(-1, dim)
    prior_var = np.full(Xs.shape[0], post.kernel.sigma_f2)
    if post.is_prior:
        return np.zeros((Xs.shape[0], 3)), prior_var
    Ks = post.covariance(post.dataset.inputs, Xs)
    mean = Ks.T @ post.alpha
    v = solve_triangular(post.chol, Ks, lower=True, check_finite=False)
    var = prior_var - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def predict(post: GPPosterior, x: ArrayLike) -> Tuple[FloatArray, FloatArray]:
    """Mean and variance (one entry per output) at a single input."""
    mean, var = predict_batch(post, x)
    return mean[0], np.full(3, var[0])


def log_marginal_likelihood(data: GPDataset, cfg: KernelConfig) -> float:
    """``-1/2 sum_i (y_i^T alpha_i + log det K) - (3N / 2) log 2 pi``."""
    post = fit_posterior(data, cfg)
    n = len(data)
    fit_term = float(np.sum(data.targets * post.alpha))
    log_det = 2.0 * float(np.sum(np.log(np.diag(post.chol))))
    return -0.5 * fit_term - 1.5 * log_det - 1.5 * n * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperparameterChoice:
    kernel: KernelConfig
    noise_var: float
    log_likelihood: float


def fit_hyperparameters(
    data: GPDataset, grid: KernelGrid, base: Optional[KernelConfig] = None
) -> HyperparameterChoice:
    """Grid search of ``(sigma_f^2, ell, lam, sigma^2)`` maximizing the evidence.

    Candidates are visited by increasing ``ell`` then ``sigma_f^2`` and only a
    strictly better likelihood replaces the incumbent, so ties resolve to the
    smallest length-scale and then the smallest signal variance. ``lam`` is
    searched only for pose inputs; ARD weights are taken from ``base``.

    Raises:
        InvalidInputError: With fewer than three samples.
    """
    if len(data) < 3:
        raise InvalidInputError(
            f"hyperparameter fitting needs at least 3 samples, got {len(data)}"
        )
    best: Optional[HyperparameterChoice] = None
    for cfg, noise_var in grid.candidates(with_lam=data.space == "SE3", base=base):
        try:
            lml = log_marginal_likelihood(data.with_noise(noise_var), cfg)
        except FactorizationFailureError:
            continue
        if best is None or lml > best.log_likelihood:
            best = HyperparameterChoice(cfg, noise_var, lml)
    if best is None:
        raise FactorizationFailureError("no grid point admitted a factorization")
    logger.debug(
        f"Selected sigma_f2={best.kernel.sigma_f2}, ell={best.kernel.ell}, "
        f"lam={best.kernel.lam}, noise={best.noise_var} "
        f"(log-likelihood {best.log_likelihood:.3f})"
    )
    return best


# ---------------------------------------------------------------------------
# Confidence bounds
# ---------------------------------------------------------------------------


def information_gain(post: GPPosterior) -> FloatArray:
    """``1/2 log det(I + sigma^-2 K~)`` over the training set, per output.

    Reuses the posterior factor, so any jitter it needed is included.

    Raises:
        InvalidInputError: If the noise variance is zero.
    """
    n = len(post.dataset)
    if n == 0:
        return np.zeros(3)
    if post.noise_var <= 0:
        raise InvalidInputError("information gain needs a positive noise variance")
    half_log_det = float(np.sum(np.log(np.diag(post.chol))))
    return np.full(3, half_log_det - 0.5 * n * math.log(post.noise_var))


def beta_bound(xi: float, Gamma: float, N: int, gamma: float) -> float:
    """``sqrt(2 xi^2 + 300 Gamma ln^3((N + 1) / (1 - gamma^(1/3))))``.

    Raises:
        InvalidConfidenceError: If ``gamma`` is not in (0, 1).
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidConfidenceError(f"confidence must lie in (0, 1), got {gamma}")
    log_term = math.log((N + 1) / (1.0 - gamma ** (1.0 / 3.0)))
    return math.sqrt(2.0 * xi**2 + 300.0 * Gamma * log_term**3)


def error_bound_model(post: GPPosterior, xi: float, gamma: float) -> ErrorBoundModel:
    gains = information_gain(post)
    n = len(post.dataset)
    return ErrorBoundModel(
        rkhs_bound=xi,
        info_gain=gains.tolist(),
        beta=[beta_bound(xi, float(g), n, gamma) for g in gains],
        gamma=gamma,
        n_points=n,
    )


def rho_bound_batch(
    post: GPPosterior, bound: ErrorBoundModel, X: ArrayLike
) -> FloatArray:
    _, var = predict_batch(post, X)
    beta = bound.beta_array()
    return np.sqrt(var * float(beta @ beta))


def rho_bound(post: GPPosterior, bound: ErrorBoundModel, x: ArrayLike) -> float:
    """Model-error envelope ``sqrt(sum_i beta_i^2 var_i(x))``."""
    return float(rho_bound_batch(post, bound, x)[0])


def max_rho_bound(
    post: GPPosterior, bound: ErrorBoundModel, grid: ArrayLike
) -> float:
    """Largest envelope over an evaluation grid; 0 for an empty grid."""
    X = np.asarray(grid, dtype=np.float64)
    if X.size == 0:
        return 0.0
    return float(np.max(rho_bound_batch(post, bound, X)))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(data: GPDataset, path: str) -> None:
    """Write a dataset as a columnar ``.npz`` archive."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            inputs=data.inputs,
            targets=data.targets,
            noise_var=np.float64(data.noise_var),
            capacity=np.int64(data.capacity),
            space=np.str_(data.space),
        )


def load_dataset(path: str) -> GPDataset:
    with np.load(path, allow_pickle=False) as archive:
        space = str(archive["space"])
        if space not in _INPUT_DIM:
            raise InvalidInputError(f"{path} holds data of unknown space '{space}'")
        return GPDataset(
            inputs=archive["inputs"],
            targets=archive["targets"],
            noise_var=float(archive["noise_var"]),
            capacity=int(archive["capacity"]),
            space=_space_of(_INPUT_DIM[space]),
        )
