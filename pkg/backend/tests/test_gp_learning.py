import logging
import math
from typing import Optional

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from backend.src.dq_algebra import pose_to_dq_array
from backend.src.errors import InvalidConfidenceError, InvalidInputError
from backend.src.gp_learning import (
    DualQuaternionKernel,
    GPDataset,
    QuaternionKernel,
    beta_bound,
    chordal_dist,
    dataset_push,
    error_bound_model,
    fit_hyperparameters,
    fit_posterior,
    information_gain,
    kernel_eval,
    load_dataset,
    log_marginal_likelihood,
    max_rho_bound,
    predict,
    predict_batch,
    rho_bound,
    rho_bound_batch,
    save_dataset,
    se3_dist,
)
from backend.src.models import KernelConfig, KernelGrid


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cfg() -> KernelConfig:
    return KernelConfig(sigma_f2=0.5, ell=0.4, lam=1.5)


def unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def unit_dqs(rng: np.random.Generator, n: int) -> np.ndarray:
    poses = np.hstack([unit_quats(rng, n), rng.uniform(-2.0, 2.0, size=(n, 3))])
    return pose_to_dq_array(poses)


def dense_kernel(cfg: KernelConfig, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Chordal squared-exponential kernel written out from ``2 - 2 |<q, q'>|``."""
    d2 = 2.0 - 2.0 * np.abs(A @ B.T)
    return cfg.sigma_f2 * np.exp(-d2 / (2.0 * cfg.ell**2))


def make_dataset(rng: np.random.Generator, n: int, noise_var: float = 1e-2):
    X = unit_quats(rng, n)
    Y = np.column_stack([np.sin(3 * X[:, 0]), X[:, 1] * X[:, 2], np.cos(X[:, 3])])
    return GPDataset(inputs=X, targets=Y, noise_var=noise_var, capacity=max(n, 1))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def test_push_window_evicts_oldest(rng: np.random.Generator):
    """Tests FIFO eviction beyond capacity."""
    data = GPDataset.empty("S3", noise_var=0.01, capacity=5)
    X = unit_quats(rng, 7)
    Y = np.arange(21, dtype=float).reshape(7, 3)
    data = dataset_push(data, X[:4], Y[:4])
    data = dataset_push(data, X[4:], Y[4:])
    assert len(data) == 5
    np.testing.assert_array_equal(data.inputs, X[2:])
    np.testing.assert_array_equal(data.targets, Y[2:])


def test_push_fresh_replaces_data(rng: np.random.Generator):
    """Tests that fresh mode keeps only the new batch."""
    data = dataset_push(
        GPDataset.empty("S3", 0.01, 10), unit_quats(rng, 3), np.zeros((3, 3))
    )
    X = unit_quats(rng, 2)
    fresh = dataset_push(data, X, np.ones((2, 3)), mode="fresh")
    np.testing.assert_array_equal(fresh.inputs, X)


def test_push_empty_batch_is_noop():
    data = GPDataset.empty("SE3", 0.01, 10)
    assert dataset_push(data, np.zeros((0, 8)), np.zeros((0, 3))) is data


@pytest.mark.parametrize(
    "inputs,targets",
    [
        (np.array([[0.0, 0.0, 0.0, 2.0]]), np.zeros((1, 3))),
        (np.array([[0.0, 0.0, 0.0, math.nan]]), np.zeros((1, 3))),
        (np.array([[0.0, 0.0, 0.0, 1.0]]), np.zeros((2, 3))),
    ],
)
def test_push_rejects_invalid_batches(inputs, targets):
    """Tests non-unit, non-finite and mismatched batches."""
    with pytest.raises(InvalidInputError):
        dataset_push(GPDataset.empty("S3", 0.01, 10), inputs, targets)


def test_push_rejects_non_unit_dual_quaternion():
    """Tests the dual-part orthogonality check on pose inputs."""
    bad = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5]])
    with pytest.raises(InvalidInputError):
        dataset_push(GPDataset.empty("SE3", 0.01, 10), bad, np.zeros((1, 3)))


def test_push_rejects_unknown_mode(rng: np.random.Generator):
    with pytest.raises(InvalidInputError):
        dataset_push(
            GPDataset.empty("S3", 0.01, 10),
            unit_quats(rng, 1),
            np.zeros((1, 3)),
            mode="sliding",  # type: ignore[arg-type]
        )


def test_dataset_rejects_overfull_and_negative_noise(rng: np.random.Generator):
    with pytest.raises(InvalidInputError):
        GPDataset(unit_quats(rng, 3), np.zeros((3, 3)), noise_var=0.1, capacity=2)
    with pytest.raises(InvalidInputError):
        GPDataset.empty("S3", noise_var=-1.0, capacity=2)


def test_dataset_save_and_load(rng: np.random.Generator, tmp_path):
    """Tests the npz snapshot keeps every field."""
    data = GPDataset(
        unit_dqs(rng, 6), rng.standard_normal((6, 3)), 0.02, 50, space="SE3"
    )
    path = str(tmp_path / "trans.npz")
    save_dataset(data, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.inputs, data.inputs)
    np.testing.assert_array_equal(back.targets, data.targets)
    assert (back.noise_var, back.capacity, back.space) == (0.02, 50, "SE3")


def test_load_dataset_rejects_unknown_space(rng: np.random.Generator, tmp_path):
    path = str(tmp_path / "odd.npz")
    np.savez(
        path,
        inputs=unit_quats(rng, 2),
        targets=np.zeros((2, 3)),
        noise_var=np.float64(0.01),
        capacity=np.int64(10),
        space=np.str_("SO2"),
    )
    with pytest.raises(InvalidInputError, match="unknown space 'SO2'"):
        load_dataset(path)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def test_chordal_distance(rng: np.random.Generator):
    """Tests the closed form and antipodal invariance of the distance."""
    for q, r in zip(unit_quats(rng, 100), unit_quats(rng, 100)):
        expected = math.sqrt(max(0.0, 2.0 - 2.0 * abs(float(q @ r))))
        assert chordal_dist(q, r) == pytest.approx(expected, abs=1e-7)
        assert chordal_dist(q, -r) == pytest.approx(chordal_dist(q, r), abs=1e-12)
        assert chordal_dist(q, -q) == pytest.approx(0.0, abs=1e-7)


def test_quaternion_kernel_matches_closed_form(rng: np.random.Generator, cfg):
    A, B = unit_quats(rng, 20), unit_quats(rng, 30)
    np.testing.assert_allclose(
        QuaternionKernel(cfg)(A, B), dense_kernel(cfg, A, B), atol=1e-12
    )
    np.testing.assert_allclose(QuaternionKernel(cfg).diag(A), cfg.sigma_f2)


def test_kernels_ignore_input_sign(rng: np.random.Generator, cfg):
    """Tests ``k(x, x') = k(x, -x')`` for quaternion and pose inputs."""
    A, B = unit_quats(rng, 10), unit_quats(rng, 10)
    np.testing.assert_allclose(
        QuaternionKernel(cfg)(A, -B), QuaternionKernel(cfg)(A, B), atol=1e-12
    )
    P, R = unit_dqs(rng, 10), unit_dqs(rng, 10)
    kernel = DualQuaternionKernel(cfg)
    np.testing.assert_allclose(kernel(-P, R), kernel(P, R), atol=1e-12)


def test_gram_matrices_are_symmetric_with_prior_diagonal(
    rng: np.random.Generator, cfg
):
    for kernel, X in (
        (QuaternionKernel(cfg), unit_quats(rng, 60)),
        (DualQuaternionKernel(cfg), unit_dqs(rng, 60)),
    ):
        K = kernel(X, X)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        np.testing.assert_allclose(np.diag(K), cfg.sigma_f2, atol=1e-12)
        assert np.all(K <= cfg.sigma_f2 + 1e-12)


def test_se3_distance_of_pure_translation():
    """Tests that a translation of d metres is a distance of d / lam."""
    a = pose_to_dq_array(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))
    b = pose_to_dq_array(np.array([0.0, 0.0, 0.0, 1.0, 3.0, 4.0, 0.0]))
    assert se3_dist(a, b, lam=2.0) == pytest.approx(2.5)
    assert se3_dist(a, -b, lam=2.0) == pytest.approx(2.5)


def test_ard_weights_scale_components(rng: np.random.Generator):
    """Tests that a weight of 2 on the translation x-axis doubles its distance."""
    a = pose_to_dq_array(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))[None]
    b = pose_to_dq_array(np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]))[None]
    plain = DualQuaternionKernel(KernelConfig(lam=1.0))
    weighted = DualQuaternionKernel(KernelConfig(lam=1.0, ard_pos=[2.0, 1.0, 1.0]))
    assert weighted.distance_sq(a, b)[0, 0] == pytest.approx(
        4.0 * plain.distance_sq(a, b)[0, 0]
    )


def test_kernel_eval_dispatches_on_input_size(cfg):
    identity = [0.0, 0.0, 0.0, 1.0]
    assert kernel_eval(cfg, identity, identity) == pytest.approx(cfg.sigma_f2)
    with pytest.raises(InvalidInputError):
        kernel_eval(cfg, identity, identity + [0.0] * 4)


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------


def test_prior_prediction(rng: np.random.Generator, cfg):
    """Tests that an empty dataset predicts zero mean and prior variance."""
    post = fit_posterior(GPDataset.empty("S3", 0.01, 10), cfg)
    assert post.is_prior
    mean, var = predict_batch(post, unit_quats(rng, 5))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(var, cfg.sigma_f2)


def test_posterior_matches_dense_inverse(rng: np.random.Generator, cfg):
    """Tests mean and variance against the textbook formulas."""
    data = make_dataset(rng, 40)
    post = fit_posterior(data, cfg, version=3)
    Xs = unit_quats(rng, 25)
    K = dense_kernel(cfg, data.inputs, data.inputs) + data.noise_var * np.eye(40)
    Ks = dense_kernel(cfg, data.inputs, Xs)
    Kinv = np.linalg.inv(K)
    mean, var = predict_batch(post, Xs)
    np.testing.assert_allclose(mean, Ks.T @ Kinv @ data.targets, atol=1e-8)
    expected_var = cfg.sigma_f2 - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)
    np.testing.assert_allclose(var, expected_var, atol=1e-8)
    assert post.version == 3
    assert post.jitter == 0.0


def test_predict_single_point(rng: np.random.Generator, cfg):
    post = fit_posterior(make_dataset(rng, 10), cfg)
    x = unit_quats(rng, 1)[0]
    mean, var = predict(post, x)
    batch_mean, batch_var = predict_batch(post, x)
    np.testing.assert_allclose(mean, batch_mean[0])
    np.testing.assert_allclose(var, np.full(3, batch_var[0]))


def test_posterior_interpolates_with_small_noise(rng: np.random.Generator):
    data = make_dataset(rng, 8, noise_var=1e-8)
    cfg = KernelConfig(sigma_f2=0.5, ell=0.2)
    mean, var = predict_batch(fit_posterior(data, cfg), data.inputs)
    np.testing.assert_allclose(mean, data.targets, atol=1e-4)
    assert np.all(var < 1e-6)


def test_variance_never_grows_with_more_data(rng: np.random.Generator, cfg):
    """Tests that adding samples can only shrink the posterior variance."""
    data = make_dataset(rng, 30)
    Xs = unit_quats(rng, 50)
    previous = np.full(50, cfg.sigma_f2)
    for n in range(0, 31, 5):
        subset = GPDataset(data.inputs[:n], data.targets[:n], data.noise_var, 30)
        _, var = predict_batch(fit_posterior(subset, cfg), Xs)
        assert np.all(var >= 0.0)
        assert np.all(var <= previous + 1e-12)
        previous = var


def test_pose_posterior_is_sign_invariant(rng: np.random.Generator, cfg):
    data = GPDataset(unit_dqs(rng, 20), rng.standard_normal((20, 3)), 0.01, 20, "SE3")
    post = fit_posterior(data, cfg)
    Xs = unit_dqs(rng, 5)
    m1, v1 = predict_batch(post, Xs)
    m2, v2 = predict_batch(post, -Xs)
    np.testing.assert_allclose(m1, m2, atol=1e-12)
    np.testing.assert_allclose(v1, v2, atol=1e-12)


def test_log_marginal_likelihood_matches_scipy(rng: np.random.Generator, cfg):
    """Tests the evidence against a sum of independent Gaussian log densities."""
    data = make_dataset(rng, 20)
    K = dense_kernel(cfg, data.inputs, data.inputs) + data.noise_var * np.eye(20)
    expected = sum(
        multivariate_normal(mean=np.zeros(20), cov=K).logpdf(data.targets[:, i])
        for i in range(3)
    )
    assert log_marginal_likelihood(data, cfg) == pytest.approx(expected, rel=1e-9)


def test_fit_hyperparameters_breaks_ties_toward_short_length_scale():
    """Tests that equal evidence resolves to the smallest length-scale."""
    yaws = np.array([0.0, 1.0, 2.0, 3.0])
    X = np.column_stack(
        [np.zeros(4), np.zeros(4), np.sin(0.5 * yaws), np.cos(0.5 * yaws)]
    )
    data = GPDataset(X, np.zeros((4, 3)), noise_var=0.01, capacity=4)
    grid = KernelGrid(sigma_f2=[0.1], ell=[0.02, 0.01], lam=[1.0], noise_var=[0.01])
    choice = fit_hyperparameters(data, grid)
    assert choice.kernel.ell == 0.01
    assert choice.noise_var == 0.01


def test_fit_hyperparameters_prefers_the_generating_noise(rng: np.random.Generator):
    """Tests that the evidence separates a clearly wrong noise level."""
    X = unit_quats(rng, 80)
    truth = KernelConfig(sigma_f2=1.0, ell=0.5)
    K = dense_kernel(truth, X, X) + 0.01 * np.eye(80)
    Y = rng.multivariate_normal(np.zeros(80), K, size=3, check_valid="ignore").T
    data = GPDataset(X, Y, noise_var=1.0, capacity=80)
    grid = KernelGrid(sigma_f2=[1.0], ell=[0.5], lam=[1.0], noise_var=[0.01, 10.0])
    assert fit_hyperparameters(data, grid).noise_var == 0.01


def test_fit_hyperparameters_needs_three_samples(rng: np.random.Generator):
    with pytest.raises(InvalidInputError):
        fit_hyperparameters(make_dataset(rng, 2), KernelGrid())


# ---------------------------------------------------------------------------
# Confidence bounds
# ---------------------------------------------------------------------------


def test_information_gain_matches_log_det(rng: np.random.Generator, cfg):
    data = make_dataset(rng, 25)
    K = dense_kernel(cfg, data.inputs, data.inputs)
    _, logdet = np.linalg.slogdet(np.eye(25) + K / data.noise_var)
    np.testing.assert_allclose(information_gain(fit_posterior(data, cfg)), 0.5 * logdet)
    empty = fit_posterior(GPDataset.empty("S3", 0.01, 5), cfg)
    np.testing.assert_array_equal(information_gain(empty), 0.0)


def test_beta_bound_formula():
    expected = math.sqrt(
        2.0 * 1.5**2 + 300.0 * 2.0 * math.log(11.0 / (1.0 - 0.9 ** (1.0 / 3.0))) ** 3
    )
    assert beta_bound(1.5, 2.0, 10, 0.9) == pytest.approx(expected)
    assert beta_bound(1.5, 2.0, 100, 0.9) > beta_bound(1.5, 2.0, 10, 0.9)
    assert beta_bound(0.0, 0.0, 0, 0.5) == 0.0


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.2])
def test_beta_bound_rejects_confidence_outside_open_interval(gamma: float):
    with pytest.raises(InvalidConfidenceError):
        beta_bound(1.0, 1.0, 10, gamma)


def test_rho_bound_combines_outputs(rng: np.random.Generator, cfg):
    """Tests ``rho = sqrt(sum_i beta_i^2 var(x))``."""
    post = fit_posterior(make_dataset(rng, 15), cfg)
    bound = error_bound_model(post, xi=1.0, gamma=0.9)
    assert bound.n_points == 15
    X = unit_quats(rng, 8)
    _, var = predict_batch(post, X)
    beta = bound.beta_array()
    expected = np.sqrt(var * np.sum(beta**2))
    np.testing.assert_allclose(rho_bound_batch(post, bound, X), expected)
    assert rho_bound(post, bound, X[0]) == pytest.approx(expected[0])
    assert max_rho_bound(post, bound, X) == pytest.approx(np.max(expected))
    assert max_rho_bound(post, bound, np.zeros((0, 4))) == 0.0


def test_fit_posterior_logs_nothing_for_well_conditioned_data(
    rng: np.random.Generator, cfg, caplog
):
    with caplog.at_level(logging.WARNING, logger="backend.src.gp_learning"):
        fit_posterior(make_dataset(rng, 20), cfg)
    assert "jitter" not in caplog.text


def _coverage(
    rng: np.random.Generator, n_draws: int, gamma: Optional[float] = None
) -> float:
    """Share of held-out prior draws inside two sigmas, or the envelope at gamma."""
    cfg = KernelConfig(sigma_f2=1.0, ell=0.5)
    noise = 0.01
    hits = 0
    total = 0
    for _ in range(n_draws):
        X = unit_quats(rng, 30)
        Xs = unit_quats(rng, 10)
        allx = np.vstack([X, Xs])
        cov = dense_kernel(cfg, allx, allx) + 1e-10 * np.eye(40)
        f = rng.multivariate_normal(np.zeros(40), cov, check_valid="ignore")
        y = f[:30] + math.sqrt(noise) * rng.standard_normal(30)
        data = GPDataset(X, np.column_stack([y, y, y]), noise, 30)
        post = fit_posterior(data, cfg)
        mean, var = predict_batch(post, Xs)
        if gamma is None:
            width = 2.0 * np.sqrt(var)
        else:
            width = rho_bound_batch(post, error_bound_model(post, 1.0, gamma), Xs)
        hits += int(np.sum(np.abs(f[30:] - mean[:, 0]) <= width))
        total += 10
    return hits / total


@pytest.mark.slow
def test_posterior_two_sigma_coverage():
    """Tests that about 95% of prior draws fall inside two posterior sigmas."""
    assert 0.93 <= _coverage(np.random.default_rng(99), 500) <= 0.97


@pytest.mark.slow
def test_error_envelope_is_conservative():
    """Tests that the gamma = 0.9 envelope covers at least 85% of prior draws."""
    assert _coverage(np.random.default_rng(5), 500, gamma=0.9) >= 0.85
