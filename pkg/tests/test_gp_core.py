import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from services.errors import DimensionMismatch, NumericalFailure
from services.gp_core import (
    JITTER_LADDER,
    HyperparameterSet,
    default_inducing_count,
    dense_log_marginal,
    dense_posterior_cov,
    fitc_prior_cov,
    gp_log_marginal,
    jittered_cholesky,
    kernel_matrix,
    log_det_psd,
    se_ard_kernel,
    sparse_posterior_cov,
)


def theta_for(X, amplitude=1.0, lengthscale=1.0, noise_var=0.1, inducing=None):
    X = np.asarray(X, dtype=np.float64)
    return HyperparameterSet(
        amplitude=amplitude,
        lengthscales=np.full(X.shape[1], lengthscale),
        noise_var=noise_var,
        inducing=X if inducing is None else inducing,
    )


def random_problem(seed, d=12, dim=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3.0, 3.0, size=(d, dim))
    return X, rng.standard_normal(d)


def spread_problem(seed, d):
    """Points on a jittered unit grid, so the kernel matrix stays well conditioned."""
    rng = np.random.default_rng(seed)
    grid = np.array([[i, j] for i in range(5) for j in range(5)], dtype=np.float64)
    X = grid[rng.permutation(len(grid))[:d]] + rng.uniform(-0.1, 0.1, size=(d, 2))
    return X, rng.standard_normal(d)


def test_kernel_at_zero_distance_is_amplitude_squared():
    theta = theta_for([[0.0, 0.0]], amplitude=1.7)
    assert se_ard_kernel([0.3, -1.0], [0.3, -1.0], theta) == pytest.approx(1.7 ** 2)


def test_kernel_closed_form():
    theta = theta_for([[0.0]])
    assert se_ard_kernel([0.0], [1.0], theta) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_large_lengthscale_suppresses_coordinate():
    theta = HyperparameterSet(1.0, [1.0, 1e6], 0.1, [[0.0, 0.0]])
    near = se_ard_kernel([0.0, 0.0], [0.0, 0.0], theta)
    far = se_ard_kernel([0.0, 0.0], [0.0, 5.0], theta)
    assert near - far < 1e-9


def test_kernel_dimension_mismatch():
    theta = theta_for([[0.0, 0.0]])
    with pytest.raises(DimensionMismatch):
        se_ard_kernel([0.0], [1.0], theta)
    with pytest.raises(DimensionMismatch):
        HyperparameterSet(1.0, [1.0, 1.0], 0.1, [[0.0, 0.0, 0.0]])


def test_kernel_matrix_two_points():
    theta = theta_for([[0.0]])
    K = kernel_matrix(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]), theta)
    expected = np.array([[1.0, math.exp(-0.5)], [math.exp(-0.5), 1.0]])
    np.testing.assert_allclose(K.numpy(), expected, atol=1e-12)


def test_kernel_matrix_symmetric_with_amplitude_diagonal():
    X, _ = random_problem(0, d=15, dim=3)
    theta = theta_for(X, amplitude=2.0, lengthscale=0.7)
    K = kernel_matrix(X, X, theta).numpy()
    assert np.max(np.abs(K - K.T)) < 1e-12
    np.testing.assert_allclose(np.diag(K), 4.0)


def test_hyperparameters_must_be_positive():
    with pytest.raises(ValueError):
        HyperparameterSet(0.0, [1.0], 0.1, [[0.0]])
    with pytest.raises(ValueError):
        HyperparameterSet(1.0, [1.0], -0.1, [[0.0]])


def test_log_det_identity_and_diagonal():
    assert log_det_psd(np.eye(7)) == pytest.approx(0.0, abs=1e-9)
    assert log_det_psd(np.diag([2.0, 3.0])) == pytest.approx(math.log(6.0), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_log_det_matches_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((8, 8))
    M = A @ A.T + 0.5 * np.eye(8)
    jittered = M + 1e-10 * np.mean(np.diag(M)) * np.eye(8)
    assert log_det_psd(M) == pytest.approx(np.sum(np.log(np.linalg.eigvalsh(jittered))), abs=1e-8)


@settings(max_examples=20)
@given(st.integers(min_value=0, max_value=10_000), st.sampled_from([0.5, 2.0, 10.0]))
def test_log_det_scaling(seed, alpha):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    M = A @ A.T + np.eye(6)
    assert log_det_psd(alpha * M) == pytest.approx(6 * math.log(alpha) + log_det_psd(M), abs=1e-8)


def test_log_det_always_takes_the_first_jitter_step():
    _, jitter = jittered_cholesky(torch.eye(3, dtype=torch.float64) * 4.0, JITTER_LADDER)
    assert jitter == pytest.approx(4e-10)
    _, exact = jittered_cholesky(torch.eye(3, dtype=torch.float64) * 4.0)
    assert exact == 0.0


def test_log_det_accepts_round_off_negative_eigenvalues():
    assert math.isfinite(log_det_psd(np.diag([1.0, -1e-9])))
    v = np.ones((4, 1))
    assert math.isfinite(log_det_psd(v @ v.T))


@pytest.mark.parametrize(
    "matrix",
    [
        np.array([[2.0, 0.5], [0.4, 2.0]]),
        np.diag([1.0, -1e-6]),
        np.array([[1.0, 2.0], [2.0, 1.0]]),
    ],
)
def test_log_det_rejects_asymmetric_or_indefinite(matrix):
    with pytest.raises(NumericalFailure):
        log_det_psd(matrix)


def test_jittered_cholesky_rescues_singular_psd():
    v = np.ones((4, 1))
    factor, jitter = jittered_cholesky(torch.as_tensor(v @ v.T, dtype=torch.float64))
    assert jitter > 0
    assert torch.isfinite(factor).all()


def test_jittered_cholesky_gives_up_on_indefinite():
    with pytest.raises(NumericalFailure):
        jittered_cholesky(torch.tensor([[1.0, 0.0], [0.0, -1.0]], dtype=torch.float64))


@pytest.mark.parametrize("seed", range(20))
def test_sparse_posterior_matches_dense_when_inducing_equals_inputs(seed):
    X, y = spread_problem(seed, d=4 + seed % 17)
    theta = theta_for(X, amplitude=1.3, lengthscale=0.6, noise_var=0.2)
    sparse, dense = sparse_posterior_cov(X, theta), dense_posterior_cov(X, theta)
    np.testing.assert_allclose(sparse.matrix.numpy(), dense.matrix.numpy(), atol=1e-8)
    assert float(gp_log_marginal(y, X, theta)) == pytest.approx(float(dense_log_marginal(y, X, theta)), abs=1e-6)


def test_uninformative_noise_recovers_prior():
    X, _ = random_problem(1)
    theta = theta_for(X, noise_var=1e6, inducing=X[:4])
    posterior = sparse_posterior_cov(X, theta).matrix.numpy()
    prior = fitc_prior_cov(X, theta).detach().numpy()
    assert np.max(np.abs(posterior - prior)) <= 1e-3 * np.max(np.abs(prior))


def test_near_noiseless_observations_collapse_posterior():
    X, _ = spread_problem(2, d=8)
    theta = theta_for(X, lengthscale=0.6, noise_var=1e-12)
    eigenvalues = np.linalg.eigvalsh(sparse_posterior_cov(X, theta).matrix.numpy())
    assert np.all(eigenvalues < 1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_posterior_below_prior_in_loewner_order(seed):
    X, _ = random_problem(seed, d=14, dim=3)
    theta = theta_for(X, noise_var=0.3, inducing=X[:5])
    gap = fitc_prior_cov(X, theta).detach().numpy() - sparse_posterior_cov(X, theta).matrix.numpy()
    assert np.linalg.eigvalsh(gap).min() >= -1e-8


def test_posterior_symmetric():
    X, _ = random_problem(3, d=10)
    matrix = sparse_posterior_cov(X, theta_for(X, inducing=X[:3])).matrix.numpy()
    assert np.max(np.abs(matrix - matrix.T)) < 1e-10


def test_inducing_order_does_not_matter():
    X, _ = random_problem(4, d=12)
    Z = X[:5]
    a = sparse_posterior_cov(X, theta_for(X, inducing=Z)).matrix.numpy()
    b = sparse_posterior_cov(X, theta_for(X, inducing=Z[::-1].copy())).matrix.numpy()
    assert np.max(np.abs(a - b)) < 1e-9


def test_log_marginal_single_point_standard_normal():
    theta = HyperparameterSet(math.sqrt(0.5), [1.0], 0.5, [[0.0]])
    value = float(gp_log_marginal([0.0], [[0.0]], theta))
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_marginal_decreases_with_target_scale():
    theta = HyperparameterSet(math.sqrt(0.5), [1.0], 0.5, [[0.0]])
    X = [[0.0], [40.0]]
    y = np.array([0.3, -0.2])
    assert float(gp_log_marginal(10 * y, X, theta)) < float(gp_log_marginal(y, X, theta))


def test_log_marginal_target_count_must_match():
    X, y = random_problem(5, d=6)
    with pytest.raises(DimensionMismatch):
        gp_log_marginal(y[:5], X, theta_for(X))


def test_log_marginal_is_differentiable():
    X, y = random_problem(6, d=8)
    lengthscales = torch.ones(2, dtype=torch.float64, requires_grad=True)
    theta = HyperparameterSet(1.0, lengthscales, 0.2, X[:3])
    gp_log_marginal(y, X, theta).backward()
    assert torch.isfinite(lengthscales.grad).all()
    assert lengthscales.grad.abs().sum() > 0


def test_default_inducing_count():
    assert default_inducing_count(2) == 1
    assert default_inducing_count(3) == 1
    assert default_inducing_count(40) == 20
    assert default_inducing_count(500) == 32
