import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopdec import numerics as nm
from koopdec.errors import (
    DimensionError,
    NonFiniteError,
    RankDeficientWarning,
    UnstableDynamicsError,
)


def stable_matrix(rng, n, rho):
    A = rng.standard_normal((n, n))
    return A * (rho / np.max(np.abs(np.linalg.eigvals(A))))


# -- least squares ----------------------------------------------------------

def test_lstsq_identity():
    np.testing.assert_allclose(nm.solve_least_squares(np.eye(3), np.eye(3)), np.eye(3), atol=1e-14)


def test_lstsq_exact_scaled_fit():
    rng = np.random.default_rng(1)
    R = rng.standard_normal((4, 4))
    np.testing.assert_allclose(nm.solve_least_squares(2 * R, R), 2 * np.eye(4), atol=1e-10)


def test_lstsq_ridge_matches_normal_equations():
    rng = np.random.default_rng(2)
    Y = rng.standard_normal((4, 50))
    R = rng.standard_normal((4, 50))
    oracle = np.linalg.solve(R @ R.T + 0.1 * np.eye(4), R @ Y.T).T
    np.testing.assert_allclose(nm.solve_least_squares(Y, R, ridge=0.1), oracle, rtol=1e-10, atol=1e-12)


def test_lstsq_square_invertible_reproduces_inverse():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((5, 5)) + 3 * np.eye(5)
    Y = rng.standard_normal((2, 5))
    np.testing.assert_allclose(nm.solve_least_squares(Y, R), Y @ np.linalg.inv(R), rtol=1e-10, atol=1e-10)


def test_lstsq_rank_deficient_warns_and_returns_min_norm():
    R = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    Y = np.array([[1.0, 2.0, 3.0]])
    with pytest.warns(RankDeficientWarning):
        X = nm.solve_least_squares(Y, R)
    np.testing.assert_allclose(X, Y @ np.linalg.pinv(R), atol=1e-12)


def test_lstsq_dimension_mismatch():
    with pytest.raises(DimensionError):
        nm.solve_least_squares(np.ones((2, 3)), np.ones((2, 4)))


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        nm.solve_least_squares(np.array([[np.nan]]), np.ones((1, 1)))


# -- Lyapunov -----------------------------------------------------------------

def test_lyapunov_zero_dynamics():
    np.testing.assert_allclose(nm.solve_discrete_lyapunov(np.zeros((3, 3)), np.eye(3)), np.eye(3))


def test_lyapunov_geometric_series():
    X = nm.solve_discrete_lyapunov(0.5 * np.eye(2), np.eye(2))
    np.testing.assert_allclose(X, 4 / 3 * np.eye(2), rtol=1e-14)


def test_lyapunov_matches_truncated_sum():
    rng = np.random.default_rng(4)
    A = stable_matrix(rng, 5, 0.8)
    B = rng.standard_normal((5, 2))
    Q = B @ B.T
    oracle = np.zeros_like(Q)
    At = np.eye(5)
    for _ in range(201):
        oracle += At @ Q @ At.T
        At = A @ At
    np.testing.assert_allclose(nm.solve_discrete_lyapunov(A, Q), oracle, atol=1e-8)


def test_lyapunov_residual_and_symmetry_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        A = stable_matrix(rng, n, rng.uniform(0.05, 0.99))
        B = rng.standard_normal((n, int(rng.integers(1, 4))))
        X = nm.solve_discrete_lyapunov(A, B @ B.T)
        assert nm.lyapunov_residual(A, B @ B.T, X) <= 1e-10
        assert np.linalg.norm(X - X.T) <= 1e-12 * np.linalg.norm(X)
        assert np.min(np.linalg.eigvalsh(X)) >= -1e-10 * np.linalg.norm(X)


def test_lyapunov_rejects_unstable():
    with pytest.raises(UnstableDynamicsError, match="finite-horizon"):
        nm.solve_discrete_lyapunov(np.diag([0.5, 1.0]), np.eye(2))


def test_lyapunov_near_unit_circle():
    A = np.diag([1 - 1e-4, 0.3])
    X = nm.solve_discrete_lyapunov(A, np.eye(2))
    np.testing.assert_allclose(X[0, 0], 1 / (1 - (1 - 1e-4) ** 2), rtol=1e-9)


# -- pseudo-inverse -------------------------------------------------------------

def test_pinv_diagonal():
    np.testing.assert_allclose(nm.pseudo_inverse(np.diag([2.0, 0.0]), 1e-12), np.diag([0.5, 0.0]))


def test_pinv_matches_inverse():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((3, 3))
    np.testing.assert_allclose(nm.pseudo_inverse(A), np.linalg.inv(A), rtol=1e-10, atol=1e-10)


def test_pinv_zero():
    np.testing.assert_array_equal(nm.pseudo_inverse(np.zeros((2, 3))), np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_pinv_penrose_identities(r, c, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, min(r, c) + 1))
    A = rng.standard_normal((r, k)) @ rng.standard_normal((k, c))
    P = nm.pseudo_inverse(A, 1e-10)
    scale = max(1.0, np.linalg.norm(A) * np.linalg.norm(P))
    assert np.linalg.norm(A @ P @ A - A) <= 1e-8 * scale * np.linalg.norm(A)
    assert np.linalg.norm(P @ A @ P - P) <= 1e-8 * scale * np.linalg.norm(P)
    assert np.linalg.norm(A @ P - (A @ P).T) <= 1e-8 * scale
    assert np.linalg.norm(P @ A - (P @ A).T) <= 1e-8 * scale


def test_pinv_involution_full_rank():
    rng = np.random.default_rng(7)
    for shape in [(3, 3), (4, 2), (2, 5)]:
        A = rng.standard_normal(shape)
        np.testing.assert_allclose(nm.pseudo_inverse(nm.pseudo_inverse(A)), A, rtol=1e-8, atol=1e-10)


# -- spectral radius ---------------------------------------------------------------

def test_spectral_radius_diagonal():
    assert nm.spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9, rel=1e-12)


def test_spectral_radius_scaled_rotation():
    assert nm.spectral_radius(0.7 * np.array([[0.0, -1.0], [1.0, 0.0]])) == pytest.approx(0.7, rel=1e-12)


def _block_power_radius(A, block=3, iters=4000, seed=0):
    # Orthogonal iteration on a small block; the dominant (possibly complex) pair
    # shows up in the Rayleigh quotient.
    rng = np.random.default_rng(seed)
    V = np.linalg.qr(rng.standard_normal((A.shape[0], block)))[0]
    for _ in range(iters):
        V = np.linalg.qr(A @ V)[0]
    H = V.T @ A @ V
    # H is tiny; use its characteristic polynomial roots rather than eig
    return float(np.max(np.abs(np.roots(np.poly(H)))))


def test_spectral_radius_against_power_iteration():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((8, 8))
    assert nm.spectral_radius(A) == pytest.approx(_block_power_radius(A), rel=1e-8)


# -- file exchange ------------------------------------------------------------------

def test_matrix_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    A = rng.standard_normal((3, 4))
    nm.write_matrix_csv(tmp_path / "a.csv", A)
    nm.write_matrix_json(tmp_path / "a.json", A)
    np.testing.assert_allclose(nm.read_matrix_csv(tmp_path / "a.csv"), A, rtol=1e-11)
    B = nm.read_matrix_json(tmp_path / "a.json")
    assert B.shape == (3, 4)
    np.testing.assert_allclose(B, A, rtol=1e-11)


def test_matrix_json_rejects_bad_length():
    with pytest.raises(DimensionError):
        nm.matrix_from_json({"rows": 2, "cols": 2, "data": [1, 2, 3]})
