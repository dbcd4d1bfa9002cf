"""Dense real-matrix kernels: least squares, discrete Lyapunov solves,
pseudo-inverse, spectral radius, and matrix file exchange.

All functions take and return plain ``numpy.ndarray`` values and never
mutate their inputs.
"""
from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np

from .errors import (
    ConvergenceError,
    DimensionError,
    NonFiniteError,
    RankDeficientWarning,
    UnstableDynamicsError,
)

STABILITY_MARGIN = 1e-6


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float array or raise."""
    m = np.asarray(a, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def _square(a, name):
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    return m


def solve_least_squares(targets, regressors, ridge=0.0):
    """Solve ``min_X ||targets - X @ regressors||_F^2 + ridge * ||X||_F^2``.

    Parameters
    ----------
    targets : (p, N) array
    regressors : (q, N) array
    ridge : float
        Tikhonov weight. With ``ridge > 0`` the minimizer is unique.

    Returns
    -------
    X : (p, q) array

    With ``ridge == 0`` and rank-deficient regressors the minimum-norm
    solution is returned and a :class:`RankDeficientWarning` is issued.
    """
    Y = as_matrix(targets, "targets")
    R = as_matrix(regressors, "regressors")
    if Y.shape[1] != R.shape[1]:
        raise DimensionError(
            f"targets have {Y.shape[1]} columns but regressors have {R.shape[1]}"
        )
    if R.shape[1] < 1:
        raise DimensionError("need at least one sample")
    if ridge < 0 or not np.isfinite(ridge):
        raise ValueError("ridge must be a nonnegative finite number")
    q = R.shape[0]

    if ridge > 0:
        # Augmented system [R^T; sqrt(ridge) I] X^T = [Y^T; 0] avoids forming R R^T.
        lhs = np.vstack([R.T, np.sqrt(ridge) * np.eye(q)])
        rhs = np.vstack([Y.T, np.zeros((q, Y.shape[0]))])
        sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        return sol.T

    s = np.linalg.svd(R, compute_uv=False)
    tol = max(R.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < q:
        warnings.warn(
            f"rank-deficient regressors (rank {rank} < {q}); supply ridge or "
            "accept minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
        return Y @ pseudo_inverse(R, tol_rel=max(tol / s[0], 1e-15) if s[0] > 0 else 1.0)
    sol, *_ = np.linalg.lstsq(R.T, Y.T, rcond=None)
    return sol.T


def spectral_radius(A):
    """Largest eigenvalue modulus of a square matrix."""
    M = _square(A, "A")
    if M.size == 0:
        raise DimensionError("A must be at least 1x1")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(
            f"eigenvalue iteration did not converge (||A||_F = {np.linalg.norm(M):.3e})"
        ) from exc
    return float(np.max(np.abs(eig)))


def solve_discrete_lyapunov(A, Q, eps_stab=STABILITY_MARGIN, max_iter=200):
    """Solve ``X = A X A^T + Q`` by squared-Smith doubling.

    After ``k`` doublings the iterate equals the truncated series
    ``sum_{t < 2^k} A^t Q (A^T)^t``.
    """
    A = _square(A, "A")
    Q = _square(Q, "Q")
    if A.shape != Q.shape:
        raise DimensionError(f"A {A.shape} and Q {Q.shape} differ in shape")
    rho = spectral_radius(A)
    if rho >= 1.0 - eps_stab:
        raise UnstableDynamicsError(
            f"unstable lifted dynamics (spectral radius {rho:.8f}); "
            "use finite-horizon Gramian"
        )
    Q = 0.5 * (Q + Q.T)
    X = Q.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        step = Ak @ X @ Ak.T
        X = X + step
        Ak = Ak @ Ak
        if np.linalg.norm(step) <= 1e-17 * max(1.0, np.linalg.norm(X)):
            break
        if not np.all(np.isfinite(X)):
            raise ConvergenceError("Smith iteration produced non-finite values")
    else:
        raise ConvergenceError(f"Smith iteration did not converge in {max_iter} doublings")
    X = 0.5 * (X + X.T)
    # one refinement pass on the residual equation E = A E A^T + (A X A^T + Q - X)
    resid = A @ X @ A.T + Q - X
    if np.linalg.norm(resid) > 1e-13 * max(1.0, np.linalg.norm(X)):
        E = 0.5 * (resid + resid.T)
        Ak = A.copy()
        for _ in range(max_iter):
            step = Ak @ E @ Ak.T
            E = E + step
            Ak = Ak @ Ak
            if np.linalg.norm(step) <= 1e-17 * max(1.0, np.linalg.norm(E)):
                break
        X = X + E
        X = 0.5 * (X + X.T)
    return X


def lyapunov_residual(A, Q, X):
    """Relative residual ``||A X A^T + Q - X||_F / max(1, ||X||_F)``."""
    A, Q, X = (np.asarray(m, dtype=float) for m in (A, Q, X))
    return float(np.linalg.norm(A @ X @ A.T + Q - X) / max(1.0, np.linalg.norm(X)))


def pseudo_inverse(A, tol_rel=1e-12):
    """Moore-Penrose pseudo-inverse; singular values below ``tol_rel * s_max`` are dropped."""
    M = as_matrix(A, "A")
    if tol_rel <= 0:
        raise ValueError("tol_rel must be positive")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = s > tol_rel * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


# -- file exchange ---------------------------------------------------------

def _fmt(v):
    return format(float(v), ".12g")


def matrix_to_json(A):
    M = as_matrix(A)
    return {"rows": M.shape[0], "cols": M.shape[1], "data": [float(_fmt(v)) for v in M.ravel()]}


def matrix_from_json(obj):
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError) as exc:
        raise DimensionError(f"malformed matrix record: {exc}") from exc
    if len(data) != rows * cols:
        raise DimensionError(f"expected {rows * cols} entries, got {len(data)}")
    return as_matrix(np.asarray(data, dtype=float).reshape(rows, cols))


def write_matrix_csv(path, A):
    M = as_matrix(A)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in M:
            writer.writerow([_fmt(v) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if len({len(r) for r in rows}) > 1:
        raise DimensionError(f"ragged CSV matrix in {path}")
    return as_matrix(np.array(rows, dtype=float))


def write_matrix_json(path, A):
    Path(path).write_text(json.dumps(matrix_to_json(A)))


def read_matrix_json(path):
    return matrix_from_json(json.loads(Path(path).read_text()))
