"""Koopman Gramians, input/output energies and subset scores.

For a fitted model with lifted dynamics ``z' = K_x z + K_u psi_u(w)`` and
read-out ``y = W_h z`` the observability and controllability Gramians are

    X_o = sum_t (K_x^T)^t W_h^T W_h K_x^t,    X_c = sum_t K_x^t K_u K_u^T (K_x^T)^t.

Subset scores compare quadratic forms of the lifted indicator vector of a
subset against those of its complement:

    kappa_o(S) = q_o(I_S) / q_o(I - I_S),   q_o(v) = psi_x(v)^T X_o psi_x(v),

and likewise ``kappa_c`` with the pseudo-inverse of ``X_c``. The lifting
is applied to the 0/1 indicator itself, not to a projection of a lifted
state.

Subsets are sets of *units*. By default every state coordinate is its own
unit; ``units`` lets several coordinates (say a generator's angle and
speed) be switched on together.
"""
from __future__ import annotations

import csv
import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics
from .errors import DegenerateSubsetError, DimensionError, NonFiniteError, UnreachableTargetWarning

DEFAULT_HORIZON = 200
PINV_TOL = 1e-10
DENOMINATOR_FLOOR = 1e-14


@dataclass(frozen=True)
class KoopmanGramians:
    X_o: np.ndarray
    X_c: np.ndarray
    X_c_pinv: np.ndarray
    method: str  # "lyapunov_exact" or "finite_horizon"
    spectral_radius_Kx: float
    horizon: int = None

    def metadata(self):
        return {"method": self.method, "horizon": self.horizon,
                "spectral_radius_Kx": float(self.spectral_radius_Kx),
                "lifted_dim": int(self.X_o.shape[0])}

    def save(self, directory):
        """Write ``X_o``, ``X_c``, ``X_c_pinv`` as CSV and JSON plus ``gramians_meta.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("X_o", "X_c", "X_c_pinv"):
            numerics.write_matrix_csv(directory / f"{name}.csv", getattr(self, name))
            numerics.write_matrix_json(directory / f"{name}.json", getattr(self, name))
        meta = dict(self.metadata(), spectral_radius_Kx=float(format(self.spectral_radius_Kx, ".12g")))
        (directory / "gramians_meta.json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "gramians_meta.json").read_text())
        mats = {n: numerics.read_matrix_json(directory / f"{n}.json") for n in ("X_o", "X_c", "X_c_pinv")}
        return cls(method=meta["method"], spectral_radius_Kx=meta["spectral_radius_Kx"],
                   horizon=meta.get("horizon"), **mats)


def finite_horizon_gramian(A, Q, T):
    """``sum_{t=0}^{T-1} A^t Q (A^T)^t``."""
    A = numerics.as_matrix(A, "A")
    X = np.zeros_like(A)
    term = 0.5 * (Q + Q.T)
    for _ in range(T):
        X = X + term
        term = A @ term @ A.T
    return 0.5 * (X + X.T)


def compute_gramians(model, horizon_override=None, eps_stab=numerics.STABILITY_MARGIN):
    """Gramians of the lifted model.

    Uses the Lyapunov solution when ``rho(K_x) < 1 - eps_stab`` and no
    horizon is forced; otherwise ``horizon_override`` (default 200) terms
    of the series.
    """
    K_x, K_u, W_h = model.K_x, model.K_u, model.W_h
    for name, M in (("K_x", K_x), ("K_u", K_u), ("W_h", W_h)):
        if not np.all(np.isfinite(M)):
            raise NonFiniteError(f"model matrix {name} has non-finite entries")
    rho = numerics.spectral_radius(K_x)
    Qo, Qc = W_h.T @ W_h, K_u @ K_u.T
    if horizon_override is None and rho < 1.0 - eps_stab:
        X_o = numerics.solve_discrete_lyapunov(K_x.T, Qo, eps_stab)
        X_c = numerics.solve_discrete_lyapunov(K_x, Qc, eps_stab)
        method, horizon = "lyapunov_exact", None
    else:
        horizon = DEFAULT_HORIZON if horizon_override is None else int(horizon_override)
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        X_o = finite_horizon_gramian(K_x.T, Qo, horizon)
        X_c = finite_horizon_gramian(K_x, Qc, horizon)
        method = "finite_horizon"
        if not (np.all(np.isfinite(X_o)) and np.all(np.isfinite(X_c))):
            raise NonFiniteError(f"finite-horizon Gramians overflowed (spectral radius {rho:.4g}, horizon {horizon})")
    return KoopmanGramians(X_o, X_c, numerics.pseudo_inverse(X_c, PINV_TOL), method, float(rho), horizon)


# -- energies ---------------------------------------------------------------------

def output_energy(model, grams, x0):
    """``psi_x(x0)^T X_o psi_x(x0)``: output energy of the free response from ``x0``."""
    z = model.state_dict.lift(x0)
    return float(max(z @ grams.X_o @ z, 0.0))


def reachability_gap(grams, z):
    """Norm of the part of ``z`` outside ``range(X_c)``."""
    P = grams.X_c @ grams.X_c_pinv
    return float(np.linalg.norm(z - P @ z))


def min_input_energy(model, grams, x0, tol=1e-8):
    """``psi_x(x0)^T X_c^+ psi_x(x0)``: least input energy reaching ``x0`` from rest.

    When ``psi_x(x0)`` has a component outside ``range(X_c)`` larger than
    ``tol * ||psi_x(x0)||`` an :class:`UnreachableTargetWarning` is issued;
    the value then only accounts for the reachable part.
    """
    z = model.state_dict.lift(x0)
    nz = np.linalg.norm(z)
    if nz > 0 and reachability_gap(grams, z) > tol * nz:
        warnings.warn("target unreachable in lifted space", UnreachableTargetWarning, stacklevel=2)
    return float(max(z @ grams.X_c_pinv @ z, 0.0))


# -- subset scores ---------------------------------------------------------------------

def default_units(n):
    return [(i,) for i in range(n)]


def _check_units(units, n):
    units = [tuple(int(i) for i in u) for u in units]
    flat = sorted(i for u in units for i in u)
    if flat != list(range(n)):
        raise DimensionError(f"units must partition the {n} state coordinates")
    return units


def indicator(n, subset, units=None):
    """0/1 state vector switching on every coordinate of the units in ``subset``."""
    units = default_units(n) if units is None else units
    v = np.zeros(n)
    for u in subset:
        v[list(units[u])] = 1.0
    return v


def _validate_subset(subset, n_units):
    S = tuple(sorted(set(int(i) for i in subset)))
    if any(i < 0 or i >= n_units for i in S):
        raise DimensionError(f"subset {S} has indices outside 0..{n_units - 1}")
    if len(S) == 0 or len(S) == n_units:
        raise DegenerateSubsetError(
            "complement indicator is the zero vector; kappa undefined for the empty or full set", S)
    return S


def _ratio(model, X, S, units):
    n = model.n_state
    v = indicator(n, S, units)
    a, b = model.state_dict.lift(v), model.state_dict.lift(1.0 - v)
    num, den = float(a @ X @ a), float(b @ X @ b)
    if not abs(den) >= DENOMINATOR_FLOOR:
        raise DegenerateSubsetError(f"degenerate denominator {den:.3g} for subset {S}", S)
    return num / den


def kappa_o(model, grams, subset, units=None):
    """Relative observability ``q_o(I_S) / q_o(I - I_S)``."""
    units = default_units(model.n_state) if units is None else _check_units(units, model.n_state)
    return _ratio(model, grams.X_o, _validate_subset(subset, len(units)), units)


def kappa_c(model, grams, subset, units=None):
    """Relative susceptibility ``q_c(I_S) / q_c(I - I_S)`` with ``X_c^+``."""
    units = default_units(model.n_state) if units is None else _check_units(units, model.n_state)
    return _ratio(model, grams.X_c_pinv, _validate_subset(subset, len(units)), units)


@dataclass(frozen=True)
class SubsetScore:
    subset: tuple
    kappa_o: float
    kappa_c: float
    kappa: float
    lam: float
    normalization: tuple  # (mean_kappa_o, mean_kappa_c)

    def row(self):
        return [format_subset(self.subset), format(self.kappa_o, ".12g"),
                format(self.kappa_c, ".12g"), format(self.kappa, ".12g")]


def format_subset(subset):
    return ";".join(str(i) for i in subset)


def _ratio_or_nan(model, X, S, units):
    try:
        return _ratio(model, X, S, units)
    except DegenerateSubsetError:
        return float("nan")


def singleton_means(model, grams, units=None, need_c=True):
    """Means of ``kappa_o`` and ``kappa_c`` over all singleton subsets.

    With ``need_c=False`` an undefined controllability mean (no input
    excitation, ``X_c = 0``) is returned as NaN instead of raising.
    """
    units = default_units(model.n_state) if units is None else _check_units(units, model.n_state)
    if len(units) < 2:
        raise DegenerateSubsetError("need at least two units for singleton normalization")
    ko = [_ratio(model, grams.X_o, (i,), units) for i in range(len(units))]
    mo = float(np.mean(ko))
    if need_c:
        mc = float(np.mean([_ratio(model, grams.X_c_pinv, (i,), units) for i in range(len(units))]))
    else:
        mc = float(np.mean([_ratio_or_nan(model, grams.X_c_pinv, (i,), units) for i in range(len(units))]))
        mc = mc if mc > 0 else float("nan")
    if not (mo > 0 and (mc > 0 or not need_c)):
        raise DegenerateSubsetError(f"singleton means must be positive, got ({mo:.3g}, {mc:.3g})")
    return mo, mc


def kappa_combined(model, grams, subset, lam=1.0, norm=None, units=None):
    """``kappa_o / mean_o + lam * kappa_c / mean_c`` as a :class:`SubsetScore`.

    ``lam = 0`` scores by observability alone; ``kappa_c`` is then reported
    but allowed to be undefined (NaN).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    units = default_units(model.n_state) if units is None else _check_units(units, model.n_state)
    norm = singleton_means(model, grams, units, need_c=lam > 0) if norm is None else tuple(float(v) for v in norm)
    if not (norm[0] > 0 and (norm[1] > 0 or lam == 0)):
        raise ValueError("normalization means must be positive")
    S = _validate_subset(subset, len(units))
    ko = _ratio(model, grams.X_o, S, units)
    if lam == 0:
        kc = _ratio_or_nan(model, grams.X_c_pinv, S, units)
        return SubsetScore(S, ko, kc, ko / norm[0], 0.0, norm)
    kc = _ratio(model, grams.X_c_pinv, S, units)
    return SubsetScore(S, ko, kc, ko / norm[0] + lam * kc / norm[1], float(lam), norm)


class KappaEvaluator:
    """Memoized subset scores for one (model, Gramians, lambda, units) run.

    The singleton normalization is computed once at construction and frozen.
    """

    def __init__(self, model, grams, lam=1.0, units=None, norm=None):
        self.model = model
        self.grams = grams
        self.lam = float(lam)
        self.units = default_units(model.n_state) if units is None else _check_units(units, model.n_state)
        self.norm = singleton_means(model, grams, self.units, need_c=self.lam > 0) if norm is None else tuple(norm)
        self._cache = {}

    @property
    def n_units(self):
        return len(self.units)

    def score(self, subset):
        key = tuple(sorted(set(int(i) for i in subset)))
        hit = self._cache.get(key)
        if hit is None:
            hit = kappa_combined(self.model, self.grams, key, self.lam, self.norm, self.units)
            self._cache[key] = hit
        return hit

    def kappa(self, subset):
        return self.score(subset).kappa

    def singletons(self):
        return [self.score((i,)) for i in range(self.n_units)]


def all_proper_subsets(n):
    for r in range(1, n):
        yield from itertools.combinations(range(n), r)


def write_kappa_csv(path, scores):
    """κ report: one row per subset with ``subset, kappa_o, kappa_c, kappa``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["subset", "kappa_o", "kappa_c", "kappa"])
        for s in scores:
            wr.writerow(s.row())


def read_kappa_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(tuple(int(i) for i in r["subset"].split(";")), float(r["kappa_o"]),
             float(r["kappa_c"]), float(r["kappa"])) for r in rows]
