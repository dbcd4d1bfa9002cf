"""Invariant suites shared by ``koopdec verify`` and the test-suite.

Each ``*_metric`` function computes the raw quantity (worst residual,
worst deviation, ...) over a batch of random instances; each suite wraps
one of them with a threshold and returns a :class:`CheckResult`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .dictionary import IdentityDictionary, NeuralDictionary, PolynomialDictionary, parameter_gradient
from .gramians import all_proper_subsets, compute_gramians, kappa_c, kappa_o
from .koopman import KoopmanModel, Normalization, TrajectoryDataset, fit_edmd
from .partition import multiway_partition
from .systems import InputSignal, load_swing_params, random_stable_lti, simulate_swing


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.3e} (threshold {self.threshold:.3e}) {self.detail}".rstrip()


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- metrics --------------------------------------------------------------------------

def kronecker_lyapunov(A, Q):
    """Dense ``vec`` solution of ``X = A X A^T + Q`` (small ``n`` only)."""
    n = A.shape[0]
    return np.linalg.solve(np.eye(n * n) - np.kron(A, A), Q.reshape(-1)).reshape(n, n)


def lyapunov_metric(n_instances=100, seed=0, max_n=12):
    """Worst relative residual of the Smith solver on random stable ``A``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, max_n + 1))
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.1, 0.99) / max(numerics.spectral_radius(A), 1e-12)
        B = rng.standard_normal((n, n))
        Q = B @ B.T
        X = numerics.solve_discrete_lyapunov(A, Q)
        worst = max(worst, numerics.lyapunov_residual(A, Q, X))
    return worst


def lti_gramian_metric(n_systems=20, seed=0, rho=0.8):
    """Worst relative Frobenius gap between Koopman Gramians with identity
    dictionaries and the classical discrete Gramians."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_systems):
        n, m, p = (int(v) for v in rng.integers(1, 9, size=3))
        sys = random_stable_lti(n, m, p, rho, seed * 1000 + k)
        model = KoopmanModel(IdentityDictionary(n), IdentityDictionary(m), sys.A, sys.B, sys.C)
        g = compute_gramians(model)
        worst = max(worst, _rel(g.X_o, kronecker_lyapunov(sys.A.T, sys.C.T @ sys.C)),
                    _rel(g.X_c, kronecker_lyapunov(sys.A, sys.B @ sys.B.T)))
    return worst


def finite_difference_gradient(d, v, upstream, h=1e-6):
    theta = d.params.flatten()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fp = upstream @ d.with_params(d.params.with_flat(tp)).lift(v)
        fm = upstream @ d.with_params(d.params.with_flat(tm)).lift(v)
        g[i] = (fp - fm) / (2 * h)
    return g


def gradient_metric(n_configs=50, seed=0):
    """Worst relative (vector-norm) gap between backprop and central
    differences over random network shapes, activations and anchoring."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_configs):
        n = int(rng.integers(1, 5))
        d = NeuralDictionary.initialize(
            n, int(rng.integers(1, 6)), width=int(rng.integers(2, 8)), depth=int(rng.integers(1, 4)),
            activation=str(rng.choice(["elu", "tanh"])), seed=seed * 1000 + k,
            zero_anchored=bool(rng.integers(2)), linear_output=bool(rng.integers(2)))
        p = d.params
        d = d.with_params(p.with_flat(p.flatten() + 0.1 * rng.standard_normal(p.flatten().size)))
        v = rng.standard_normal(n)
        up = rng.standard_normal(d.lifted_dim)
        g = parameter_gradient(d, v, up).flatten()
        worst = max(worst, _rel(g, finite_difference_gradient(d, v, up)))
    return worst


def random_fitted_model(n, seed, m=2, n_traj=8, T=60):
    """Quadratic-dictionary EDMD model of ``x' = A tanh(x) + B w``."""
    sys = random_stable_lti(n, m, 1, 0.8, seed)
    rng = np.random.default_rng(seed + 7919)
    parts = []
    for k in range(n_traj):
        W = rng.standard_normal((T, m))
        xs = [rng.uniform(-1, 1, n)]
        for w in W:
            xs.append(sys.A @ np.tanh(xs[-1]) + sys.B @ w)
        parts.append(TrajectoryDataset.from_trajectory(np.array(xs), W, k))
    data = TrajectoryDataset.concatenate(parts)
    return fit_edmd(data, PolynomialDictionary(n, 2), IdentityDictionary(m), ridge=1e-6)


def complement_metric(sizes=(3, 5, 7, 10, 4, 6, 8, 9, 2, 10), seed=0):
    """Worst ``|kappa(S^c) kappa(S) - 1|`` over all proper subsets, both variants."""
    worst = 0.0
    for k, n in enumerate(sizes):
        model = random_fitted_model(n, seed * 100 + k)
        g = compute_gramians(model)
        full = set(range(n))
        for S in all_proper_subsets(n):
            if 2 * len(S) > n or (2 * len(S) == n and 0 not in S):
                continue  # each complementary pair once
            Sc = tuple(sorted(full - set(S)))
            for f in (kappa_o, kappa_c):
                worst = max(worst, abs(f(model, g, S) * f(model, g, Sc) - 1.0))
    return worst


def partition_validity_metric(n_instances=20, seed=0):
    """Fraction of random instances where the heuristic returns an invalid partition."""
    rng = np.random.default_rng(seed)
    bad = 0
    for k in range(n_instances):
        n, kk = int(rng.integers(4, 9)), int(rng.integers(2, 4))
        model = random_fitted_model(n, 500 + seed * 100 + k)
        p = multiway_partition(model, compute_gramians(model), kk)
        bad += not (p.is_valid(n) and len(p.clusters) == kk)
    return bad / n_instances


def normalization_metric(n_instances=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((10, n)) * rng.uniform(0.1, 10, n)
        s = Normalization.fit(x, rng.standard_normal((10, 1)), center=bool(rng.integers(2)))
        worst = max(worst, _rel(s.denormalize_x(s.normalize_x(x)), x))
    return worst


def rk4_order_ratio(steps=(0.02, 0.01, 0.005), T=20, seed=1):
    """Error ratio of successive step halvings on the shipped swing network (16 for RK4)."""
    p = load_swing_params()
    rng = np.random.default_rng(seed)
    x0 = p.equilibrium_state() + rng.uniform(-0.5, 0.5, p.n_state)
    sols = [simulate_swing(p, x0, InputSignal(), T, h=h).x_next for h in steps]
    return float(np.linalg.norm(sols[0] - sols[1]) / np.linalg.norm(sols[1] - sols[2]))


# -- suites -------------------------------------------------------------------------------

def _below(name, value, threshold, detail=""):
    return CheckResult(name, bool(value <= threshold), float(value), threshold, detail)


def suite_lyapunov():
    return _below("lyapunov residual", lyapunov_metric(20), 1e-10, "20 instances")


def suite_lti_gramians():
    return _below("lti gramian equivalence", lti_gramian_metric(5), 1e-8, "5 systems")


def suite_gradients():
    return _below("neural gradient vs finite differences", gradient_metric(10), 1e-4, "10 configs")


def suite_complement():
    return _below("kappa complement inversion", complement_metric((3, 5)), 1e-12, "2 models")


def suite_partition():
    return _below("partition validity (invalid fraction)", partition_validity_metric(10), 0.0, "10 instances")


def suite_normalization():
    return _below("normalization round trip", normalization_metric(), 1e-12)


def suite_rk4():
    r = rk4_order_ratio()
    return CheckResult("rk4 halving ratio", bool(12 <= r <= 20), r, 16.0, "accepted range [12, 20]")


SUITES = {
    "lyapunov": suite_lyapunov,
    "lti_gramians": suite_lti_gramians,
    "gradients": suite_gradients,
    "complement": suite_complement,
    "partition": suite_partition,
    "normalization": suite_normalization,
    "rk4": suite_rk4,
}


def run_suites(names=None):
    """Run the selected suites (all by default). A suite that raises counts as failed."""
    results = []
    for name in names or list(SUITES):
        try:
            results.append(SUITES[name]())
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            results.append(CheckResult(name, False, float("nan"), float("nan"),
                                       f"raised {type(exc).__name__}: {exc}"))
    return results

