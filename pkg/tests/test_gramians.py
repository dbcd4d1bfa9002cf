import itertools
import warnings

import numpy as np
import pytest
from helpers import identity_model, random_fitted_model

from koopdec import numerics
from koopdec.dictionary import IdentityDictionary, PolynomialDictionary
from koopdec.errors import DegenerateSubsetError, UnreachableTargetWarning
from koopdec.gramians import (
    KappaEvaluator,
    KoopmanGramians,
    all_proper_subsets,
    compute_gramians,
    finite_horizon_gramian,
    indicator,
    kappa_c,
    kappa_combined,
    kappa_o,
    min_input_energy,
    output_energy,
    read_kappa_csv,
    singleton_means,
    write_kappa_csv,
)
from koopdec.koopman import KoopmanModel, fit_edmd, fit_output_map
from koopdec.systems import InputSignal, TwoStateParams, random_stable_lti, simulate_two_state


def kron_lyapunov(A, Q):
    # vec(X) = (I - A (x) A)^{-1} vec(Q) solves X = A X A^T + Q
    n = A.shape[0]
    x = np.linalg.solve(np.eye(n * n) - np.kron(A, A), Q.reshape(-1))
    return x.reshape(n, n)


def lti_model(seed, n=None):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9)) if n is None else n
    m, p = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    sys = random_stable_lti(n, m, p, 0.8, seed)
    d = sys.dataset(rng.standard_normal(n), rng.standard_normal((6 * (n + m), m)))
    model = fit_edmd(d, IdentityDictionary(n), IdentityDictionary(m), ridge=0.0)
    model = model.with_output_map(fit_output_map(d, model, d.x @ sys.C.T))
    return sys, model


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# -- Gramians ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_lti_gramians_match_classical(seed):
    sys, model = lti_model(seed)
    g = compute_gramians(model)
    assert g.method == "lyapunov_exact"
    assert rel(g.X_o, kron_lyapunov(sys.A.T, sys.C.T @ sys.C)) <= 1e-8
    assert rel(g.X_c, kron_lyapunov(sys.A, sys.B @ sys.B.T)) <= 1e-8


def test_zero_dynamics_gramians_are_single_terms():
    rng = np.random.default_rng(0)
    K_u, W_h = rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
    g = compute_gramians(identity_model(3, K_u=K_u, W_h=W_h))
    np.testing.assert_allclose(g.X_o, W_h.T @ W_h, atol=1e-14)
    np.testing.assert_allclose(g.X_c, K_u @ K_u.T, atol=1e-14)


def test_unstable_model_uses_finite_horizon_sum():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 3))
    A *= 1.01 / numerics.spectral_radius(A)
    K_u, W_h = rng.standard_normal((3, 1)), rng.standard_normal((1, 3))
    g = compute_gramians(identity_model(3, A, K_u, W_h))
    assert g.method == "finite_horizon" and g.horizon == 200
    oracle = sum(np.linalg.matrix_power(A.T, t) @ W_h.T @ W_h @ np.linalg.matrix_power(A, t) for t in range(200))
    assert rel(g.X_o, oracle) < 1e-10


def test_finite_horizon_monotone_in_psd_order():
    _, model = lti_model(3, n=5)
    prev = None
    for T in (1, 2, 5, 10, 50, 200):
        g = compute_gramians(model, horizon_override=T)
        if prev is not None:
            for a, b in ((g.X_o, prev.X_o), (g.X_c, prev.X_c)):
                assert np.min(np.linalg.eigvalsh(a - b)) >= -1e-12 * max(1.0, np.linalg.norm(a))
        prev = g


def test_finite_horizon_gramian_definition():
    A = 0.5 * np.eye(2)
    np.testing.assert_allclose(finite_horizon_gramian(A, np.eye(2), 3), (1 + 0.25 + 0.0625) * np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_gramian_invariants_on_fitted_models(seed):
    model = random_fitted_model(4, seed)
    g = compute_gramians(model)
    for X in (g.X_o, g.X_c):
        assert np.linalg.norm(X - X.T) <= 1e-10 * max(1.0, np.linalg.norm(X))
        assert np.min(np.linalg.eigvalsh(X)) >= -1e-10 * np.linalg.norm(X)
    if g.method == "lyapunov_exact":
        assert g.spectral_radius_Kx < 1
        assert numerics.lyapunov_residual(model.K_x.T, model.W_h.T @ model.W_h, g.X_o) <= 1e-10
        assert numerics.lyapunov_residual(model.K_x, model.K_u @ model.K_u.T, g.X_c) <= 1e-10
    A, P = g.X_c, g.X_c_pinv
    s = max(1.0, np.linalg.norm(A) * np.linalg.norm(P))
    assert np.linalg.norm(A @ P @ A - A) <= 1e-8 * s * np.linalg.norm(A)
    assert np.linalg.norm(P @ A @ P - P) <= 1e-8 * s * np.linalg.norm(P)


def test_gramian_save_load(tmp_path):
    g = compute_gramians(random_fitted_model(3, 0))
    g.save(tmp_path)
    g2 = KoopmanGramians.load(tmp_path)
    assert g2.method == g.method
    np.testing.assert_allclose(g2.X_o, g.X_o, rtol=1e-11, atol=1e-14 * np.abs(g.X_o).max())


# -- energies ------------------------------------------------------------------------------

def test_output_energy_matches_simulation():
    sys, model = lti_model(4, n=4)
    g = compute_gramians(model)
    x0 = np.array([1.0, -0.5, 0.2, 0.3])
    x, total = x0.copy(), 0.0
    for _ in range(500):
        total += np.sum((sys.C @ x) ** 2)
        x = sys.A @ x
    assert output_energy(model, g, x0) == pytest.approx(total, rel=1e-6)
    assert output_energy(model, g, 2 * x0) == pytest.approx(4 * output_energy(model, g, x0), rel=1e-12)


def test_output_energy_unobservable_direction():
    model = identity_model(2, 0.5 * np.eye(2), np.eye(2), [[1.0, 0.0]])
    g = compute_gramians(model)
    assert output_energy(model, g, [0.0, 3.0]) == 0.0


def test_min_input_energy_classical():
    sys, model = lti_model(5, n=3)
    g = compute_gramians(model)
    x0 = np.array([0.3, -1.0, 0.4])
    Wc = kron_lyapunov(sys.A, sys.B @ sys.B.T)
    assert min_input_energy(model, g, x0) == pytest.approx(x0 @ np.linalg.solve(Wc, x0), rel=1e-8)
    assert min_input_energy(model, g, np.zeros(3)) == 0.0


def test_min_input_energy_flags_unreachable():
    model = identity_model(2, 0.5 * np.eye(2), np.zeros((2, 1)))
    g = compute_gramians(model)
    with pytest.warns(UnreachableTargetWarning):
        min_input_energy(model, g, [1.0, 0.0])


# -- kappa ---------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_kappa_identity_closed_form(n):
    model = identity_model(n)
    g = compute_gramians(model)
    for S in all_proper_subsets(n):
        expected = len(S) / (n - len(S))
        assert kappa_o(model, g, S) == pytest.approx(expected, rel=1e-14)
        assert kappa_c(model, g, S) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("n,seed", [(3, 0), (5, 1), (7, 2), (10, 3)])
def test_complement_inversion_all_subsets(n, seed):
    model = random_fitted_model(n, seed)
    g = compute_gramians(model)
    for S in all_proper_subsets(n):
        if 0 not in S:
            continue
        C = tuple(i for i in range(n) if i not in S)
        assert abs(kappa_o(model, g, S) * kappa_o(model, g, C) - 1) <= 1e-12
        assert abs(kappa_c(model, g, S) * kappa_c(model, g, C) - 1) <= 1e-12


def test_kappa_against_serialized_quadratic_forms(tmp_path):
    d = simulate_two_state(TwoStateParams(), [0.5, -0.1], InputSignal(), 500).split_by_time(250)
    model = fit_edmd(d, PolynomialDictionary(2, 3), IdentityDictionary(1))
    g = compute_gramians(model)
    g.save(tmp_path)
    X = numerics.read_matrix_csv(tmp_path / "X_o.csv")
    sd = PolynomialDictionary(2, 3)
    a, b = sd.lift([1.0, 0.0]), sd.lift([0.0, 1.0])
    assert kappa_o(model, g, {0}) == pytest.approx((a @ X @ a) / (b @ X @ b), rel=1e-9)
    assert kappa_o(model, g, {1}) == pytest.approx((b @ X @ b) / (a @ X @ a), rel=1e-9)


def test_kappa_c_is_ridge_limit_on_singular_gramian():
    # rank-3 X_c in a 5-dim lift whose range contains both lifted indicators
    sd = PolynomialDictionary(2, 2)
    rng = np.random.default_rng(2)
    U = np.column_stack([sd.lift([1.0, 0.0]), sd.lift([0.0, 1.0]), rng.standard_normal(5)])
    Xc = U @ np.diag([2.0, 0.5, 1.0]) @ U.T
    model = KoopmanModel(sd, IdentityDictionary(1), np.zeros((5, 5)), np.zeros((5, 1)), np.eye(5))
    g = KoopmanGramians(np.eye(5), Xc, numerics.pseudo_inverse(Xc, 1e-10), "lyapunov_exact", 0.0)
    value = kappa_c(model, g, {0})
    a, b = sd.lift([1.0, 0.0]), sd.lift([0.0, 1.0])
    errs = []
    for eps in (1e-6, 1e-8):
        R = np.linalg.inv(Xc + eps * np.eye(5))
        errs.append(abs((a @ R @ a) / (b @ R @ b) - value) / value)
    assert errs[1] < errs[0] and errs[1] < 1e-6


def test_kappa_degenerate_cases():
    model = identity_model(3)
    g = compute_gramians(model)
    for S in ((), (0, 1, 2)):
        with pytest.raises(DegenerateSubsetError, match="undefined"):
            kappa_o(model, g, S)
    zero = KoopmanGramians(np.zeros((3, 3)), np.eye(3), np.eye(3), "lyapunov_exact", 0.0)
    with pytest.raises(DegenerateSubsetError, match="denominator"):
        kappa_o(model, zero, {0})


def test_kappa_combined_closed_form_and_lambda():
    model = identity_model(4)
    g = compute_gramians(model)
    norm = singleton_means(model, g)
    assert norm == pytest.approx((1 / 3, 1 / 3))
    s = kappa_combined(model, g, {0}, lam=1.0, norm=norm)
    assert (s.kappa_o, s.kappa_c, s.kappa) == pytest.approx((1 / 3, 1 / 3, 2.0))
    assert kappa_combined(model, g, {0}, lam=0.0, norm=norm).kappa == pytest.approx(1.0)


def test_observability_only_scores_without_input_excitation():
    # K_u = 0: X_c vanishes, so kappa_c is undefined; lambda = 0 still works
    model = identity_model(3, K_x=0.5 * np.eye(3), K_u=np.zeros((3, 1)))
    g = compute_gramians(model)
    with pytest.raises(DegenerateSubsetError):
        singleton_means(model, g)
    with pytest.raises(DegenerateSubsetError):
        KappaEvaluator(model, g, lam=1.0)
    ev = KappaEvaluator(model, g, lam=0.0)
    assert np.isnan(ev.norm[1])
    s = ev.score((0,))
    assert np.isnan(s.kappa_c) and s.kappa == pytest.approx(1.0)
    assert ev.kappa((0, 1)) * ev.kappa((2,)) == pytest.approx(1.0 / ev.norm[0] ** 2)


def test_kappa_combined_linear_in_lambda():
    model = random_fitted_model(5, 4)
    g = compute_gramians(model)
    norm = singleton_means(model, g)
    S = (0, 3)
    s1 = kappa_combined(model, g, S, 0.5, norm)
    s2 = kappa_combined(model, g, S, 2.0, norm)
    assert s2.kappa - s1.kappa == pytest.approx(1.5 * s1.kappa_c / norm[1], rel=1e-12)
    assert s1.kappa == pytest.approx(s1.kappa_o / norm[0] + 0.5 * s1.kappa_c / norm[1], rel=1e-14)


def test_units_switch_groups_together():
    v = indicator(4, (1,), units=[(0, 2), (1, 3)])
    np.testing.assert_array_equal(v, [0, 1, 0, 1])
    model = random_fitted_model(4, 5)
    g = compute_gramians(model)
    units = [(0, 2), (1, 3)]
    assert kappa_o(model, g, (0,), units) == pytest.approx(kappa_o(model, g, (0, 2)), rel=1e-14)


def test_evaluator_caches_and_agrees():
    model = random_fitted_model(4, 6)
    g = compute_gramians(model)
    ev = KappaEvaluator(model, g, lam=1.0)
    a = ev.score({2, 0})
    assert ev.score((0, 2)) is a
    assert a.kappa == pytest.approx(kappa_combined(model, g, (0, 2), 1.0).kappa, rel=1e-14)
    assert np.mean([s.kappa_o for s in ev.singletons()]) / ev.norm[0] == pytest.approx(1.0)


def test_kappa_csv_round_trip(tmp_path):
    model = random_fitted_model(3, 7)
    g = compute_gramians(model)
    ev = KappaEvaluator(model, g)
    scores = [ev.score(S) for S in all_proper_subsets(3)]
    write_kappa_csv(tmp_path / "k.csv", scores)
    rows = read_kappa_csv(tmp_path / "k.csv")
    assert [r[0] for r in rows] == [s.subset for s in scores]
    np.testing.assert_allclose([r[3] for r in rows], [s.kappa for s in scores], rtol=1e-11)
