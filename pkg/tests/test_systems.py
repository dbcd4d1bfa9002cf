import math

import numpy as np
import pytest

from koopdec.dictionary import NeuralDictionary
from koopdec.errors import DimensionError, DivergenceError
from koopdec.koopman import DeepFitConfig, fit_deep
from koopdec.numerics import spectral_radius
from koopdec.systems import (
    InputSignal,
    SwingNetworkParams,
    TwoStateParams,
    integrate_swing,
    invariant_additive_map,
    load_swing_params,
    random_stable_lti,
    random_swing_dataset,
    simulate_swing,
    simulate_two_state,
    two_state_map,
)

# -- input signals ----------------------------------------------------------------


def test_signal_kinds():
    assert np.all(InputSignal().sequence(4, 2) == 0)
    np.testing.assert_array_equal(InputSignal.step(2, 1.5).sequence(4, 1)[:, 0], [0, 0, 1.5, 1.5])
    np.testing.assert_array_equal(InputSignal.impulse(1, [1.0, -1.0]).sequence(3, 2),
                                  [[0, 0], [1, -1], [0, 0]])
    rec = InputSignal.recorded([[1.0], [2.0]])
    np.testing.assert_array_equal(rec.sequence(3, 1)[:, 0], [1, 2, 0])


def test_signal_round_trip_and_errors():
    for s in (InputSignal(), InputSignal.step(3, [1.0, 2.0]), InputSignal.recorded(np.ones((2, 2)))):
        assert np.array_equal(InputSignal.from_dict(s.to_dict()).sequence(5, 2), s.sequence(5, 2))
    with pytest.raises(DimensionError):
        InputSignal.step(0, [1.0, 2.0]).value(0, 3)
    with pytest.raises(ValueError):
        InputSignal("ramp")


# -- two-state map --------------------------------------------------------------------

def test_two_state_fixed_point():
    d = simulate_two_state(TwoStateParams(), [0.0, 0.0], InputSignal(), 20)
    assert np.all(d.x_next == 0.0)


def test_two_state_hand_step():
    d = simulate_two_state(TwoStateParams(), [0.5, -0.1], InputSignal(), 1)
    np.testing.assert_allclose(d.x_next[0], [-0.096, math.sin(-1.0) - 0.088], rtol=1e-15, atol=1e-16)


def test_two_state_map_with_input():
    p = TwoStateParams()
    x = two_state_map(p, np.array([0.5, -0.1]), 1.0)
    np.testing.assert_allclose(x, [-0.096 + p.a3 * 0.5 * math.sin(-2.0),
                                   math.sin(-1.0) - 0.088 - 0.05], rtol=1e-15)


def test_two_state_bit_reproducible_and_locked():
    runs = [simulate_two_state(TwoStateParams(), [0.5, -0.1], InputSignal(), 500) for _ in range(2)]
    assert np.array_equal(runs[0].x_next, runs[1].x_next)
    np.testing.assert_allclose(runs[0].x_next[99], [-0.3027771663560314, 0.6397268314499718], rtol=1e-12)
    np.testing.assert_allclose(runs[0].x_next[249], [0.33118749826461, -0.3086692616327087], rtol=1e-12)
    assert np.max(np.abs(runs[0].x_next)) < 2.0


def test_two_state_unit_step_diverges_with_step_index():
    # the printed map is not bounded under a unit step applied at t = 250
    with pytest.raises(DivergenceError) as err:
        simulate_two_state(TwoStateParams(), [0.5, -0.1], InputSignal.step(250, 1.0), 500)
    assert 250 < err.value.step < 300


# -- swing dynamics ---------------------------------------------------------------------

def test_swing_uncoupled_equilibrium_is_fixed():
    g = 4
    w_eq = 0.3
    D = np.full(g, 0.5)
    p = SwingNetworkParams(M=np.full(g, 2.0), D=D, Pm=D * w_eq, V=np.ones(g),
                           G=np.zeros((g, g)), B=np.zeros((g, g)), reference=0)
    delta0 = np.array([0.0, 0.1, -0.2, 0.3])
    d, w = integrate_swing(p, delta0, np.full(g, w_eq), 10.0)
    np.testing.assert_allclose(w, w_eq, rtol=1e-13)
    np.testing.assert_allclose(d - d[0], delta0, atol=1e-12)
    state0 = p.relative_state(delta0, np.full(g, w_eq))
    ds = simulate_swing(p, state0, InputSignal(), 10)
    np.testing.assert_allclose(ds.x_next, np.tile(state0, (10, 1)), atol=1e-12)


def test_swing_shipped_equilibrium_is_fixed():
    p = load_swing_params()
    eq = p.equilibrium_state()
    ds = simulate_swing(p, eq, InputSignal(), 20)
    np.testing.assert_allclose(ds.x_next, np.tile(eq, (20, 1)), atol=1e-12)
    assert p.n_state == 18 and p.n_generators == 10


def _zero_crossing_period(t, y):
    s = np.flatnonzero(np.sign(y[:-1]) != np.sign(y[1:]))
    tc = t[s] - y[s] * (t[s + 1] - t[s]) / (y[s + 1] - y[s])
    return 2 * np.mean(np.diff(tc))


def test_two_generator_small_signal_frequency():
    M1, M2, V, B = 4.0, 6.0, 1.0, 0.8
    p = SwingNetworkParams(M=[M1, M2], D=[0.0, 0.0], Pm=[0.0, 0.0], V=[V, V],
                           G=np.zeros((2, 2)), B=[[0, B], [B, 0]], reference=1, sample_interval=0.1)
    ds = simulate_swing(p, np.array([0.02, 0.0]), InputSignal(), 1000)
    t = 0.1 * np.arange(1, 1001)
    period = _zero_crossing_period(t, ds.x_next[:, 0])
    expected = math.sqrt(V * V * B * (1 / M1 + 1 / M2))
    assert abs(2 * math.pi / period - expected) / expected < 0.05


def test_lossless_energy_drift():
    p = load_swing_params()
    q = SwingNetworkParams(p.M, np.zeros_like(p.D), p.Pm, p.V, np.zeros_like(p.G), p.B,
                           reference=p.reference, delta_eq=p.delta_eq)
    q.Pm = q.electrical_power(q.delta_eq)
    rng = np.random.default_rng(0)
    delta, omega = q.absolute_state(q.equilibrium_state() + rng.uniform(-0.5, 0.5, q.n_state))
    E0 = q.energy(delta, omega)
    d1, w1 = integrate_swing(q, delta, omega, 100.0, h=0.01)
    assert abs(q.energy(d1, w1) - E0) / abs(E0) < 1e-6
    assert np.max(np.abs(w1 - omega)) > 1e-3  # the state actually moved


def test_rk4_fourth_order_on_halving():
    p = load_swing_params()
    rng = np.random.default_rng(1)
    x0 = p.equilibrium_state() + rng.uniform(-0.5, 0.5, p.n_state)
    sols = [simulate_swing(p, x0, InputSignal(), 20, h=h).x_next for h in (0.02, 0.01, 0.005)]
    ratio = np.linalg.norm(sols[0] - sols[1]) / np.linalg.norm(sols[1] - sols[2])
    assert 12 <= ratio <= 20


def test_swing_parameter_validation():
    p = load_swing_params()
    with pytest.raises(ValueError):
        SwingNetworkParams.from_dict({**p.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        SwingNetworkParams([1.0, -1.0], [0, 0], [0, 0], [1, 1], np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        SwingNetworkParams([1.0, 1.0], [0, 0], [0, 0], [1, 1], np.zeros((2, 2)), [[0, 1], [2, 0]])
    with pytest.raises(DimensionError):
        simulate_swing(p, np.zeros(3), InputSignal(), 2)


def test_swing_divergence_guard():
    p = SwingNetworkParams([1.0, 1.0], [0, 0], [0, 0], [1, 1], np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(DivergenceError):
        simulate_swing(p, np.zeros(2), InputSignal.step(0, [0.0, 1e7]), 3)


def test_random_swing_dataset_structure(monkeypatch):
    monkeypatch.setenv("KOOPDEC_THREADS", "2")
    p = load_swing_params()
    d = random_swing_dataset(p, 6, 5, angle_spread=0.2, speed_spread=0.2,
                             disturbance_scale=0.05, seed=3)
    assert len(d) == 30 and d.n_state == 18 and d.n_input == 18
    np.testing.assert_array_equal(d.traj, np.repeat(np.arange(6), 5))
    again = random_swing_dataset(p, 6, 5, angle_spread=0.2, speed_spread=0.2,
                                 disturbance_scale=0.05, seed=3)
    assert np.array_equal(d.x_next, again.x_next)
    # each trajectory is reproduced by the single-trajectory simulator
    one = simulate_swing(p, d.x[5], InputSignal.recorded(d.w[5:10]), 5)
    np.testing.assert_allclose(one.x_next, d.x_next[5:10], rtol=1e-13, atol=1e-15)


def test_swing_dataset_accepted_by_deep_fit():
    p = load_swing_params()
    d = random_swing_dataset(p, 10, 16, angle_spread=0.2, speed_spread=0.2,
                             disturbance_scale=0.05, seed=0).split_by_trajectory(range(5))
    sd = NeuralDictionary.initialize(18, 4, width=10, depth=2, seed=0)
    ud = NeuralDictionary.initialize(18, 2, width=6, depth=2, seed=1)
    m = fit_deep(d, sd, ud, DeepFitConfig(epochs=2))
    assert np.isfinite(m.report["test_error"])


# -- random LTI --------------------------------------------------------------------------

def test_random_lti_radius_and_determinism():
    a = random_stable_lti(5, 2, 3, 0.5, 11)
    b = random_stable_lti(5, 2, 3, 0.5, 11)
    assert abs(spectral_radius(a.A) - 0.5) < 1e-8
    assert np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B) and np.array_equal(a.C, b.C)
    assert a.B.shape == (5, 2) and a.C.shape == (3, 5)
    with pytest.raises(ValueError):
        random_stable_lti(3, 1, 1, 1.0, 0)


def test_random_lti_simulation_closed_form():
    sys = random_stable_lti(4, 2, 1, 0.9, 5)
    rng = np.random.default_rng(0)
    x0, W = rng.standard_normal(4), rng.standard_normal((15, 2))
    X = sys.simulate(x0, W)
    A = sys.A
    for t in (0, 1, 7, 15):
        direct = np.linalg.matrix_power(A, t) @ x0 + sum(
            np.linalg.matrix_power(A, t - 1 - s) @ sys.B @ W[s] for s in range(t))
        np.testing.assert_allclose(X[t], direct, rtol=1e-10, atol=1e-12)


def test_invariant_additive_map_closes_on_quadratic():
    x = np.array([0.3, -0.2])
    y = invariant_additive_map(x, 0.1)
    np.testing.assert_allclose(y, [0.27, -0.1 + 0.4 * 0.09 + np.sin(0.2)])
    # x1^2 evolves linearly in the unforced case: (a x1)^2 = a^2 x1^2
    assert invariant_additive_map(x, 0.0)[0] ** 2 == pytest.approx(0.81 * x[0] ** 2)
