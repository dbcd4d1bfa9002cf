"""Ground-truth simulators that produce :class:`TrajectoryDataset` values."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError
from .koopman import TrajectoryDataset
from .numerics import spectral_radius

DIVERGENCE_BOUND = 1e6


def worker_count():
    """Worker cap from ``KOOPDEC_THREADS`` (default: CPU count)."""
    env = os.environ.get("KOOPDEC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# -- input signals ---------------------------------------------------------------

@dataclass(frozen=True)
class InputSignal:
    """Exogenous input ``w_t`` evaluable at every integer ``t >= 0``.

    kind is one of ``zero``, ``step`` (``amplitude`` from ``t0`` on),
    ``impulse`` (``amplitude`` at ``t0`` only) or ``recorded`` (``samples``
    row per step, zero past the end).
    """

    kind: str = "zero"
    t0: int = 0
    amplitude: tuple = (1.0,)
    samples: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("zero", "step", "impulse", "recorded"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        object.__setattr__(self, "amplitude", tuple(np.atleast_1d(np.asarray(self.amplitude, dtype=float))))
        if self.kind == "recorded":
            if self.samples is None:
                raise ValueError("recorded signal needs samples")
            s = np.asarray(self.samples, dtype=float)
            object.__setattr__(self, "samples", s.reshape(len(s), -1))

    @classmethod
    def step(cls, t0, amplitude):
        return cls("step", t0, amplitude)

    @classmethod
    def impulse(cls, t0, amplitude):
        return cls("impulse", t0, amplitude)

    @classmethod
    def recorded(cls, samples):
        return cls("recorded", samples=samples)

    def value(self, t, m):
        if self.kind == "zero":
            return np.zeros(m)
        if self.kind == "recorded":
            if self.samples.shape[1] != m:
                raise DimensionError(f"recorded signal has {self.samples.shape[1]} channels, need {m}")
            return self.samples[t].copy() if t < len(self.samples) else np.zeros(m)
        amp = np.asarray(self.amplitude)
        amp = np.full(m, amp[0]) if amp.size == 1 else amp
        if amp.size != m:
            raise DimensionError(f"signal amplitude has {amp.size} channels, need {m}")
        on = t >= self.t0 if self.kind == "step" else t == self.t0
        return amp.copy() if on else np.zeros(m)

    def sequence(self, T, m):
        return np.array([self.value(t, m) for t in range(T)]).reshape(T, m)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("step", "impulse"):
            d.update(t0=self.t0, amplitude=list(self.amplitude))
        if self.kind == "recorded":
            d["samples"] = self.samples.tolist()
        return d

    @classmethod
    def from_dict(cls, obj):
        kind = obj.get("kind", "zero")
        if kind == "recorded":
            return cls.recorded(obj["samples"])
        return cls(kind, int(obj.get("t0", 0)), obj.get("amplitude", (1.0,)))


# -- two-state example map ------------------------------------------------------

@dataclass(frozen=True)
class TwoStateParams:
    a1: float = -0.96
    a2: float = 0.88
    a3: float = -0.95
    omega: float = -2.0


def two_state_map(p, x, u):
    """x1' = -a1 x2 + a3 x1 sin(omega u);  x2' = sin(omega x1) + a2 x2 + x1 x2 u."""
    x1, x2 = x
    return np.array([
        -p.a1 * x2 + p.a3 * x1 * np.sin(p.omega * u),
        np.sin(p.omega * x1) + p.a2 * x2 + x1 * x2 * u,
    ])


def simulate_two_state(params, x0, signal, T):
    """Iterate the discrete map ``T`` times; returns ``T`` snapshots."""
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(x0, dtype=float).reshape(2)
    states = np.empty((T + 1, 2))
    states[0] = x
    inputs = signal.sequence(T, 1)
    for t in range(T):
        x = two_state_map(params, x, inputs[t, 0])
        if not np.all(np.abs(x) <= DIVERGENCE_BOUND):
            raise DivergenceError(f"two-state trajectory diverged at step {t + 1}", step=t + 1)
        states[t + 1] = x
    return TrajectoryDataset.from_trajectory(states, inputs)


def additive_two_state_map(p, x, w):
    """State-input separable companion of the two-state example map:
    ``x' = f(x) + g(w)`` with ``f`` the unforced map."""
    x1, x2 = x
    return np.array([
        -p.a1 * x2 + p.a3 * np.sin(p.omega * w),
        np.sin(p.omega * x1) + p.a2 * x2 + w,
    ])


def invariant_additive_map(x, w, a=0.9, b=0.5, c=0.4, d=2.0):
    """Additive-input map whose unforced part leaves ``span{x1, x2, x1^2}``
    invariant: ``x1' = a x1``, ``x2' = b x2 + c x1^2 + sin(d w)``."""
    return np.array([a * x[0], b * x[1] + c * x[0] ** 2 + np.sin(d * w)])


def simulate_map(f, x0, inputs):
    """Iterate ``x_{t+1} = f(x_t, w_t)`` over the given input rows."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    x = np.asarray(x0, dtype=float)
    states = [x]
    for t, w in enumerate(inputs):
        x = np.asarray(f(x, w if w.size > 1 else w[0]), dtype=float)
        if not np.all(np.abs(x) <= DIVERGENCE_BOUND):
            raise DivergenceError(f"trajectory diverged at step {t + 1}", step=t + 1)
        states.append(x)
    return TrajectoryDataset.from_trajectory(np.array(states), inputs)


# -- swing dynamics ----------------------------------------------------------------

@dataclass
class SwingNetworkParams:
    """Classical multi-machine swing model.

    Angles are in rad, speeds in rad/s relative to synchronous speed,
    powers in p.u. The reference generator is simulated but excluded from
    the state; states are ``(delta_i - delta_ref, omega_i - omega_ref)``
    for the other generators, angles first.
    """

    M: np.ndarray
    D: np.ndarray
    Pm: np.ndarray
    V: np.ndarray
    G: np.ndarray
    B: np.ndarray
    reference: int = -1
    h: float = 0.01
    sample_interval: float = 1.0
    delta_eq: np.ndarray = None
    name: str = "swing"

    def __post_init__(self):
        for k in ("M", "D", "Pm", "V"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=float).reshape(-1))
        self.G = np.asarray(self.G, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        g = self.n_generators
        for k in ("M", "D", "Pm", "V"):
            if getattr(self, k).shape != (g,):
                raise DimensionError(f"{k} must have {g} entries")
        if self.G.shape != (g, g) or self.B.shape != (g, g):
            raise DimensionError("G and B must be square over generators")
        if np.any(self.M <= 0):
            raise ValueError("inertias must be positive")
        if not (np.allclose(self.G, self.G.T) and np.allclose(self.B, self.B.T)):
            raise ValueError("G and B must be symmetric")
        if self.h <= 0 or self.sample_interval <= 0:
            raise ValueError("step sizes must be positive")
        self.reference = int(self.reference) % g
        self.delta_eq = np.zeros(g) if self.delta_eq is None else np.asarray(self.delta_eq, dtype=float)

    @property
    def n_generators(self):
        return len(self.M)

    @property
    def others(self):
        return np.array([i for i in range(self.n_generators) if i != self.reference])

    @property
    def n_state(self):
        return 2 * (self.n_generators - 1)

    @property
    def n_input(self):
        return 2 * (self.n_generators - 1)

    def electrical_power(self, delta):
        """``P_e,i = V_i sum_j V_j (G_ij cos(d_i - d_j) + B_ij sin(d_i - d_j))``;
        ``delta`` may carry leading batch axes."""
        d = delta[..., :, None] - delta[..., None, :]
        return self.V * np.sum(self.V * (self.G * np.cos(d) + self.B * np.sin(d)), axis=-1)

    def rhs(self, delta, omega, u_delta, u_omega):
        ddelta = omega + u_delta
        domega = (-self.D * omega + self.Pm - self.electrical_power(delta)) / self.M + u_omega
        return ddelta, domega

    def energy(self, delta, omega):
        """First integral for the lossless, undamped case (G = 0, D = 0)."""
        d = delta[:, None] - delta[None, :]
        coupling = self.V[:, None] * self.V[None, :] * self.B * np.cos(d)
        return (0.5 * np.sum(self.M * omega**2) - np.sum(self.Pm * delta)
                - 0.5 * (np.sum(coupling) - np.trace(coupling)))

    def relative_state(self, delta, omega):
        r, o = self.reference, self.others
        return np.concatenate([delta[o] - delta[r], omega[o] - omega[r]])

    def absolute_state(self, rel):
        """Absolute (delta, omega) with the reference at its equilibrium angle and zero speed."""
        g1 = self.n_generators - 1
        delta = np.full(self.n_generators, self.delta_eq[self.reference])
        omega = np.zeros(self.n_generators)
        delta[self.others] = rel[:g1] + delta[self.reference]
        omega[self.others] = rel[g1:]
        return delta, omega

    def equilibrium_state(self):
        return self.relative_state(self.delta_eq, np.zeros(self.n_generators))

    def to_dict(self):
        return {"name": self.name, "M": self.M.tolist(), "D": self.D.tolist(),
                "Pm": self.Pm.tolist(), "V": self.V.tolist(), "G": self.G.tolist(),
                "B": self.B.tolist(), "reference": self.reference, "h": self.h,
                "sample_interval": self.sample_interval, "delta_eq": self.delta_eq.tolist()}

    @classmethod
    def from_dict(cls, obj):
        keys = {"M", "D", "Pm", "V", "G", "B", "reference", "h", "sample_interval", "delta_eq", "name"}
        unknown = set(obj) - keys
        if unknown:
            raise ValueError(f"unknown swing parameter keys {sorted(unknown)}")
        return cls(**obj)


def load_swing_params(path=None):
    """Load a swing parameter file; default is the shipped 9-generator network."""
    if path is None:
        text = resources.files("koopdec").joinpath("data/swing9.json").read_text()
    else:
        text = Path(path).read_text()
    return SwingNetworkParams.from_dict(json.loads(text))


def _rk4(params, delta, omega, ud, uo, h, steps):
    """Classical RK4; works on single states or on stacked rows."""
    f = params.rhs
    for _ in range(steps):
        k1d, k1o = f(delta, omega, ud, uo)
        k2d, k2o = f(delta + 0.5 * h * k1d, omega + 0.5 * h * k1o, ud, uo)
        k3d, k3o = f(delta + 0.5 * h * k2d, omega + 0.5 * h * k2o, ud, uo)
        k4d, k4o = f(delta + h * k3d, omega + h * k3o, ud, uo)
        delta = delta + h / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        omega = omega + h / 6.0 * (k1o + 2 * k2o + 2 * k3o + k4o)
    return delta, omega


def integrate_swing(params, delta, omega, duration, h=None):
    """Advance absolute angles and speeds by ``duration`` seconds with RK4 and
    no disturbance. ``duration`` must be a multiple of ``h``."""
    h = params.h if h is None else h
    steps = int(round(duration / h))
    if abs(steps * h - duration) > 1e-9 * max(duration, h):
        raise ValueError("duration must be an integer multiple of h")
    zero = np.zeros(params.n_generators)
    return _rk4(params, np.asarray(delta, dtype=float), np.asarray(omega, dtype=float), zero, zero, h, steps)


def _simulate_batch(params, states0, inputs, h):
    """RK4 over a batch: ``states0`` (N, n_state), ``inputs`` (N, T, n_input).
    Returns relative states (N, T+1, n_state)."""
    steps = int(round(params.sample_interval / h))
    if steps < 1 or abs(steps * h - params.sample_interval) > 1e-9 * params.sample_interval:
        raise ValueError("sample_interval must be an integer multiple of h")
    N, T = inputs.shape[0], inputs.shape[1]
    g, g1, o, r = params.n_generators, params.n_generators - 1, params.others, params.reference
    delta = np.empty((N, g))
    omega = np.zeros((N, g))
    delta[:, r] = params.delta_eq[r]
    delta[:, o] = states0[:, :g1] + params.delta_eq[r]
    omega[:, o] = states0[:, g1:]
    out = np.empty((N, T + 1, params.n_state))
    out[:, 0] = states0
    ud = np.zeros((N, g))
    uo = np.zeros((N, g))
    for t in range(T):
        ud[:, o], uo[:, o] = inputs[:, t, :g1], inputs[:, t, g1:]
        delta, omega = _rk4(params, delta, omega, ud, uo, h, steps)
        rel = np.hstack([delta[:, o] - delta[:, [r]], omega[:, o] - omega[:, [r]]])
        bad = ~np.all(np.abs(rel) <= DIVERGENCE_BOUND, axis=1)
        if np.any(bad):
            raise DivergenceError(f"swing trajectory {int(np.flatnonzero(bad)[0])} diverged at sample {t + 1}",
                                  step=t + 1)
        out[:, t + 1] = rel
    return out


def simulate_swing(params, state0, disturbance, T, h=None):
    """Integrate the swing ODE with RK4 and sample every ``sample_interval``.

    ``state0`` is a relative state (angles then speeds of the non-reference
    generators). The disturbance has ``2 (g - 1)`` channels, additive on
    the angle and speed derivatives of the non-reference generators, held
    constant over each sampling interval. Returns ``T`` snapshots.
    """
    h = params.h if h is None else h
    state0 = np.asarray(state0, dtype=float)
    if state0.shape != (params.n_state,):
        raise DimensionError(f"state0 must have {params.n_state} entries")
    inputs = disturbance.sequence(T, params.n_input)
    states = _simulate_batch(params, state0[None], inputs[None], h)[0]
    return TrajectoryDataset.from_trajectory(states, inputs)


def random_swing_dataset(params, n_traj, T, angle_spread=0.5, speed_spread=0.5,
                         disturbance_scale=0.2, disturbance_prob=0.2, seed=0):
    """Trajectories from random initial conditions around equilibrium with
    sparse random pulse disturbances (so that input effects are identifiable).

    Trajectories are integrated as one vectorized batch, split into chunks
    across ``worker_count()`` threads; results are ordered by index.
    """
    rng = np.random.default_rng(seed)
    g1 = params.n_generators - 1
    eq = params.equilibrium_state()
    x0 = eq + np.hstack([rng.uniform(-angle_spread, angle_spread, (n_traj, g1)),
                         rng.uniform(-speed_spread, speed_spread, (n_traj, g1))])
    pulses = rng.uniform(-disturbance_scale, disturbance_scale, (n_traj, T, params.n_input))
    pulses *= rng.random((n_traj, T, params.n_input)) < disturbance_prob
    chunks = np.array_split(np.arange(n_traj), min(worker_count(), max(1, n_traj // 25)))
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(lambda c: _simulate_batch(params, x0[c], pulses[c], params.h), chunks))
    states = np.concatenate(parts)
    return TrajectoryDataset.concatenate(
        [TrajectoryDataset.from_trajectory(states[k], pulses[k], k) for k in range(n_traj)])


# -- random LTI oracle factory ------------------------------------------------------

@dataclass(frozen=True)
class LTISystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def simulate(self, x0, w_seq):
        """States ``x_0..x_T`` of ``x_{t+1} = A x_t + B w_t``."""
        w_seq = np.atleast_2d(np.asarray(w_seq, dtype=float))
        xs = [np.asarray(x0, dtype=float)]
        for w in w_seq:
            xs.append(self.A @ xs[-1] + self.B @ w)
        return np.array(xs)

    def dataset(self, x0, w_seq):
        return TrajectoryDataset.from_trajectory(self.simulate(x0, w_seq), w_seq)


def random_stable_lti(n, m, p, rho_target, seed):
    """Random ``(A, B, C)`` with ``spectral_radius(A) == rho_target``."""
    if not 0 < rho_target < 1:
        raise ValueError("rho_target must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A = A * (rho_target / spectral_radius(A))
    return LTISystem(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)))
