"""Affine Koopman control models.

A fitted model advances lifted states linearly,

    psi_x(x_{t+1}) = K_x psi_x(x_t) + K_u psi_u(w_t) [+ K_xw psi_xw(x_t, w_t)],

and reads outputs through ``y = W_h psi_x(x)``. Fitting is either the
closed-form EDMD least-squares solve on fixed dictionaries or deep DMD,
where neural dictionaries are trained by Adam with the Koopman matrices
refreshed in closed form every epoch.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .dictionary import NeuralDictionary, ObservableDictionary, dictionary_from_dict
from .errors import (
    DimensionError,
    InsufficientDataError,
    NonFiniteError,
    TrainingDivergedWarning,
)

DEFAULT_RIDGE = 1e-8


# -- data ------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalization:
    """Per-coordinate affine map ``x_model = (x_raw - x_offset) / x_factor``.

    Inputs are only rescaled (no offset) so that a zero disturbance stays
    zero in model coordinates.
    """

    x_offset: np.ndarray
    x_factor: np.ndarray
    w_factor: np.ndarray

    def __post_init__(self):
        for name in ("x_offset", "x_factor", "w_factor"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if np.any(self.x_factor <= 0) or np.any(self.w_factor <= 0):
            raise ValueError("normalization factors must be positive")
        if self.x_offset.shape != self.x_factor.shape:
            raise DimensionError("offset and factor lengths differ")

    @classmethod
    def identity(cls, n, m):
        return cls(np.zeros(n), np.ones(n), np.ones(m))

    @classmethod
    def fit(cls, x, w, center=False):
        """Scale each coordinate by its maximum magnitude (or std about the
        mean when ``center``); constant coordinates keep factor 1."""
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        if center:
            off = x.mean(axis=0)
            fx = x.std(axis=0)
        else:
            off = np.zeros(x.shape[1])
            fx = np.abs(x).max(axis=0)
        fw = np.abs(w).max(axis=0) if len(w) else np.ones(w.shape[1])
        fx = np.where(fx > 0, fx, 1.0)
        fw = np.where(fw > 0, fw, 1.0)
        return cls(off, fx, fw)

    def normalize_x(self, x):
        return (np.asarray(x, dtype=float) - self.x_offset) / self.x_factor

    def denormalize_x(self, x):
        return np.asarray(x, dtype=float) * self.x_factor + self.x_offset

    def normalize_w(self, w):
        return np.asarray(w, dtype=float) / self.w_factor

    def denormalize_w(self, w):
        return np.asarray(w, dtype=float) * self.w_factor

    def is_identity(self):
        return (np.all(self.x_offset == 0) and np.all(self.x_factor == 1)
                and np.all(self.w_factor == 1))

    def to_dict(self):
        return {"x_offset": self.x_offset.tolist(), "x_factor": self.x_factor.tolist(),
                "w_factor": self.w_factor.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["x_offset"], obj["x_factor"], obj["w_factor"])


@dataclass
class TrajectoryDataset:
    """Snapshot triples ``(x_t, w_t, x_{t+1})`` with a train/test split.

    ``traj`` and ``time`` record which trajectory and step each snapshot
    came from. ``scale`` describes the coordinates the arrays are in
    (identity for raw data).
    """

    x: np.ndarray
    w: np.ndarray
    x_next: np.ndarray
    train: np.ndarray = None
    test: np.ndarray = None
    traj: np.ndarray = None
    time: np.ndarray = None
    scale: Normalization = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        self.w = np.asarray(self.w, dtype=float).reshape(len(self.x), -1)
        N = len(self.x)
        if self.x_next.shape != self.x.shape:
            raise DimensionError(f"x {self.x.shape} and x_next {self.x_next.shape} differ")
        for name in ("x", "w", "x_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"dataset field {name} contains NaN or Inf")
        self.train = np.arange(N) if self.train is None else np.asarray(self.train, dtype=int)
        self.test = np.arange(0) if self.test is None else np.asarray(self.test, dtype=int)
        if np.intersect1d(self.train, self.test).size:
            raise ValueError("train and test index sets overlap")
        self.traj = np.zeros(N, dtype=int) if self.traj is None else np.asarray(self.traj, dtype=int)
        self.time = np.arange(N) if self.time is None else np.asarray(self.time, dtype=int)
        if self.scale is None:
            self.scale = Normalization.identity(self.n_state, self.n_input)

    def __len__(self):
        return len(self.x)

    @property
    def n_state(self):
        return self.x.shape[1]

    @property
    def n_input(self):
        return self.w.shape[1]

    @classmethod
    def from_trajectory(cls, states, inputs, traj_id=0):
        """Build snapshots from ``T+1`` states and the ``T`` inputs between them."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        T = len(states) - 1
        inputs = np.asarray(inputs, dtype=float).reshape(T, -1) if T > 0 else np.zeros((0, 1))
        if len(inputs) != T:
            raise DimensionError(f"{len(states)} states need {T} inputs, got {len(inputs)}")
        return cls(states[:-1], inputs, states[1:], traj=np.full(T, traj_id), time=np.arange(T))

    @classmethod
    def concatenate(cls, datasets):
        """Stack datasets, renumbering trajectories consecutively; splits are
        concatenated too."""
        xs, ws, xns, trs, tes, tjs, tms = [], [], [], [], [], [], []
        offset, tj_offset = 0, 0
        for d in datasets:
            xs.append(d.x), ws.append(d.w), xns.append(d.x_next)
            trs.append(d.train + offset), tes.append(d.test + offset)
            ids, local = np.unique(d.traj, return_inverse=True)
            tjs.append(local.reshape(-1) + tj_offset), tms.append(d.time)
            offset += len(d)
            tj_offset += len(ids)
        return cls(np.vstack(xs), np.vstack(ws), np.vstack(xns), np.concatenate(trs),
                   np.concatenate(tes), np.concatenate(tjs), np.concatenate(tms), datasets[0].scale)

    def with_split(self, train, test):
        return dataclasses.replace(self, train=np.asarray(train, dtype=int), test=np.asarray(test, dtype=int))

    def split_by_time(self, n_train):
        """First ``n_train`` snapshots (by position) train, the rest test."""
        idx = np.arange(len(self))
        return self.with_split(idx[:n_train], idx[n_train:])

    def split_by_trajectory(self, train_ids):
        mask = np.isin(self.traj, np.asarray(list(train_ids)))
        idx = np.arange(len(self))
        return self.with_split(idx[mask], idx[~mask])

    def normalized(self, scale=None, center=False):
        """Return a copy in model coordinates. ``scale`` defaults to one
        fitted on the training snapshots."""
        if not self.scale.is_identity():
            raise ValueError("dataset is already normalized")
        if scale is None:
            tr = self.train if len(self.train) else np.arange(len(self))
            scale = Normalization.fit(np.vstack([self.x[tr], self.x_next[tr]]), self.w[tr], center)
        return dataclasses.replace(self, x=scale.normalize_x(self.x), w=scale.normalize_w(self.w),
                                   x_next=scale.normalize_x(self.x_next), scale=scale)

    def denormalized(self):
        s = self.scale
        return dataclasses.replace(self, x=s.denormalize_x(self.x), w=s.denormalize_w(self.w),
                                   x_next=s.denormalize_x(self.x_next),
                                   scale=Normalization.identity(self.n_state, self.n_input))

    def trajectories(self):
        """Yield ``(traj_id, states (T+1, n), inputs (T, m))`` per trajectory,
        assuming snapshots of one trajectory are contiguous in time."""
        for tid in np.unique(self.traj):
            idx = np.flatnonzero(self.traj == tid)
            idx = idx[np.argsort(self.time[idx], kind="stable")]
            states = np.vstack([self.x[idx], self.x_next[idx[-1:]]])
            yield int(tid), states, self.w[idx]


def write_trajectory_csv(path, dataset):
    """Columns ``t, x_1..x_n, w_1..w_m``; one row per time point. The
    input on the final row of each trajectory is left blank."""
    n, m = dataset.n_state, dataset.n_input
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"w_{j + 1}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for _, states, inputs in dataset.trajectories():
            for t, xs in enumerate(states):
                ws = [format(v, ".12g") for v in inputs[t]] if t < len(inputs) else [""] * m
                wr.writerow([t] + [format(v, ".12g") for v in xs] + ws)


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`. A new trajectory starts
    whenever ``t`` fails to increase by one."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if not header or header[0] != "t":
        raise DimensionError("trajectory CSV must start with a 't' column")
    n = sum(h.startswith("x_") for h in header)
    m = sum(h.startswith("w_") for h in header)
    if n < 1 or len(header) != 1 + n + m:
        raise DimensionError(f"unexpected trajectory CSV header {header}")
    pieces, cur, prev_t = [], [], None
    for r in rows:
        t = int(float(r[0]))
        if prev_t is not None and t != prev_t + 1:
            pieces.append(cur)
            cur = []
        cur.append(r)
        prev_t = t
    if cur:
        pieces.append(cur)
    datasets = []
    for k, piece in enumerate(pieces):
        states = np.array([[float(v) for v in r[1:1 + n]] for r in piece])
        inputs = np.array([[float(v) if v != "" else 0.0 for v in r[1 + n:]] for r in piece[:-1]])
        datasets.append(TrajectoryDataset.from_trajectory(states, inputs.reshape(len(piece) - 1, m), k))
    return TrajectoryDataset.concatenate(datasets)


# -- model -----------------------------------------------------------------------

@dataclass(frozen=True)
class KoopmanModel:
    state_dict: ObservableDictionary
    input_dict: ObservableDictionary
    K_x: np.ndarray
    K_u: np.ndarray
    W_h: np.ndarray
    cross_dict: ObservableDictionary = None
    K_xw: np.ndarray = None
    scale: Normalization = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        nL, mL = self.state_dict.lifted_dim, self.input_dict.lifted_dim
        if self.K_x.shape != (nL, nL):
            raise DimensionError(f"K_x must be {nL}x{nL}, got {self.K_x.shape}")
        if self.K_u.shape != (nL, mL):
            raise DimensionError(f"K_u must be {nL}x{mL}, got {self.K_u.shape}")
        if self.W_h.ndim != 2 or self.W_h.shape[1] != nL:
            raise DimensionError(f"W_h must have {nL} columns, got {self.W_h.shape}")
        if (self.cross_dict is None) != (self.K_xw is None):
            raise DimensionError("cross_dict and K_xw must be given together")
        if self.K_xw is not None and self.K_xw.shape != (nL, self.cross_dict.lifted_dim):
            raise DimensionError(f"K_xw must be {nL}x{self.cross_dict.lifted_dim}")

    @property
    def n_state(self):
        return self.state_dict.input_dim

    @property
    def n_input(self):
        return self.input_dict.input_dim

    @property
    def lifted_dim(self):
        return self.state_dict.lifted_dim

    def step(self, z, x_hat, w):
        """One lifted step ``K_x z + K_u psi_u(w) [+ K_xw psi_xw(x_hat, w)]``."""
        out = self.K_x @ z + self.K_u @ self.input_dict.lift(w)
        if self.cross_dict is not None:
            out = out + self.K_xw @ self.cross_dict.lift(np.concatenate([x_hat, w]))
        return out

    def predict_lifted_batch(self, X, W):
        Z = self.state_dict.lift_batch(X) @ self.K_x.T + self.input_dict.lift_batch(W) @ self.K_u.T
        if self.cross_dict is not None:
            Z = Z + self.cross_dict.lift_batch(np.hstack([X, W])) @ self.K_xw.T
        return Z

    def with_output_map(self, W_h):
        return dataclasses.replace(self, W_h=np.asarray(W_h, dtype=float))

    def to_dict(self):
        mj = numerics.matrix_to_json
        return {
            "state_dict": self.state_dict.to_dict(),
            "input_dict": self.input_dict.to_dict(),
            "cross_dict": None if self.cross_dict is None else self.cross_dict.to_dict(),
            "K_x": mj(self.K_x), "K_u": mj(self.K_u), "W_h": mj(self.W_h),
            "K_xw": None if self.K_xw is None else mj(self.K_xw),
            "normalization": None if self.scale is None else self.scale.to_dict(),
            "report": _jsonable(self.report),
        }

    @classmethod
    def from_dict(cls, obj):
        mf = numerics.matrix_from_json
        return cls(
            state_dict=dictionary_from_dict(obj["state_dict"]),
            input_dict=dictionary_from_dict(obj["input_dict"]),
            K_x=mf(obj["K_x"]), K_u=mf(obj["K_u"]), W_h=mf(obj["W_h"]),
            cross_dict=None if obj.get("cross_dict") is None else dictionary_from_dict(obj["cross_dict"]),
            K_xw=None if obj.get("K_xw") is None else mf(obj["K_xw"]),
            scale=None if obj.get("normalization") is None else Normalization.from_dict(obj["normalization"]),
            report=obj.get("report", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def state_selector(n, lifted_dim):
    """``[I_n | 0]``: reads the state out of a state-inclusive lift."""
    W = np.zeros((n, lifted_dim))
    W[:, :n] = np.eye(n)
    return W


# -- fitting ---------------------------------------------------------------------

def _check_dictionaries(data, state_dict, input_dict, cross_dict):
    if state_dict.input_dim != data.n_state:
        raise DimensionError(f"state dictionary expects {state_dict.input_dim} states, data has {data.n_state}")
    if input_dict.input_dim != data.n_input:
        raise DimensionError(f"input dictionary expects {input_dict.input_dim} inputs, data has {data.n_input}")
    if not (state_dict.state_inclusive and input_dict.state_inclusive):
        raise ValueError("state and input dictionaries must be state-inclusive")
    if np.any(input_dict.lift(np.zeros(data.n_input)) != 0.0):
        raise ValueError("input dictionary must satisfy psi_u(0) = 0 (no constant input features)")
    if cross_dict is not None and cross_dict.input_dim != data.n_state + data.n_input:
        raise DimensionError("cross dictionary must act on the concatenation (x, w)")


def _regressors(data, idx, state_dict, input_dict, cross_dict):
    blocks = [state_dict.lift_batch(data.x[idx]), input_dict.lift_batch(data.w[idx])]
    if cross_dict is not None:
        blocks.append(cross_dict.lift_batch(np.hstack([data.x[idx], data.w[idx]])))
    return np.hstack(blocks)


def one_step_errors(model, data, idx):
    """Mean per-snapshot relative one-step errors over ``idx``.

    Returns ``(lifted, state)``: ``||psi(x') - pred|| / ||psi(x')||`` and the
    same ratio on the state read-out (first n lifted coordinates).
    """
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return float("nan"), float("nan")
    target = model.state_dict.lift_batch(data.x_next[idx])
    pred = model.predict_lifted_batch(data.x[idx], data.w[idx])
    n = model.n_state
    return _mean_rel(target, pred), _mean_rel(target[:, :n], pred[:, :n])


def _mean_rel(target, pred):
    num = np.linalg.norm(target - pred, axis=1)
    den = np.linalg.norm(target, axis=1)
    ok = den > 0
    return float(np.mean(num[ok] / den[ok])) if np.any(ok) else float("nan")


def fit_edmd(data, state_dict, input_dict, cross_dict=None, ridge=DEFAULT_RIDGE):
    """Closed-form EDMD with control on the training split.

    Solves one least-squares problem for ``[K_x | K_u | K_xw]`` mapping the
    stacked lifted regressors onto ``psi_x(x_next)``. ``W_h`` is set to the
    state selector; use :func:`fit_output_map` for other outputs.
    """
    _check_dictionaries(data, state_dict, input_dict, cross_dict)
    nL, mL = state_dict.lifted_dim, input_dict.lifted_dim
    cL = 0 if cross_dict is None else cross_dict.lifted_dim
    if len(data.train) < nL + mL + cL:
        raise InsufficientDataError(
            f"{len(data.train)} training snapshots cannot identify {nL + mL + cL} regressors")
    R = _regressors(data, data.train, state_dict, input_dict, cross_dict)
    Y = state_dict.lift_batch(data.x_next[data.train])
    theta = numerics.solve_least_squares(Y.T, R.T, ridge)
    K_x, K_u = theta[:, :nL], theta[:, nL:nL + mL]
    K_xw = theta[:, nL + mL:] if cross_dict is not None else None
    model = KoopmanModel(state_dict, input_dict, K_x, K_u, state_selector(data.n_state, nL),
                         cross_dict, K_xw, None if data.scale.is_identity() else data.scale)
    tr = one_step_errors(model, data, data.train)
    te = one_step_errors(model, data, data.test)
    report = {"method": "edmd", "ridge": ridge, "n_train": int(len(data.train)),
              "n_test": int(len(data.test)),
              "train_error": tr[0], "test_error": te[0],
              "train_state_error": tr[1], "test_state_error": te[1],
              "error_convention": "mean over snapshots of vector-norm relative error"}
    return dataclasses.replace(model, report=report)


def fit_output_map(data, model, outputs, ridge=0.0):
    """Least-squares ``W_h`` with ``y_t ~ W_h psi_x(x_t)`` over all snapshots."""
    Y = np.atleast_2d(np.asarray(outputs, dtype=float))
    if Y.shape[0] != len(data) and Y.shape[1] == len(data):
        Y = Y.T
    if Y.shape[0] != len(data):
        raise DimensionError(f"{Y.shape[0]} outputs for {len(data)} snapshots")
    Z = model.state_dict.lift_batch(data.x)
    return numerics.solve_least_squares(Y.T, Z.T, ridge)


def predict_multistep(model, x0, w_seq, T):
    """Pure lifted rollout: ``z_0 = psi_x(x0)``, ``z_{t+1} = K_x z_t + K_u psi_u(w_t)``.

    Returns a ``(T, n)`` array of read-out states ``x_1..x_T`` (the first
    ``n`` lifted coordinates). Intermediate states are never re-lifted;
    the read-out is only used to evaluate cross features when present.
    """
    w_seq = np.asarray(w_seq, dtype=float).reshape(len(w_seq), -1) if len(w_seq) else np.zeros((0, model.n_input))
    if T > len(w_seq):
        raise DimensionError(f"need {T} inputs, got {len(w_seq)}")
    if T and w_seq.shape[1] != model.n_input:
        raise DimensionError(f"inputs must have {model.n_input} channels")
    n = model.n_state
    z = model.state_dict.lift(x0)
    out = np.empty((T, n))
    for t in range(T):
        z = model.step(z, z[:n], w_seq[t])
        out[t] = z[:n]
    return out


def rollout_errors(pred, truth):
    """Per-step vector-norm relative errors ``||pred_t - x_t|| / ||x_t||``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    return np.linalg.norm(pred - truth, axis=1) / np.linalg.norm(truth, axis=1)


def cross_term_ratio(model):
    """``||K_xw|| / (||K_x|| + ||K_u|| + ||K_xw||)`` (Frobenius norms)."""
    if model.cross_dict is None:
        raise ValueError("model was fitted without a cross dictionary")
    a, b, c = (np.linalg.norm(M) for M in (model.K_x, model.K_u, model.K_xw))
    return float(c / (a + b + c)) if a + b + c > 0 else 0.0


# -- deep DMD ----------------------------------------------------------------------

@dataclass
class DeepFitConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    ridge: float = DEFAULT_RIDGE
    seed: int = 0
    steps_per_epoch: int = 0  # 0 means one pass over the training split
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


class _Adam:
    def __init__(self, size, cfg):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.cfg = cfg

    def step(self, theta, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad**2
        mh = self.m / (1 - c.beta1**self.t)
        vh = self.v / (1 - c.beta2**self.t)
        return theta - c.learning_rate * mh / (np.sqrt(vh) + c.adam_eps)


def lifted_objective(model, data, idx):
    """Mean squared lifted residual ``||psi(x') - K_x psi(x) - K_u psi_u(w)||^2``."""
    if len(idx) == 0:
        return float("nan")
    R = model.state_dict.lift_batch(data.x_next[idx]) - model.predict_lifted_batch(data.x[idx], data.w[idx])
    return float(np.mean(np.sum(R**2, axis=1)))


def _deep_gradients(state_dict, input_dict, K_x, K_u, X, W, Xn):
    """Gradients of the mean squared lifted residual w.r.t. both networks."""
    N, n, m = len(X), state_dict.input_dim, input_dict.input_dim
    Zx, Zn, Zu = state_dict.lift_batch(X), state_dict.lift_batch(Xn), input_dict.lift_batch(W)
    R = Zn - Zx @ K_x.T - Zu @ K_u.T
    G = 2.0 * R / N
    g_next = G[:, n:]
    g_cur = -(G @ K_x)[:, n:]
    g_u = -(G @ K_u)[:, m:]
    gx = state_dict.feature_gradients(np.vstack([Xn, X]), np.vstack([g_next, g_cur])).flatten()
    gu = input_dict.feature_gradients(W, g_u).flatten() if isinstance(input_dict, NeuralDictionary) else None
    return float(np.mean(np.sum(R**2, axis=1))), gx, gu


def fit_deep(data, state_dict, input_dict, config=None, log_path=None):
    """Deep DMD: train neural dictionaries jointly with ``(K_x, K_u)``.

    Each epoch the Koopman matrices are refreshed by the closed-form ridge
    solve for the current dictionaries, then the network parameters take
    mini-batch Adam steps on the mean squared lifted residual. The
    dictionaries with the lowest test objective (train objective when there
    is no test split) are kept and refit in closed form, so ``epochs=0``
    reproduces :func:`fit_edmd` on the initial dictionaries.

    The training log ``[(epoch, train_loss, test_loss), ...]`` is stored in
    ``model.report["training_log"]`` and written to ``log_path`` as CSV.
    """
    config = config or DeepFitConfig()
    if not isinstance(state_dict, NeuralDictionary) or not isinstance(input_dict, NeuralDictionary):
        raise TypeError("fit_deep needs neural state and input dictionaries")
    if not input_dict.zero_anchored:
        input_dict = NeuralDictionary(input_dict.params, zero_anchored=True)
    rng = np.random.default_rng(config.seed)
    train = np.asarray(data.train)
    eval_idx = data.test if len(data.test) else train

    theta_x, theta_u = state_dict.params.flatten(), input_dict.params.flatten()
    opt_x, opt_u = _Adam(theta_x.size, config), _Adam(theta_u.size, config)
    log = []
    best = (np.inf, theta_x.copy(), theta_u.copy())
    diverged = None
    bs = max(1, min(config.batch_size, len(train)))
    steps = config.steps_per_epoch or int(np.ceil(len(train) / bs))

    for epoch in range(config.epochs + 1):
        sd = state_dict.with_params(state_dict.params.with_flat(theta_x))
        ud = input_dict.with_params(input_dict.params.with_flat(theta_u))
        model = fit_edmd(data, sd, ud, ridge=config.ridge)
        train_loss = lifted_objective(model, data, train)
        test_loss = lifted_objective(model, data, eval_idx)
        if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
            diverged = epoch
            break
        log.append((epoch, train_loss, test_loss))
        if test_loss < best[0]:
            best = (test_loss, theta_x.copy(), theta_u.copy())
        if epoch == config.epochs:
            break
        order = rng.permutation(train)
        for s in range(steps):
            start = (s * bs) % len(order)
            batch = order[start:start + bs]
            if len(batch) < bs:
                batch = np.concatenate([batch, order[: bs - len(batch)]])
            loss, gx, gu = _deep_gradients(sd, ud, model.K_x, model.K_u,
                                           data.x[batch], data.w[batch], data.x_next[batch])
            if not (np.isfinite(loss) and np.all(np.isfinite(gx)) and np.all(np.isfinite(gu))):
                diverged = epoch
                break
            theta_x = opt_x.step(theta_x, gx)
            theta_u = opt_u.step(theta_u, gu)
            sd = sd.with_params(sd.params.with_flat(theta_x))
            ud = ud.with_params(ud.params.with_flat(theta_u))
        if diverged is not None:
            break

    if diverged is not None:
        warnings.warn(f"training loss became non-finite at epoch {diverged}; "
                      "returning the best finite iterate", TrainingDivergedWarning, stacklevel=2)
    _, bx, bu = best
    sd = state_dict.with_params(state_dict.params.with_flat(bx))
    ud = input_dict.with_params(input_dict.params.with_flat(bu))
    model = fit_edmd(data, sd, ud, ridge=config.ridge)
    report = dict(model.report, method="deep", epochs=config.epochs, best_test_loss=best[0],
                  training_log=[list(r) for r in log], diverged_at=diverged,
                  hyper=dataclasses.asdict(config))
    if log_path is not None:
        write_training_log(log_path, log)
    return dataclasses.replace(model, report=report)


def write_training_log(path, log):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "test_loss"])
        for e, a, b in log:
            wr.writerow([e, format(a, ".12g"), format(b, ".12g")])
