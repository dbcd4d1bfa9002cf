"""Observable dictionaries psi(v).

State dictionaries are *state-inclusive*: ``lift(v)[:input_dim] == v``
exactly, with nonlinear features appended after the verbatim copy.
Every dictionary offers a single-point ``lift``/``jacobian`` pair and a
vectorized ``lift_batch`` used by the fitting code.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteError


def _check_vector(v, dim):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimensionError(f"expected a vector of length {dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("dictionary input contains NaN or Inf")
    return v


def _check_batch(V, dim):
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V.reshape(1, -1)
    if V.ndim != 2 or V.shape[1] != dim:
        raise DimensionError(f"expected an (N, {dim}) batch, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise NonFiniteError("dictionary input contains NaN or Inf")
    return V


class ObservableDictionary:
    """Base class. Subclasses implement ``_features``/``_features_jacobian``
    for the appended (non-verbatim) coordinates."""

    kind = "abstract"
    state_inclusive = True

    def __init__(self, input_dim):
        if input_dim < 1:
            raise DimensionError("input_dim must be >= 1")
        self.input_dim = int(input_dim)

    @property
    def n_features(self):
        return 0

    @property
    def lifted_dim(self):
        return self.input_dim + self.n_features

    def lift(self, v):
        v = _check_vector(v, self.input_dim)
        return self.lift_batch(v[None, :])[0]

    def lift_batch(self, V):
        V = _check_batch(V, self.input_dim)
        if self.n_features == 0:
            return V.copy()
        return np.hstack([V, self._features(V)])

    def jacobian(self, v):
        v = _check_vector(v, self.input_dim)
        top = np.eye(self.input_dim)
        if self.n_features == 0:
            return top
        return np.vstack([top, self._features_jacobian(v)])

    def _features(self, V):  # pragma: no cover - abstract
        raise NotImplementedError

    def _features_jacobian(self, v):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim}

    def __repr__(self):
        return f"{type(self).__name__}(input_dim={self.input_dim}, lifted_dim={self.lifted_dim})"


class IdentityDictionary(ObservableDictionary):
    kind = "identity"


def graded_lex_exponents(n, max_degree, min_degree=1):
    """Exponent vectors of all monomials in ``n`` variables with
    ``min_degree <= degree <= max_degree``, graded lexicographic order."""
    out = []
    for deg in range(min_degree, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), deg):
            e = np.zeros(n, dtype=int)
            for i in combo:
                e[i] += 1
            out.append(e)
    return np.array(out, dtype=int).reshape(-1, n)


def _monomials(V, exps):
    # V: (N, n), exps: (F, n) -> (N, F)
    return np.prod(V[:, None, :] ** exps[None, :, :], axis=2)


def _monomial_jacobian(v, exps):
    F, n = exps.shape
    J = np.zeros((F, n))
    for j in range(n):
        e = exps.copy()
        coef = e[:, j].astype(float)
        e[:, j] = np.maximum(e[:, j] - 1, 0)
        J[:, j] = coef * np.prod(v[None, :] ** e, axis=1)
    return J


class PolynomialDictionary(ObservableDictionary):
    """Monomials of degree 1..max_degree in graded lexicographic order.

    For n = 2, degree 2 the lift is (x1, x2, x1^2, x1 x2, x2^2). The
    degree-1 block is exactly the state, so the dictionary is
    state-inclusive. ``include_constant`` appends a trailing 1.

    ``exponents`` replaces the full graded set of nonlinear monomials by an
    explicit list of exponent tuples (each of total degree >= 2), e.g.
    ``[(2, 0)]`` for the lift (x1, x2, x1^2).
    """

    kind = "polynomial"

    def __init__(self, input_dim, max_degree, include_constant=False, exponents=None):
        super().__init__(input_dim)
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        self.max_degree = int(max_degree)
        self.include_constant = bool(include_constant)
        if exponents is None:
            self._exps = graded_lex_exponents(self.input_dim, self.max_degree, min_degree=2)
            self.explicit = False
        else:
            exps = np.asarray(exponents, dtype=int).reshape(-1, self.input_dim)
            deg = exps.sum(axis=1)
            if np.any(exps < 0) or np.any(deg < 2) or np.any(deg > self.max_degree):
                raise ValueError("explicit exponents need total degree in [2, max_degree]")
            self._exps = exps
            self.explicit = True

    @property
    def n_features(self):
        return len(self._exps) + int(self.include_constant)

    def _features(self, V):
        F = _monomials(V, self._exps)
        if self.include_constant:
            F = np.hstack([F, np.ones((V.shape[0], 1))])
        return F

    def _features_jacobian(self, v):
        J = _monomial_jacobian(v, self._exps)
        if self.include_constant:
            J = np.vstack([J, np.zeros((1, self.input_dim))])
        return J

    def to_dict(self):
        d = {**super().to_dict(), "max_degree": self.max_degree,
             "include_constant": self.include_constant}
        if self.explicit:
            d["exponents"] = np.asarray(self._exps).tolist()
        return d


class ThinPlateRBFDictionary(ObservableDictionary):
    """Thin-plate splines ``r^2 log r`` with ``r = ||v - c|| / scale``."""

    kind = "thin_plate_rbf"

    def __init__(self, centers, scale=1.0):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        super().__init__(centers.shape[1])
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.centers = centers
        self.scale = float(scale)

    @classmethod
    def from_data(cls, states, n_centers, scale=1.0, seed=0):
        """Centers drawn uniformly without replacement from ``states``."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(states), size=min(n_centers, len(states)), replace=False)
        return cls(states[np.sort(idx)], scale)

    @property
    def n_features(self):
        return len(self.centers)

    def _features(self, V):
        r = np.linalg.norm(V[:, None, :] - self.centers[None], axis=2) / self.scale
        out = np.zeros_like(r)
        pos = r > 0
        out[pos] = r[pos] ** 2 * np.log(r[pos])
        return out

    def _features_jacobian(self, v):
        diff = v[None, :] - self.centers
        r = np.linalg.norm(diff, axis=1) / self.scale
        coef = np.zeros_like(r)
        pos = r > 0
        coef[pos] = (2.0 * np.log(r[pos]) + 1.0) / self.scale**2
        return coef[:, None] * diff

    def to_dict(self):
        return {**super().to_dict(), "centers": self.centers.tolist(), "scale": self.scale}


class MixedPolynomialDictionary(ObservableDictionary):
    """Genuinely mixed monomials ``x^a w^b`` (|a| >= 1, |b| >= 1) of total
    degree <= max_degree, evaluated on the concatenation ``(x, w)``.

    This is a cross dictionary, not a state dictionary: it carries no
    verbatim copy of its input and may be narrower than its input.
    """

    kind = "mixed_polynomial"
    state_inclusive = False

    def __init__(self, state_dim, input_dim, max_degree=2):
        super().__init__(state_dim + input_dim)
        if max_degree < 2:
            raise ValueError("mixed monomials need max_degree >= 2")
        self.state_dim = int(state_dim)
        self.signal_dim = int(input_dim)
        self.max_degree = int(max_degree)
        all_exps = graded_lex_exponents(self.input_dim, self.max_degree, min_degree=2)
        mixed = (all_exps[:, : self.state_dim].sum(1) >= 1) & (all_exps[:, self.state_dim:].sum(1) >= 1)
        self._exps = all_exps[mixed]

    @property
    def n_features(self):
        return len(self._exps)

    @property
    def lifted_dim(self):
        return self.n_features

    def lift_batch(self, V):
        V = _check_batch(V, self.input_dim)
        return _monomials(V, self._exps)

    def jacobian(self, v):
        v = _check_vector(v, self.input_dim)
        return _monomial_jacobian(v, self._exps)

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "state_dim": self.state_dim,
                "signal_dim": self.signal_dim, "max_degree": self.max_degree}


# -- neural dictionary ----------------------------------------------------------

ACTIVATIONS = ("elu", "tanh")


def _act(name, z):
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z):
    if name == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class NetworkParams:
    """Weights and biases of a feedforward stack ``h_L o ... o h_1`` with
    ``h_i(v) = act(W_i v + b_i)``. If ``linear_output`` is set the last
    layer skips the activation."""

    weights: list
    biases: list
    activation: str = "elu"
    linear_output: bool = False

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i} input {W.shape[1]} != previous output "
                                     f"{self.weights[i - 1].shape[0]}")

    @classmethod
    def initialize(cls, input_dim, n_outputs, width=10, depth=3, activation="elu",
                   linear_output=False, seed=0, gain=1.0):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = [input_dim] + [width] * (depth - 1) + [n_outputs]
        Ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs, activation, linear_output)

    @property
    def depth(self):
        return len(self.weights)

    @property
    def width(self):
        return self.weights[0].shape[0] if self.depth > 1 else 0

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    def layer_activation(self, i):
        if self.linear_output and i == self.depth - 1:
            return "identity"
        return self.activation

    def arrays(self):
        return [*self.weights, *self.biases]

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        out, pos = [], 0
        for a in self.arrays():
            out.append(theta[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        if pos != theta.size:
            raise DimensionError("flat parameter vector has the wrong length")
        L = self.depth
        return NetworkParams(out[:L], out[L:], self.activation, self.linear_output)

    def zeros_like(self):
        return NetworkParams([np.zeros_like(W) for W in self.weights],
                             [np.zeros_like(b) for b in self.biases],
                             self.activation, self.linear_output)

    def copy(self):
        return self.with_flat(self.flatten().copy())

    def to_dict(self):
        return {"weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "activation": self.activation, "linear_output": self.linear_output}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["weights"], obj["biases"], obj.get("activation", "elu"),
                   obj.get("linear_output", False))


def forward(params, V):
    """Run the stack on a batch; returns (output, cache) where the cache
    holds per-layer (input, pre-activation) pairs for :func:`backward`."""
    a = V
    cache = []
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        cache.append((a, z))
        a = _act(params.layer_activation(i), z)
    return a, cache


def backward(params, cache, upstream):
    """Reverse-mode pass. ``upstream`` is dLoss/d(output), shape (N, out).

    Returns (grads, d_input) with grads shaped like ``params``.
    """
    dWs = [None] * params.depth
    dbs = [None] * params.depth
    delta = upstream
    for i in range(params.depth - 1, -1, -1):
        a_in, z = cache[i]
        delta = delta * _act_grad(params.layer_activation(i), z)
        dWs[i] = delta.T @ a_in
        dbs[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    return NetworkParams(dWs, dbs, params.activation, params.linear_output), delta


class NeuralDictionary(ObservableDictionary):
    """``lift(v) = (v, D(v))`` with ``D`` a feedforward network.

    With ``zero_anchored`` the features are ``D(v) - D(0)`` so that
    ``lift(0) == 0``; input dictionaries use this so that a zero
    disturbance lifts to zero.
    """

    kind = "neural"

    def __init__(self, params, zero_anchored=False):
        super().__init__(params.input_dim)
        self.params = params
        self.zero_anchored = bool(zero_anchored)

    @classmethod
    def initialize(cls, input_dim, n_features, width=10, depth=3, activation="elu",
                   seed=0, zero_anchored=False, linear_output=False):
        p = NetworkParams.initialize(input_dim, n_features, width, depth, activation,
                                     linear_output, seed)
        return cls(p, zero_anchored)

    def with_params(self, params):
        return NeuralDictionary(params, self.zero_anchored)

    @property
    def n_features(self):
        return self.params.output_dim

    def _features(self, V):
        out, _ = forward(self.params, V)
        if self.zero_anchored:
            out = out - forward(self.params, np.zeros((1, self.input_dim)))[0]
        return out

    def _features_jacobian(self, v):
        _, cache = forward(self.params, v[None, :])
        J = np.eye(self.n_features)
        for i in range(self.params.depth - 1, -1, -1):
            _, z = cache[i]
            J = (J * _act_grad(self.params.layer_activation(i), z[0])[None, :]) @ self.params.weights[i]
        return J

    def feature_gradients(self, V, upstream):
        """Gradient of ``sum(upstream * D(V))`` (anchoring included) w.r.t.
        the network parameters, for a batch."""
        _, cache = forward(self.params, V)
        grads, _ = backward(self.params, cache, upstream)
        if self.zero_anchored:
            _, cache0 = forward(self.params, np.zeros((1, self.input_dim)))
            g0, _ = backward(self.params, cache0, upstream.sum(axis=0, keepdims=True))
            grads = grads.with_flat(grads.flatten() - g0.flatten())
        return grads

    def to_dict(self):
        return {**super().to_dict(), "zero_anchored": self.zero_anchored,
                "network": self.params.to_dict()}


def parameter_gradient(dictionary, v, upstream):
    """Gradient of ``<upstream, dictionary.lift(v)>`` w.r.t. network parameters."""
    if not isinstance(dictionary, NeuralDictionary):
        raise TypeError(f"parameter gradients need a neural dictionary, got {dictionary.kind}")
    v = _check_vector(v, dictionary.input_dim)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (dictionary.lifted_dim,):
        raise DimensionError(f"upstream must have length {dictionary.lifted_dim}")
    return dictionary.feature_gradients(v[None, :], upstream[None, dictionary.input_dim:])


def lift(dictionary, v):
    return dictionary.lift(v)


def lift_jacobian(dictionary, v):
    return dictionary.jacobian(v)


def dictionary_from_dict(obj):
    """Rebuild a dictionary from its JSON record (inverse of ``to_dict``)."""
    kind = obj.get("kind")
    if kind == "identity":
        return IdentityDictionary(obj["input_dim"])
    if kind == "polynomial":
        return PolynomialDictionary(obj["input_dim"], obj["max_degree"],
                                    obj.get("include_constant", False), obj.get("exponents"))
    if kind == "thin_plate_rbf":
        return ThinPlateRBFDictionary(obj["centers"], obj.get("scale", 1.0))
    if kind == "mixed_polynomial":
        return MixedPolynomialDictionary(obj["state_dim"], obj["signal_dim"], obj["max_degree"])
    if kind == "neural":
        d = NeuralDictionary(NetworkParams.from_dict(obj["network"]), obj.get("zero_anchored", False))
        if d.input_dim != obj["input_dim"]:
            raise DimensionError("network input size disagrees with input_dim")
        return d
    raise ValueError(f"unknown dictionary kind {kind!r}")
