"""Command-line front-end: simulate, fit, gramians, kappa, partition, pipeline, verify.

A pipeline run is described by one JSON document (see :class:`PipelineConfig`
and the shipped presets in ``koopdec/presets``). Every stage writes plain
files into the output directory:

    config.json         resolved configuration
    trajectories.csv    simulated (or ingested) data
    model.json          fitted Koopman model
    training_log.csv    epoch, train_loss, test_loss
    gramians/           X_o, X_c, X_c_pinv (CSV + JSON) and metadata
    kappa.csv           subset scores
    kappa_bar.csv       singleton scores per unit (bar-chart data)
    partition.json/csv  partition report
    prediction.csv      true vs predicted states along one trajectory
    metrics.json        scalar summary

Failures are reported as a JSON record ``{"stage", "error", "message", ...}``
on stderr and in ``error.json``; the exit code is 1 (2 for configuration
errors).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import checks
from .dictionary import (
    IdentityDictionary,
    MixedPolynomialDictionary,
    NeuralDictionary,
    PolynomialDictionary,
    ThinPlateRBFDictionary,
)
from .errors import ConfigError, KoopdecError
from .gramians import (
    KappaEvaluator,
    KoopmanGramians,
    all_proper_subsets,
    compute_gramians,
    format_subset,
    write_kappa_csv,
)
from .koopman import (
    DeepFitConfig,
    KoopmanModel,
    Normalization,
    fit_deep,
    fit_edmd,
    lifted_objective,
    predict_multistep,
    read_trajectory_csv,
    rollout_errors,
    write_training_log,
    write_trajectory_csv,
)
from .partition import adjacency_matrix, brute_force_partition, load_adjacency, multiway_partition
from .systems import (
    InputSignal,
    TrajectoryDataset,
    TwoStateParams,
    additive_two_state_map,
    load_swing_params,
    random_stable_lti,
    random_swing_dataset,
    simulate_map,
    simulate_two_state,
)

SYSTEM_KINDS = ("two_state", "additive_two_state", "swing", "lti", "csv")
SPLIT_KINDS = ("time", "trajectory", "none")
NORMALIZATIONS = ("none", "max_abs", "standard", "equilibrium")
DICTIONARY_KINDS = ("identity", "polynomial", "rbf", "neural")
OBJECTIVES = ("spread", "maximin")


# -- configuration -----------------------------------------------------------------------

def _build(cls, obj, where):
    """Instantiate a config dataclass from a JSON object, rejecting unknown keys."""
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    aliases = getattr(cls, "ALIASES", {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key '{key}' in {where}")
        kwargs[name] = value
    inst = cls(**kwargs)
    inst.validate(where)
    return inst


def _dump(inst):
    out = {}
    inverse = {v: k for k, v in getattr(inst, "ALIASES", {}).items()}
    for f in dataclasses.fields(inst):
        v = getattr(inst, f.name)
        out[inverse.get(f.name, f.name)] = _dump(v) if dataclasses.is_dataclass(v) else v
    return out


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _positive_int(v, name, minimum=1):
    _require(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
             f"{name} must be an integer >= {minimum}, got {v!r}")


@dataclass
class SystemSpec:
    """Data source. ``kind`` selects which of the other fields apply."""

    kind: str = "two_state"
    T: int = 500
    n_traj: int = 1
    x0: list = None
    signal: dict = None
    params: dict = None
    params_file: str = None
    angle_spread: float = 0.5
    speed_spread: float = 0.5
    disturbance_scale: float = 0.2
    disturbance_prob: float = 0.2
    input_scale: float = 1.0
    n: int = 4
    m: int = 2
    p: int = 1
    rho: float = 0.8
    path: str = None
    seed: int = None

    def validate(self, where):
        _require(self.kind in SYSTEM_KINDS, f"{where}.kind must be one of {SYSTEM_KINDS}, got {self.kind!r}")
        _positive_int(self.T, f"{where}.T")
        _positive_int(self.n_traj, f"{where}.n_traj")
        if self.kind == "csv":
            _require(self.path is not None, f"{where}.path is required for csv data")
        if self.kind == "lti":
            for name in ("n", "m", "p"):
                _positive_int(getattr(self, name), f"{where}.{name}")
            _require(0 < self.rho < 1, f"{where}.rho must lie in (0, 1)")
        if self.params is not None:
            known = {f.name for f in dataclasses.fields(TwoStateParams)}
            unknown = set(self.params) - known
            _require(not unknown, f"unknown key(s) {sorted(unknown)} in {where}.params")
        if self.signal is not None:
            try:
                InputSignal.from_dict(self.signal)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{where}.signal: {exc}") from exc
        if self.x0 is not None:
            _require(isinstance(self.x0, list) and all(isinstance(v, (int, float)) for v in self.x0),
                     f"{where}.x0 must be a list of numbers")


@dataclass
class SplitSpec:
    kind: str = "time"
    n_train: int = None
    train_fraction: float = 0.5

    def validate(self, where):
        _require(self.kind in SPLIT_KINDS, f"{where}.kind must be one of {SPLIT_KINDS}")
        if self.kind == "time":
            _require(self.n_train is not None, f"{where}.n_train is required for a time split")
            _positive_int(self.n_train, f"{where}.n_train")
        _require(0 < self.train_fraction <= 1, f"{where}.train_fraction must lie in (0, 1]")


@dataclass
class DictionarySpec:
    kind: str = "identity"
    max_degree: int = 2
    include_constant: bool = False
    exponents: list = None
    n_centers: int = 20
    scale: float = 1.0
    n_features: int = 10
    width: int = 10
    depth: int = 3
    activation: str = "elu"
    linear_output: bool = False

    def validate(self, where):
        _require(self.kind in DICTIONARY_KINDS, f"{where}.kind must be one of {DICTIONARY_KINDS}")
        _positive_int(self.max_degree, f"{where}.max_degree")
        for name in ("n_centers", "n_features", "width", "depth"):
            _positive_int(getattr(self, name), f"{where}.{name}")
        _require(self.activation in ("elu", "tanh"), f"{where}.activation must be 'elu' or 'tanh'")


@dataclass
class CrossSpec:
    max_degree: int = 2

    def validate(self, where):
        _positive_int(self.max_degree, f"{where}.max_degree", 2)


@dataclass
class FitSpec:
    method: str = "edmd"
    ridge: float = 1e-8
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    steps_per_epoch: int = 0

    def validate(self, where):
        _require(self.method in ("edmd", "deep"), f"{where}.method must be 'edmd' or 'deep'")
        _require(self.ridge >= 0, f"{where}.ridge must be >= 0")
        _require(self.learning_rate > 0, f"{where}.learning_rate must be > 0")
        _positive_int(self.epochs, f"{where}.epochs", 0)
        _positive_int(self.batch_size, f"{where}.batch_size")
        _positive_int(self.steps_per_epoch, f"{where}.steps_per_epoch", 0)


@dataclass
class GramianSpec:
    horizon: int = None
    eps_stab: float = 1e-6

    def validate(self, where):
        if self.horizon is not None:
            _positive_int(self.horizon, f"{where}.horizon")
        _require(0 < self.eps_stab < 1, f"{where}.eps_stab must lie in (0, 1)")


@dataclass
class KappaSpec:
    ALIASES = {"lambda": "lam"}

    lam: float = 1.0
    units: object = "states"
    report: str = "auto"

    def validate(self, where):
        _require(isinstance(self.lam, (int, float)) and self.lam >= 0, f"{where}.lambda must be >= 0")
        _require(self.units in ("states", "generators") or isinstance(self.units, list),
                 f"{where}.units must be 'states', 'generators' or a list of index lists")
        _require(self.report in ("auto", "all", "singletons"),
                 f"{where}.report must be 'auto', 'all' or 'singletons'")


@dataclass
class PartitionSpec:
    k: int = 2
    objective: str = "spread"
    oracle: bool = False
    adjacency: object = None

    def validate(self, where):
        _positive_int(self.k, f"{where}.k", 2)
        _require(self.objective in OBJECTIVES, f"{where}.objective must be one of {OBJECTIVES}")
        _require(self.adjacency is None or isinstance(self.adjacency, (str, dict)),
                 f"{where}.adjacency must be a file path or an inline object")


@dataclass
class PredictionSpec:
    trajectory: int = None
    start: int = 0
    T: int = None
    eval_start: int = None
    eval_T: int = None

    def validate(self, where):
        _positive_int(self.start, f"{where}.start", 0)
        for name in ("T", "eval_T"):
            if getattr(self, name) is not None:
                _positive_int(getattr(self, name), f"{where}.{name}")
        if self.eval_start is not None:
            _positive_int(self.eval_start, f"{where}.eval_start", 0)


@dataclass
class PipelineConfig:
    """Full description of one run; validated before any computation."""

    name: str = "run"
    seed: int = 0
    out: str = None
    system: SystemSpec = field(default_factory=SystemSpec)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(kind="none"))
    normalization: str = "none"
    state_dictionary: DictionarySpec = field(default_factory=DictionarySpec)
    input_dictionary: DictionarySpec = field(default_factory=DictionarySpec)
    cross_dictionary: CrossSpec = None
    fit: FitSpec = field(default_factory=FitSpec)
    gramians: GramianSpec = field(default_factory=GramianSpec)
    kappa: KappaSpec = field(default_factory=KappaSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    prediction: PredictionSpec = field(default_factory=PredictionSpec)

    SECTIONS = {"system": SystemSpec, "split": SplitSpec, "state_dictionary": DictionarySpec,
                "input_dictionary": DictionarySpec, "cross_dictionary": CrossSpec, "fit": FitSpec,
                "gramians": GramianSpec, "kappa": KappaSpec, "partition": PartitionSpec,
                "prediction": PredictionSpec}

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {unknown}")
        kwargs = {}
        for key, value in obj.items():
            if key in cls.SECTIONS:
                if key == "cross_dictionary" and value is None:
                    kwargs[key] = None
                else:
                    kwargs[key] = _build(cls.SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        _require(isinstance(self.name, str) and self.name, "name must be a nonempty string")
        _positive_int(self.seed, "seed", 0)
        _require(self.normalization in NORMALIZATIONS, f"normalization must be one of {NORMALIZATIONS}")
        if self.normalization == "equilibrium":
            _require(self.system.kind == "swing", "equilibrium normalization needs a swing system")
        if self.kappa.units == "generators":
            _require(self.system.kind in ("swing", "csv"), "units 'generators' need swing data")
        if self.fit.method == "deep":
            _require(self.state_dictionary.kind == "neural" and self.input_dictionary.kind == "neural",
                     "deep fit needs neural state and input dictionaries")
        if self.split.kind == "time":
            _require(self.system.n_traj == 1, "a time split needs a single trajectory")

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _dump(v) if dataclasses.is_dataclass(v) else v
        return out

    @classmethod
    def load(cls, path_or_preset):
        """Load a config file, or a shipped preset by name (``example1``)."""
        text = _read_config_text(path_or_preset)
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)


def preset_names():
    root = resources.files("koopdec").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _read_config_text(path_or_preset):
    p = Path(path_or_preset)
    if p.exists():
        return p.read_text()
    name = p.name[:-5] if p.name.endswith(".json") else p.name
    if name in preset_names():
        return resources.files("koopdec").joinpath(f"presets/{name}.json").read_text()
    raise ConfigError(f"no config file or preset named {str(path_or_preset)!r} "
                      f"(presets: {', '.join(preset_names())})")


# -- errors -------------------------------------------------------------------------------

class PipelineError(KoopdecError):
    """A module error annotated with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.out = None  # run directory, when known

    def record(self):
        rec = {"stage": self.stage, "error": type(self.cause).__name__, "message": str(self.cause)}
        for attr in ("step", "subset"):
            v = getattr(self.cause, attr, None)
            if v is not None:
                rec[attr] = list(v) if isinstance(v, tuple) else v
        return rec


@contextlib.contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc
    timings[name] = time.perf_counter() - t0


# -- stages --------------------------------------------------------------------------------

def _system_seed(cfg):
    return cfg.seed if cfg.system.seed is None else cfg.system.seed


def simulate_data(cfg):
    """Raw (unnormalized) dataset for ``cfg.system`` with ``cfg.split`` applied."""
    s = cfg.system
    seed = _system_seed(cfg)
    rng = np.random.default_rng(seed)
    if s.kind == "two_state":
        params = TwoStateParams(**(s.params or {}))
        signal = InputSignal.from_dict(s.signal or {"kind": "zero"})
        parts = []
        for k in range(s.n_traj):
            x0 = s.x0 if (k == 0 and s.x0 is not None) else rng.uniform(-0.5, 0.5, 2)
            d = simulate_two_state(params, x0, signal, s.T)
            parts.append(dataclasses.replace(d, traj=np.full(len(d), k)))
        data = TrajectoryDataset.concatenate(parts)
    elif s.kind == "additive_two_state":
        params = TwoStateParams(**(s.params or {}))
        parts = []
        for k in range(s.n_traj):
            x0 = s.x0 if (k == 0 and s.x0 is not None) else rng.uniform(-0.5, 0.5, 2)
            w = rng.uniform(-s.input_scale, s.input_scale, (s.T, 1))
            d = simulate_map(lambda x, u: additive_two_state_map(params, x, u), x0, w)
            parts.append(dataclasses.replace(d, traj=np.full(len(d), k)))
        data = TrajectoryDataset.concatenate(parts)
    elif s.kind == "swing":
        params = load_swing_params(s.params_file)
        data = random_swing_dataset(params, s.n_traj, s.T, s.angle_spread, s.speed_spread,
                                    s.disturbance_scale, s.disturbance_prob, seed)
    elif s.kind == "lti":
        sys_ = random_stable_lti(s.n, s.m, s.p, s.rho, seed)
        parts = []
        for k in range(s.n_traj):
            w = s.input_scale * rng.standard_normal((s.T, s.m))
            d = sys_.dataset(rng.standard_normal(s.n), w)
            parts.append(dataclasses.replace(d, traj=np.full(len(d), k)))
        data = TrajectoryDataset.concatenate(parts)
    else:
        data = read_trajectory_csv(s.path)
    return apply_split(data, cfg.split)


def apply_split(data, split):
    if split.kind == "time":
        if split.n_train >= len(data):
            raise ConfigError(f"n_train = {split.n_train} leaves no test data ({len(data)} snapshots)")
        return data.split_by_time(split.n_train)
    if split.kind == "trajectory":
        ids = np.unique(data.traj)
        n_train = max(1, int(math.ceil(split.train_fraction * len(ids))))
        return data.split_by_trajectory(ids[:n_train])
    return data.with_split(np.arange(len(data)), np.arange(0))


def normalize_data(cfg, data):
    kind = cfg.normalization
    if kind == "none":
        return data
    if kind == "equilibrium":
        eq = load_swing_params(cfg.system.params_file).equilibrium_state()
        return data.normalized(Normalization(eq, np.ones(data.n_state), np.ones(data.n_input)))
    return data.normalized(center=(kind == "standard"))


def build_dictionary(spec, dim, data_states, seed, anchored=False):
    if spec.kind == "identity":
        return IdentityDictionary(dim)
    if spec.kind == "polynomial":
        return PolynomialDictionary(dim, spec.max_degree, spec.include_constant, spec.exponents)
    if spec.kind == "rbf":
        return ThinPlateRBFDictionary.from_data(data_states, spec.n_centers, spec.scale, seed)
    return NeuralDictionary.initialize(dim, spec.n_features, spec.width, spec.depth, spec.activation,
                                       seed=seed, zero_anchored=anchored,
                                       linear_output=spec.linear_output)


def fit_model(cfg, data):
    """Fit on ``data`` (model coordinates). Returns ``(model, training_log)``."""
    tr = data.train
    sd = build_dictionary(cfg.state_dictionary, data.n_state, data.x[tr], cfg.seed)
    ud = build_dictionary(cfg.input_dictionary, data.n_input, data.w[tr], cfg.seed + 1, anchored=True)
    cross = None
    if cfg.cross_dictionary is not None:
        cross = MixedPolynomialDictionary(data.n_state, data.n_input, cfg.cross_dictionary.max_degree)
    f = cfg.fit
    if f.method == "deep":
        if cross is not None:
            raise ConfigError("deep fit does not support a cross dictionary")
        dc = DeepFitConfig(learning_rate=f.learning_rate, epochs=f.epochs, batch_size=f.batch_size,
                           ridge=f.ridge, seed=cfg.seed, steps_per_epoch=f.steps_per_epoch)
        model = fit_deep(data, sd, ud, dc)
        log = [tuple(r) for r in model.report["training_log"]]
    else:
        model = fit_edmd(data, sd, ud, cross, ridge=f.ridge)
        test = data.test if len(data.test) else data.train
        log = [(0, lifted_objective(model, data, data.train), lifted_objective(model, data, test))]
    return model, log


def resolve_units(spec, n_state):
    if spec == "states":
        return [(i,) for i in range(n_state)]
    if spec == "generators":
        if n_state % 2:
            raise ConfigError("units 'generators' need an even number of states (angles then speeds)")
        g = n_state // 2
        return [(i, i + g) for i in range(g)]
    return [tuple(int(i) for i in u) for u in spec]


def kappa_report(ev, mode="auto"):
    """Scores for the κ report: all proper subsets (``auto`` with at most
    10 units) or singletons with their complements."""
    n = ev.n_units
    if mode == "all" or (mode == "auto" and n <= 10):
        subsets = list(all_proper_subsets(n))
    else:
        full = set(range(n))
        subsets = [(i,) for i in range(n)] + [tuple(sorted(full - {i})) for i in range(n)] if n > 1 else []
    return [ev.score(S) for S in subsets]


def write_kappa_bar(path, ev):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["unit", "states", "kappa_o", "kappa_c", "kappa"])
        for i, s in enumerate(ev.singletons()):
            wr.writerow([i, format_subset(ev.units[i])] + s.row()[1:])


def _trajectory(data, tid):
    for t, states, inputs in data.trajectories():
        if t == tid:
            return states, inputs
    raise ConfigError(f"no trajectory with id {tid}")


def prediction_table(model, raw, spec):
    """Pure lifted rollout along one raw trajectory.

    Returns ``(tid, times, truth, pred, inputs)`` in physical coordinates.
    """
    if spec.trajectory is not None:
        tid = spec.trajectory
    else:
        pool = raw.traj[raw.test] if len(raw.test) else raw.traj
        tid = int(pool.min())
    states, inputs = _trajectory(raw, tid)
    T = len(inputs) - spec.start if spec.T is None else spec.T
    if spec.start + T > len(inputs) or T < 1:
        raise ConfigError(f"prediction window {spec.start}+{T} exceeds trajectory length {len(inputs)}")
    pred, truth = _rollout(model, states, inputs, spec.start, T)
    times = np.arange(spec.start + 1, spec.start + T + 1)
    return tid, times, truth, pred, inputs[spec.start:spec.start + T]


def _rollout(model, states, inputs, start, T):
    scale = model.scale or Normalization.identity(model.n_state, model.n_input)
    p = predict_multistep(model, scale.normalize_x(states[start]),
                          scale.normalize_w(inputs[start:start + T]), T)
    return scale.denormalize_x(p), states[start + 1:start + T + 1]


def write_prediction_csv(path, tid, times, truth, pred, inputs):
    n, m = truth.shape[1], inputs.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "traj"] + [f"x_{i + 1}_true" for i in range(n)]
                    + [f"x_{i + 1}_pred" for i in range(n)] + [f"w_{j + 1}" for j in range(m)])
        for k, t in enumerate(times):
            wr.writerow([int(t), tid] + [format(v, ".12g") for v in truth[k]]
                        + [format(v, ".12g") for v in pred[k]] + [format(v, ".12g") for v in inputs[k]])


def _g(v):
    """Round for JSON output (12 significant digits); non-finite values become strings."""
    if v is None:
        return None
    v = float(v)
    return float(format(v, ".12g")) if math.isfinite(v) else str(v)


def _partition(cfg, model, grams, ev):
    """Heuristic partition, plus the oracle when requested. Returns ``(report, heuristic, oracle)``."""
    ps = cfg.partition
    adj = None
    if ps.adjacency is not None:
        adj = (load_adjacency(ps.adjacency, ev.n_units) if isinstance(ps.adjacency, str)
               else adjacency_matrix(ps.adjacency, ev.n_units))
    heur = multiway_partition(model, grams, ps.k, evaluator=ev, adjacency=adj)
    oracle = None
    if ps.oracle:
        oracle = brute_force_partition(model, grams, ps.k, objective=ps.objective, evaluator=ev)
    return (oracle or heur), heur, oracle


@dataclass
class RunResult:
    out: Path
    model: KoopmanModel
    grams: KoopmanGramians
    partition: object
    metrics: dict
    timings: dict


def run_pipeline(config, out=None, verbose=False):
    """simulate -> fit -> gramians -> kappa -> partition -> predict, writing every artifact.

    Raises :class:`PipelineError` naming the failed stage.
    """
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_dict(config)
    out = Path(out or cfg.out or Path("runs") / cfg.name)
    timings = {}

    def say(msg):
        if verbose:
            print(msg, file=sys.stderr)

    try:
        with _stage("output", timings):
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
        with _stage("simulate", timings):
            raw = simulate_data(cfg)
            write_trajectory_csv(out / "trajectories.csv", raw)
        say(f"simulate: {len(raw)} snapshots, {len(np.unique(raw.traj))} trajectories")
        with _stage("normalize", timings):
            data = normalize_data(cfg, raw)
        with _stage("fit", timings):
            model, log = fit_model(cfg, data)
            model.save(out / "model.json")
            write_training_log(out / "training_log.csv", log)
        say(f"fit: test state error {model.report['test_state_error']:.4g}")
        with _stage("gramians", timings):
            grams = compute_gramians(model, cfg.gramians.horizon, cfg.gramians.eps_stab)
            grams.save(out / "gramians")
        with _stage("kappa", timings):
            units = resolve_units(cfg.kappa.units, model.n_state)
            ev = KappaEvaluator(model, grams, cfg.kappa.lam, units)
            write_kappa_csv(out / "kappa.csv", kappa_report(ev, cfg.kappa.report))
            write_kappa_bar(out / "kappa_bar.csv", ev)
        with _stage("partition", timings):
            part, heur, oracle = _partition(cfg, model, grams, ev)
            part.save_json(out / "partition.json")
            part.save_csv(out / "partition.csv")
            if oracle is not None:
                heur.save_json(out / "partition_heuristic.json")
        say(f"partition: {part.clusters}")
        with _stage("predict", timings):
            tid, times, truth, pred, inputs = prediction_table(model, raw, cfg.prediction)
            write_prediction_csv(out / "prediction.csv", tid, times, truth, pred, inputs)
            metrics = _metrics(cfg, model, grams, raw, part, heur, oracle, truth, pred, tid)
            (out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    except PipelineError as exc:
        exc.out = out
        raise
    return RunResult(out, model, grams, part, metrics, timings)


def _metrics(cfg, model, grams, raw, part, heur, oracle, truth, pred, tid):
    rep = model.report
    m = {
        "name": cfg.name,
        "fit": {k: _g(rep.get(k)) for k in ("train_error", "test_error", "train_state_error",
                                             "test_state_error")},
        "gramians": {"method": grams.method, "spectral_radius_Kx": _g(grams.spectral_radius_Kx),
                     "horizon": grams.horizon},
        "prediction": {"trajectory": tid, "rows": int(len(truth)),
                       "mean_relative_error": _g(np.mean(rollout_errors(pred, truth)))},
        "partition": {"method": part.method, "clusters": [list(c) for c in part.clusters],
                      "objective_spread": _g(part.objective_spread),
                      "objective_maximin": _g(part.objective_maximin)},
    }
    if rep.get("method") == "deep":
        m["fit"]["best_test_loss"] = _g(rep.get("best_test_loss"))
        m["fit"]["diverged_at"] = rep.get("diverged_at")
    ps = cfg.prediction
    if ps.eval_T is not None:
        states, inputs = _trajectory(raw, tid)
        start = ps.start if ps.eval_start is None else ps.eval_start
        if start + ps.eval_T > len(inputs):
            raise ConfigError(f"evaluation window {start}+{ps.eval_T} exceeds trajectory length {len(inputs)}")
        p, x = _rollout(model, states, inputs, start, ps.eval_T)
        m["evaluation"] = {"start": start, "T": ps.eval_T,
                           "mean_relative_error": _g(np.mean(rollout_errors(p, x)))}
    if oracle is not None:
        m["partition"]["heuristic_spread"] = _g(heur.objective_spread)
        m["partition"]["heuristic_clusters"] = [list(c) for c in heur.clusters]
        if oracle.objective_spread > 0:
            m["partition"]["heuristic_to_oracle_spread"] = _g(heur.objective_spread / oracle.objective_spread)
    return m


# -- command line -------------------------------------------------------------------------

def _load_config(args):
    if args.config is None:
        raise ConfigError(f"--config is required (a JSON file or one of: {', '.join(preset_names())})")
    cfg = PipelineConfig.load(args.config)
    return apply_overrides(cfg, args)


def apply_overrides(cfg, args):
    """Command-line flags take precedence over the config file."""
    g = vars(args)
    if g.get("seed") is not None:
        cfg.seed = g["seed"]
    if g.get("out") is not None:
        cfg.out = g["out"]
    if g.get("k") is not None:
        cfg.partition.k = g["k"]
    if g.get("lam") is not None:
        cfg.kappa.lam = g["lam"]
    if g.get("objective") is not None:
        cfg.partition.objective = g["objective"]
    if g.get("oracle"):
        cfg.partition.oracle = True
    if g.get("adjacency") is not None:
        cfg.partition.adjacency = g["adjacency"]
    if g.get("data") is not None:
        cfg.system = _build(SystemSpec, {"kind": "csv", "path": g["data"]}, "system")
    cfg.validate()
    for name in PipelineConfig.SECTIONS:
        sec = getattr(cfg, name)
        if sec is not None:
            sec.validate(name)
    return cfg


def _out_dir(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _units_arg(text):
    if text in ("states", "generators"):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError("units must be 'states', 'generators' or a JSON list") from exc


def _load_model_and_gramians(args, timings):
    with _stage("load", timings):
        model = KoopmanModel.load(args.model)
    if getattr(args, "gramians", None):
        with _stage("load", timings):
            grams = KoopmanGramians.load(args.gramians)
    else:
        with _stage("gramians", timings):
            grams = compute_gramians(model, getattr(args, "horizon", None))
    return model, grams


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg.out or Path("runs") / cfg.name)
    with _stage("simulate", {}):
        data = simulate_data(cfg)
        write_trajectory_csv(out / "trajectories.csv", data)
    print(f"wrote {out / 'trajectories.csv'} ({len(data)} snapshots)")


def cmd_fit(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg.out or Path("runs") / cfg.name)
    with _stage("simulate", {}):
        raw = simulate_data(cfg)
    with _stage("normalize", {}):
        data = normalize_data(cfg, raw)
    with _stage("fit", {}):
        model, log = fit_model(cfg, data)
        model.save(out / "model.json")
        write_training_log(out / "training_log.csv", log)
    print(f"wrote {out / 'model.json'}; test state error {model.report['test_state_error']:.4g}")


def cmd_gramians(args):
    timings = {}
    with _stage("load", timings):
        model = KoopmanModel.load(args.model)
    with _stage("gramians", timings):
        grams = compute_gramians(model, args.horizon)
        out = _out_dir(args, Path(args.model).parent / "gramians")
        grams.save(out)
    print(f"wrote Gramians to {out} ({grams.method}, spectral radius {grams.spectral_radius_Kx:.4g})")


def cmd_kappa(args):
    timings = {}
    model, grams = _load_model_and_gramians(args, timings)
    with _stage("kappa", timings):
        ev = KappaEvaluator(model, grams, args.lam if args.lam is not None else 1.0,
                            resolve_units(args.units, model.n_state))
        out = _out_dir(args, Path(args.model).parent)
        write_kappa_csv(out / "kappa.csv", kappa_report(ev, args.report))
        write_kappa_bar(out / "kappa_bar.csv", ev)
    print(f"wrote {out / 'kappa.csv'}")


def cmd_partition(args):
    timings = {}
    model, grams = _load_model_and_gramians(args, timings)
    with _stage("partition", timings):
        cfg = PipelineConfig()
        cfg.partition = _build(PartitionSpec, {"k": args.k, "objective": args.objective or "spread",
                                               "oracle": bool(args.oracle), "adjacency": args.adjacency},
                               "partition")
        ev = KappaEvaluator(model, grams, args.lam if args.lam is not None else 1.0,
                            resolve_units(args.units, model.n_state))
        part, _, _ = _partition(cfg, model, grams, ev)
        out = _out_dir(args, Path(args.model).parent)
        part.save_json(out / "partition.json")
        part.save_csv(out / "partition.csv")
    print(f"{part.method}: {part.clusters} spread {part.objective_spread:.6g}")


def cmd_pipeline(args):
    cfg = _load_config(args)
    res = run_pipeline(cfg, verbose=True)
    for stage, sec in res.timings.items():
        print(f"{stage:>10s} {sec:8.2f} s", file=sys.stderr)
    print(f"wrote run artifacts to {res.out}")


def cmd_verify(args):
    results = checks.run_suites(args.suite)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="koopdec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file or preset name")
            p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")

    def analysis(p):
        p.add_argument("--model", required=True, help="model.json from a fit")
        p.add_argument("--gramians", help="directory with saved Gramians (default: recompute)")
        p.add_argument("--horizon", type=int, help="force a finite-horizon Gramian")
        p.add_argument("--lambda", dest="lam", type=float, help="controllability weight (default 1)")
        p.add_argument("--units", type=_units_arg, default="states",
                       help="'states', 'generators' or a JSON list of index lists")

    def partition_flags(p, k_required=False):
        p.add_argument("--k", type=int, required=k_required, help="number of clusters")
        p.add_argument("--objective", choices=OBJECTIVES)
        p.add_argument("--oracle", action="store_true", help="use exhaustive search")
        p.add_argument("--adjacency", help="JSON file with unit adjacency")

    p = sub.add_parser("simulate", help="generate trajectories")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a Koopman model")
    common(p)
    p.add_argument("--data", help="trajectory CSV to fit instead of simulating")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gramians", help="compute Koopman Gramians of a fitted model")
    common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_gramians)

    p = sub.add_parser("kappa", help="subset score report")
    common(p, config=False)
    analysis(p)
    p.add_argument("--report", choices=("auto", "all", "singletons"), default="auto")
    p.set_defaults(func=cmd_kappa)

    p = sub.add_parser("partition", help="partition the state units")
    common(p, config=False)
    analysis(p)
    partition_flags(p, k_required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pipeline", help="run every stage from a config")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float)
    partition_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(checks.SUITES),
                   help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def _report_failure(record, out):
    text = json.dumps(record)
    print(text, file=sys.stderr)
    if out:
        with contextlib.suppress(OSError):
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(json.dumps(record, indent=1) + "\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        _report_failure({"stage": "config", "error": "ConfigError", "message": str(exc)}, out)
        return 2
    except PipelineError as exc:
        if isinstance(exc.cause, ConfigError):
            _report_failure(exc.record(), exc.out or out)
            return 2
        _report_failure(exc.record(), exc.out or out)
        return 1


if __name__ == "__main__":
    sys.exit(main())
