"""Multi-way partitioning of physical states by subset scores.

``multiway_partition`` is a heap-merge heuristic in the spirit of
Karmarkar-Karp differencing: every unit starts as its own k-slot tuple,
the two tuples with the largest maximum slot score are merged under the
slot alignment that minimizes the merged maximum, and slot scores are
recomputed from scratch because they are not additive. ``brute_force_partition``
enumerates restricted-growth strings and serves as an exact oracle for
small instances.

Indices are 0-based unit indices (see :mod:`koopdec.gramians`).
"""
from __future__ import annotations

import csv
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OracleTooLargeError, PartitionError
from .gramians import KappaEvaluator, format_subset

ORACLE_LIMIT = 10**6


# -- objectives ----------------------------------------------------------------------

def objective_spread(kappas):
    """Sum over unordered pairs of ``|k_i - k_j|``."""
    x = np.sort(np.asarray(kappas, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("need at least one value")
    m = x.size
    return float(np.sum((2 * np.arange(m) - m + 1) * x))


def objective_maximin(kappas):
    """Smallest per-cluster score (to be maximized over partitions)."""
    x = np.asarray(kappas, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("need at least one value")
    return float(np.min(x))


OBJECTIVES = {"spread": (objective_spread, False), "maximin": (objective_maximin, True)}


# -- result types ------------------------------------------------------------------------

@dataclass
class PartitionTuple:
    """``k`` disjoint slots with their (normalized) scores; empty slots hold 0."""

    slots: list
    slot_kappas: list
    history: list = field(default_factory=list)

    @property
    def max_kappa(self):
        vals = [v for s, v in zip(self.slots, self.slot_kappas) if s]
        return max(vals) if vals else 0.0

    @property
    def first_index(self):
        return min(i for s in self.slots for i in s)

    def heap_key(self):
        # max-heap on max_kappa, ties to the smallest contained index
        return (-self.max_kappa, self.first_index)


@dataclass
class Partition:
    clusters: list
    scores: list
    objective_spread: float
    objective_maximin: float
    units: list
    lam: float
    normalization: tuple
    method: str = "heuristic"
    history: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def kappas(self):
        return [s.kappa for s in self.scores]

    def nonempty(self):
        return [c for c in self.clusters if c]

    def is_valid(self, n_units):
        flat = sorted(i for c in self.clusters for i in c)
        return flat == list(range(n_units)) and any(self.clusters)

    def state_clusters(self):
        """Clusters expressed as state coordinates."""
        return [sorted(i for u in c for i in self.units[u]) for c in self.clusters]

    def to_dict(self):
        return {
            "method": self.method,
            "lambda": self.lam,
            "normalization": {"mean_kappa_o": _r(self.normalization[0]),
                              "mean_kappa_c": _r(self.normalization[1])},
            "units": [list(u) for u in self.units],
            "clusters": [
                {"units": list(c), "states": s,
                 **({"kappa_o": _r(sc.kappa_o), "kappa_c": _r(sc.kappa_c), "kappa": _r(sc.kappa)}
                    if sc is not None else {})}
                for c, s, sc in zip(self.clusters, self.state_clusters(), self._aligned_scores())
            ],
            "objective_spread": _r(self.objective_spread),
            "objective_maximin": _r(self.objective_maximin),
            "merge_history": self.history,
            "stats": self.stats,
        }

    def _aligned_scores(self):
        it = iter(self.scores)
        return [next(it) if c else None for c in self.clusters]

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["cluster", "units", "states", "kappa_o", "kappa_c", "kappa"])
            for i, (c, s, sc) in enumerate(zip(self.clusters, self.state_clusters(), self._aligned_scores())):
                vals = [format(v, ".12g") for v in (sc.kappa_o, sc.kappa_c, sc.kappa)] if sc else ["", "", ""]
                wr.writerow([i, format_subset(c), format_subset(s)] + vals)


def _r(v):
    """12 significant digits; non-finite values become null in JSON."""
    v = float(v)
    return float(format(v, ".12g")) if math.isfinite(v) else None


def _finish(ev, clusters, method, history=None, stats=None):
    clusters = [tuple(sorted(c)) for c in clusters]
    scores = [ev.score(c) for c in clusters if c]
    kappas = [s.kappa for s in scores]
    return Partition(clusters, scores, objective_spread(kappas), objective_maximin(kappas),
                     ev.units, ev.lam, ev.norm, method, history or [], stats or {})


def _evaluator(model, grams, lam, units, evaluator):
    if evaluator is not None:
        return evaluator
    return KappaEvaluator(model, grams, lam, units)


# -- adjacency ---------------------------------------------------------------------------

def load_adjacency(path, n_units=None):
    """Adjacency over units from JSON: ``{"edges": [[i, j], ...]}`` or a 0/1 matrix
    under ``"matrix"``. Returns a symmetric boolean matrix."""
    obj = json.loads(Path(path).read_text())
    return adjacency_matrix(obj, n_units)


def adjacency_matrix(obj, n_units=None):
    if "matrix" in obj:
        A = np.asarray(obj["matrix"], dtype=float) != 0
    else:
        edges = [tuple(int(v) for v in e) for e in obj["edges"]]
        n = n_units if n_units is not None else 1 + max(max(e) for e in edges)
        A = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            A[i, j] = True
    A = A | A.T
    if n_units is not None and A.shape != (n_units, n_units):
        raise PartitionError(f"adjacency must cover {n_units} units, got {A.shape}")
    return A


def _touches(adj, a, b):
    return bool(adj[np.ix_(list(a), list(b))].any())


# -- heuristic ----------------------------------------------------------------------------

def _canonical(slots):
    return tuple(sorted(tuple(s) for s in slots if s))


def multiway_partition(model, grams, k, lam=1.0, units=None, adjacency=None, evaluator=None):
    """Heap-merge k-way partition of the units.

    Each round pops the two tuples with the largest maximum slot score,
    tries every alignment of the second tuple's slots against the first,
    recomputes the combined score of each merged slot and keeps the
    alignment with the smallest maximum (ties: lexicographically smallest
    resulting partition). Slot scores are then divided by their smallest
    nonempty value. A merged slot covering every unit scores +inf.

    ``adjacency`` (boolean unit matrix) restricts alignments to those that
    only join slots sharing at least one edge; if no alignment qualifies
    the round falls back to all alignments and records it.
    """
    ev = _evaluator(model, grams, lam, units, evaluator)
    n = ev.n_units
    if not 2 <= k <= n:
        raise PartitionError(f"need 2 <= k <= {n}, got k = {k}")
    adj = None if adjacency is None else np.asarray(adjacency, dtype=bool)
    full = tuple(range(n))

    def slot_kappa(s):
        return math.inf if s == full else ev.kappa(s)

    heap = []
    for j in range(n):
        t = PartitionTuple([(j,)] + [()] * (k - 1), [ev.kappa((j,))] + [0.0] * (k - 1))
        heapq.heappush(heap, (t.heap_key(), j, t))
    counter = n
    history = []
    stats = {"rounds": 0, "permutations": 0, "kappa_requests": 0}
    perms = list(itertools.permutations(range(k)))

    while len(heap) > 1:
        a = heapq.heappop(heap)[2]
        b = heapq.heappop(heap)[2]
        candidates = perms
        fallback = False
        if adj is not None:
            candidates = [p for p in perms if all(
                not (a.slots[i] and b.slots[p[i]]) or _touches(adj, a.slots[i], b.slots[p[i]])
                for i in range(k))]
            if not candidates:
                candidates, fallback = perms, True
        best = None
        for p in candidates:
            slots = [tuple(sorted(a.slots[i] + b.slots[p[i]])) for i in range(k)]
            vals = []
            for s in slots:
                if s:
                    stats["kappa_requests"] += 1
                    vals.append(slot_kappa(s))
                else:
                    vals.append(0.0)
            stats["permutations"] += 1
            mx = max(v for s, v in zip(slots, vals) if s)
            key = (mx, _canonical(slots), p)
            if best is None or key < best[0]:
                best = (key, slots, vals, p)
        (mx, _, p), slots, vals, _ = best
        if math.isinf(mx):
            raise PartitionError("k too large for coherent partition: every alignment covers all units")
        lo = min(v for s, v in zip(slots, vals) if s)
        norm_vals = [v / lo if s and lo > 0 else v for s, v in zip(slots, vals)]
        history.append({"round": stats["rounds"] + 1,
                        "merged": [[list(s) for s in a.slots], [list(s) for s in b.slots]],
                        "permutation": list(p), "slots": [list(s) for s in slots],
                        "max_kappa": _r(mx), "fallback": fallback})
        stats["rounds"] += 1
        t = PartitionTuple(slots, norm_vals)
        heapq.heappush(heap, (t.heap_key(), counter, t))
        counter += 1

    final = heap[0][2]
    return _finish(ev, final.slots, "heuristic", history, stats)


# -- exhaustive oracle ---------------------------------------------------------------------

def stirling2(n, k):
    """Stirling numbers of the second kind."""
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


def count_partitions(n, k):
    """Set partitions of ``n`` items into at most ``k`` nonempty blocks."""
    return sum(stirling2(n, j) for j in range(1, k + 1))


def restricted_growth_strings(n, k):
    """All restricted-growth strings of length ``n`` with at most ``k`` blocks,
    in lexicographic order."""
    a = [0] * n

    def rec(i, m):
        if i == n:
            yield tuple(a)
            return
        for v in range(min(m + 1, k - 1) + 1):
            a[i] = v
            yield from rec(i + 1, max(m, v))

    if n == 0:
        yield ()
        return
    yield from rec(1, 0)


def rgs_to_blocks(rgs):
    blocks = {}
    for i, b in enumerate(rgs):
        blocks.setdefault(b, []).append(i)
    return [tuple(blocks[b]) for b in sorted(blocks)]


def brute_force_partition(model, grams, k, lam=1.0, objective="spread", units=None,
                          evaluator=None, limit=ORACLE_LIMIT, exact_k=True):
    """Exact optimum over all partitions into exactly ``k`` nonempty blocks
    (``exact_k=False``: at most ``k``, still excluding the single block,
    whose score is undefined).

    Ties go to the lexicographically smallest restricted-growth string.
    Spread is minimized, maximin maximized.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    ev = _evaluator(model, grams, lam, units, evaluator)
    n = ev.n_units
    if not 2 <= k <= n:
        raise PartitionError(f"need 2 <= k <= {n}, got k = {k}")
    total = stirling2(n, k) if exact_k else count_partitions(n, k)
    if total > limit:
        raise OracleTooLargeError(f"instance too large for oracle: {total} partitions exceed {limit}")
    f, maximize = OBJECTIVES[objective]
    best = None
    for rgs in restricted_growth_strings(n, k):
        blocks = rgs_to_blocks(rgs)
        if len(blocks) < 2 or (exact_k and len(blocks) != k):
            continue
        val = f([ev.kappa(b) for b in blocks])
        score = -val if maximize else val
        if best is None or score < best[0]:
            best = (score, blocks)
    clusters = best[1] + [()] * (k - len(best[1]))
    return _finish(ev, clusters, f"oracle:{objective}", stats={"enumerated": total})
