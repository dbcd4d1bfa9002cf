import itertools
import json
import math

import numpy as np
import pytest
from helpers import identity_model, random_fitted_model

from koopdec.errors import OracleTooLargeError, PartitionError
from koopdec.gramians import KappaEvaluator, compute_gramians
from koopdec.partition import (
    brute_force_partition,
    count_partitions,
    multiway_partition,
    objective_maximin,
    objective_spread,
    restricted_growth_strings,
    rgs_to_blocks,
    stirling2,
)


def identity_setup(n):
    m = identity_model(n)
    return m, compute_gramians(m)


# -- objectives ---------------------------------------------------------------------

def test_spread_examples():
    assert objective_spread([3.0, 3.0, 3.0]) == 0.0
    assert objective_spread([1, 2, 4]) == 6.0
    assert objective_spread([5.0]) == 0.0


def test_spread_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(int(rng.integers(1, 9)))
        ref = sum(abs(x[i] - x[j]) for i in range(len(x)) for j in range(i + 1, len(x)))
        assert objective_spread(x) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_maximin_examples_and_duality():
    assert objective_maximin([1, 2, 4]) == 1.0
    assert objective_maximin([2.5]) == 2.5
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(5)
        assert objective_maximin(x) == -max(-x)


def test_objectives_reject_empty():
    with pytest.raises(ValueError):
        objective_spread([])
    with pytest.raises(ValueError):
        objective_maximin([])


# -- enumeration --------------------------------------------------------------------

def test_stirling_and_counts():
    assert stirling2(9, 3) == 3025
    assert [count_partitions(n, n) for n in range(1, 8)] == [1, 2, 5, 15, 52, 203, 877]


@pytest.mark.parametrize("n,k", [(1, 1), (4, 2), (5, 3), (6, 6)])
def test_rgs_enumeration(n, k):
    rgs = list(restricted_growth_strings(n, k))
    assert len(rgs) == count_partitions(n, k)
    assert rgs == sorted(rgs)
    for r in rgs:
        assert r[0] == 0
        assert all(r[i] <= max(r[:i]) + 1 for i in range(1, n))
        assert max(r) < k
    # blocks are distinct set partitions
    assert len({tuple(rgs_to_blocks(r)) for r in rgs}) == len(rgs)


# -- heuristic ------------------------------------------------------------------------

def test_two_states_two_clusters():
    m, g = identity_setup(2)
    assert multiway_partition(m, g, 2).clusters == [(0,), (1,)]
    rng = np.random.default_rng(0)
    for seed in range(5):
        m = random_fitted_model(2, seed)
        p = multiway_partition(m, compute_gramians(m), 2)
        assert sorted(p.clusters) == [(0,), (1,)]


def test_identity_four_states_balanced_split():
    m, g = identity_setup(4)
    p = multiway_partition(m, g, 2)
    assert sorted(len(c) for c in p.clusters) == [2, 2]
    assert p.clusters == [(0, 2), (1, 3)]
    # every 2+2 split ties under the oracle
    o = brute_force_partition(m, g, 2)
    assert o.objective_spread == pytest.approx(p.objective_spread) == pytest.approx(0.0)
    ev = KappaEvaluator(m, g)
    vals = {ev.kappa(S) for S in itertools.combinations(range(4), 2)}
    assert len(vals) == 1


def test_algorithm_round_and_permutation_counts():
    m = random_fitted_model(6, 3)
    for k in (2, 3):
        p = multiway_partition(m, compute_gramians(m), k)
        assert p.stats["rounds"] == 5 == len(p.history)
        assert p.stats["permutations"] <= 5 * math.factorial(k)
        assert p.stats["kappa_requests"] <= k * p.stats["permutations"]


@pytest.mark.parametrize("seed", range(100))
def test_heuristic_output_is_valid_partition(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 10))
    k = int(rng.integers(2, 4))
    m = random_fitted_model(n, 500 + seed)
    p = multiway_partition(m, compute_gramians(m), k)
    assert p.is_valid(n)
    assert len(p.clusters) == k
    assert all(len(c) < n for c in p.clusters)
    assert len(p.scores) == len(p.nonempty())


def test_heuristic_is_deterministic():
    m = random_fitted_model(7, 2)
    g = compute_gramians(m)
    a, b = multiway_partition(m, g, 3), multiway_partition(m, g, 3)
    assert a.clusters == b.clusters and a.history == b.history


def test_invalid_k():
    m, g = identity_setup(3)
    for k in (1, 4):
        with pytest.raises(PartitionError):
            multiway_partition(m, g, k)
        with pytest.raises(PartitionError):
            brute_force_partition(m, g, k)


def test_adjacency_restricts_alignments():
    m, g = identity_setup(4)
    adj = np.zeros((4, 4), dtype=bool)
    for i, j in ((0, 3), (1, 2)):
        adj[i, j] = adj[j, i] = True
    p = multiway_partition(m, g, 2, adjacency=adj)
    assert p.clusters == [(0, 3), (1, 2)]
    assert not any(h["fallback"] for h in p.history)


def test_adjacency_fallback_is_recorded():
    m, g = identity_setup(4)
    p = multiway_partition(m, g, 2, adjacency=np.eye(4, dtype=bool))
    assert p.is_valid(4)
    assert p.history[-1]["fallback"]


def test_units_partition_groups():
    m = random_fitted_model(6, 9)
    g = compute_gramians(m)
    units = [(0, 3), (1, 4), (2, 5)]
    p = multiway_partition(m, g, 2, units=units)
    assert p.is_valid(3)
    assert sorted(i for c in p.state_clusters() for i in c) == list(range(6))


# -- oracle -------------------------------------------------------------------------------

def test_oracle_three_states_tie_break():
    m, g = identity_setup(3)
    for obj in ("spread", "maximin"):
        assert brute_force_partition(m, g, 2, objective=obj).clusters == [(0, 1), (2,)]


def test_oracle_discrete_partition():
    m, g = identity_setup(4)
    p = brute_force_partition(m, g, 4)
    assert p.clusters == [(0,), (1,), (2,), (3,)]
    assert p.stats["enumerated"] == 1


def test_oracle_at_most_k_may_use_fewer_blocks():
    m, g = identity_setup(4)
    p = brute_force_partition(m, g, 4, exact_k=False)
    assert p.clusters == [(0, 1), (2, 3), (), ()]
    assert p.objective_spread == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_oracle_dominates_heuristic(seed):
    m = random_fitted_model(6, 100 + seed)
    g = compute_gramians(m)
    ev = KappaEvaluator(m, g)
    h = multiway_partition(m, g, 2, evaluator=ev)
    # the heuristic may leave slots empty, so compare with the at-most-k oracle
    assert brute_force_partition(m, g, 2, evaluator=ev, exact_k=False).objective_spread \
        <= h.objective_spread + 1e-12
    assert brute_force_partition(m, g, 2, objective="maximin", evaluator=ev,
                                 exact_k=False).objective_maximin >= h.objective_maximin - 1e-12


def test_oracle_guard():
    m, g = identity_setup(6)
    with pytest.raises(OracleTooLargeError, match="too large"):
        brute_force_partition(m, g, 3, limit=50)


def test_oracle_matches_explicit_search():
    m = random_fitted_model(5, 11)
    g = compute_gramians(m)
    ev = KappaEvaluator(m, g)
    best = min(objective_spread([ev.kappa(S), ev.kappa(tuple(i for i in range(5) if i not in S))])
               for r in range(1, 5) for S in itertools.combinations(range(5), r))
    assert brute_force_partition(m, g, 2, evaluator=ev).objective_spread == pytest.approx(best, rel=1e-14)


# -- reports ----------------------------------------------------------------------------

def test_reports(tmp_path):
    m = random_fitted_model(5, 12)
    p = multiway_partition(m, compute_gramians(m), 3)
    p.save_json(tmp_path / "p.json")
    p.save_csv(tmp_path / "p.csv")
    obj = json.loads((tmp_path / "p.json").read_text())
    assert sorted(s for c in obj["clusters"] for s in c["states"]) == list(range(5))
    assert obj["objective_spread"] == pytest.approx(p.objective_spread, rel=1e-11)
    assert len(obj["merge_history"]) == 4
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "cluster,units,states,kappa_o,kappa_c,kappa" and len(lines) == 4
