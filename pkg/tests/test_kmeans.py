import itertools
import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from treeclust.bench import gen_synthetic, kmeanspp_baseline
from treeclust.config import KMeansConfig, TreeConfig, log2n
from treeclust.core import Dataset, RngStream, Solution
from treeclust.errors import ConfigError
from treeclust.kmeans import (
    WeightedCenters,
    dp_kmeans,
    dp_kmeans_exact,
    dp_kmeans_round,
    filter_instance,
    reverse_greedy,
    weighted_centers,
)
from treeclust.privacy import PrivacyBudget
from treeclust.quadtree import ROOT, Quadtree, badly_cut_centers, tree_metric_cost

SHALLOW = KMeansConfig(tree=TreeConfig(max_depth=20))


def _harmonic(k: int) -> float:
    return sum(1 / i for i in range(1, k + 1))


def test_filter_instance_partitions_points(blobs_2d: Dataset) -> None:
    L = Solution.evaluate(blobs_2d, blobs_2d.points[:6], 2)
    tree = Quadtree(2, blobs_2d.n, RngStream(0), max_depth=20)
    filtered = filter_instance(blobs_2d, L, tree, KMeansConfig())
    assert filtered.bad_centers.shape == (len(filtered.bad_indices), 2)
    both = np.sort(np.concatenate([filtered.provenance, filtered.removed]))
    assert np.array_equal(both, np.arange(blobs_2d.n))
    assert filtered.data.n == filtered.provenance.shape[0]


def test_filter_instance_drops_every_badly_cut_cluster(blobs_2d: Dataset) -> None:
    cfg = KMeansConfig()
    tree = Quadtree(2, blobs_2d.n, RngStream(0))
    s = tree.split_value(tree.cell(ROOT))
    centers = np.array([[s + 1e-9, 0.0], [s - 1e-9, 0.0], [0.5, 0.5], [-0.5, -0.5]])
    L = Solution.evaluate(blobs_2d, centers, 2)
    filtered = filter_instance(blobs_2d, L, tree, cfg)
    assert {0, 1} <= set(filtered.bad_indices)
    assert filtered.bad_indices == tuple(sorted(badly_cut_centers(tree, centers, cfg.alpha_f(blobs_2d.n))))
    assert np.array_equal(filtered.removed, np.nonzero(np.isin(L.assignment, filtered.bad_indices))[0])
    assert np.array_equal(filtered.bad_centers, centers[list(filtered.bad_indices)])


@pytest.mark.slow
def test_badly_cut_set_size_tracks_alpha_f() -> None:
    cfg = KMeansConfig(alpha=0.6, pi=0.2)
    gen = np.random.default_rng(11)
    data = Dataset.in_ball(gen.uniform(-0.6, 0.6, size=(1000, 2)))
    k = 10
    L = Solution.evaluate(data, gen.uniform(-0.6, 0.6, size=(k, 2)), 2)
    sizes = [len(filter_instance(data, L, Quadtree(2, data.n, RngStream(seed)), cfg).bad_indices) for seed in range(200)]
    top_level = Quadtree(2, data.n, RngStream(0)).top_level
    bound = 8 * (top_level + 1) / log2n(data.n) * cfg.alpha_f(data.n) * k
    assert sum(sizes) > 0
    assert np.mean(sizes) <= bound


def test_dp_kmeans_round_meta(blobs_2d: Dataset) -> None:
    L = Solution.evaluate(blobs_2d, np.zeros((1, 2)), 2)
    budget = PrivacyBudget(1.0)
    out = dp_kmeans_round(blobs_2d, L, 3, 0.5, RngStream(1), SHALLOW, budget=budget)
    assert out.power == 2
    assert out.k <= 3 + out.meta["bad_centers"]
    assert out.meta["filtered_n"] <= blobs_2d.n
    assert len(out.meta["cluster_weights"]) == out.k
    assert budget.entries() == (("kmeans.round.make_private", 0.25), ("kmeans.round.weights", 0.25))


def test_dp_kmeans_round_euclidean_cost_below_tree_metric(blobs_2d: Dataset) -> None:
    L = Solution.evaluate(blobs_2d, np.zeros((1, 2)), 2)
    rng = RngStream(6)
    out = dp_kmeans_round(blobs_2d, L, 4, math.inf, rng, SHALLOW)
    assert out.meta["bad_centers"] == 0
    tree = Quadtree(2, blobs_2d.n, rng.child("tree-shift"), max_depth=20)
    assert out.cost <= tree_metric_cost(tree, blobs_2d.points, out.centers, z=2) + 1e-12


@pytest.mark.parametrize("k", [2, 4])
def test_dp_kmeans_center_count_and_trace(blobs_2d: Dataset, k: int) -> None:
    sol = dp_kmeans(blobs_2d, k, 1.0, RngStream(3), SHALLOW)
    assert sol.k <= math.ceil(1.5 * k)
    trace = sol.meta["rounds"]
    assert len(trace) == log2n(blobs_2d.n) + 1
    assert trace[0].round == 0 and trace[0].centers == 1
    assert all(r.centers <= k + r.bad_centers for r in trace[1:])
    assert all(len(r.cluster_weights) == r.centers for r in trace[1:])
    assert math.fsum(eps for _, eps in sol.ledger) == pytest.approx(1.0)
    assert trace[-1].epsilon_spent == pytest.approx(1.0)
    labels = [label for label, _ in sol.ledger]
    assert labels[:2] == ["kmeans.round1.make_private", "kmeans.round1.weights"]


@pytest.mark.slow
def test_dp_kmeans_cost_decreases_geometrically() -> None:
    data = gen_synthetic("blobs", 500, 2, {"centers": 4, "sigma": 0.02}, RngStream(8)).data
    k = 4
    slack = 10 * 2**1.5 * log2n(data.n)
    holds = 0
    for seed in range(10):
        trace = dp_kmeans(data, k, math.inf, RngStream(seed), SHALLOW).meta["rounds"]
        opt = kmeanspp_baseline(data, k, 10, RngStream(seed)).cost
        costs = [r.cost for r in trace]
        first_halves = costs[1] <= costs[0] / 2
        holds += first_halves and all(b <= a / 2 + slack * opt for a, b in itertools.pairwise(costs))
    assert holds >= 8


def test_dp_kmeans_one_mean_init(blobs_2d: Dataset) -> None:
    cfg = KMeansConfig(init="one_mean", tree=TreeConfig(max_depth=20))
    sol = dp_kmeans(blobs_2d, 2, 1.0, RngStream(3), cfg)
    assert sol.ledger[0][0] == "kmeans.init.one_mean"
    assert math.fsum(eps for _, eps in sol.ledger) == pytest.approx(1.0)


def test_dp_kmeans_rejects_bad_k(blobs_2d: Dataset) -> None:
    with pytest.raises(ConfigError):
        dp_kmeans(blobs_2d, 0, 1.0, RngStream(0))


def test_reverse_greedy_identity_when_small(blobs_2d: Dataset) -> None:
    centers = blobs_2d.points[:2]
    out = reverse_greedy(blobs_2d, centers, 3, 1.0, RngStream(0))
    assert out.meta["kept_indices"] == [0, 1]
    assert np.array_equal(out.centers, centers)


def test_reverse_greedy_subset_and_bound() -> None:
    gen = np.random.default_rng(5)
    locations = gen.uniform(-0.8, 0.8, size=(40, 2))
    candidates = locations[gen.choice(40, size=8, replace=False)]
    source = WeightedCenters(locations, np.ones(40))
    k = 3
    out = reverse_greedy(source, candidates, k, math.inf, RngStream(0))
    assert out.k == k
    assert len(set(out.meta["kept_indices"])) == k
    assert set(out.meta["kept_indices"]) <= set(range(8))
    dist = cdist(locations, candidates, "sqeuclidean")
    best = min(dist[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(8), k))
    assert out.cost <= 2 * _harmonic(k) * best + 1e-12


def test_reverse_greedy_within_harmonic_factor_on_random_instances() -> None:
    gen = np.random.default_rng(17)
    for _ in range(50):
        m, size, k = int(gen.integers(5, 41)), int(gen.integers(5, 9)), int(gen.integers(2, 4))
        locations = gen.uniform(-0.8, 0.8, size=(m, 2))
        candidates = gen.uniform(-0.8, 0.8, size=(size, 2))
        weights = gen.uniform(0.5, 3.0, size=m)
        out = reverse_greedy(WeightedCenters(locations, weights), candidates, k, math.inf, RngStream(0))
        dist = cdist(locations, candidates, "sqeuclidean")
        best = min(
            math.fsum(weights * dist[:, list(c)].min(axis=1)) for c in itertools.combinations(range(size), k)
        )
        assert out.k == k
        assert out.cost <= 2 * _harmonic(k) * best + 1e-12


def test_weighted_centers_counts_without_noise(blobs_2d: Dataset) -> None:
    centers = blobs_2d.points[:5]
    weighted = weighted_centers(blobs_2d, centers, math.inf, np.random.default_rng(0))
    assert weighted.weights.sum() == blobs_2d.n
    noisy = WeightedCenters(centers, np.array([-1.0, 2.0, 0.5, 0.0, 3.0]))
    assert noisy.multiplicities.tolist() == [0.0, 2.0, 0.5, 0.0, 3.0]


def test_reverse_greedy_charges_budget(blobs_2d: Dataset) -> None:
    budget = PrivacyBudget(1.0)
    out = reverse_greedy(blobs_2d, blobs_2d.points[:6], 2, 0.5, RngStream(1), budget=budget)
    assert out.k == 2
    assert out.ledger == (("reverse_greedy.weights", 0.5),)


@pytest.mark.slow
def test_dp_kmeans_exact_noise_disabled_quality(blobs_2d: Dataset) -> None:
    k = 4
    ratios = []
    for seed in range(10):
        sol = dp_kmeans_exact(blobs_2d, k, math.inf, RngStream(seed), SHALLOW)
        assert sol.k == k
        ratios.append(sol.cost / kmeanspp_baseline(blobs_2d, k, 10, RngStream(seed)).cost)
    assert np.median(ratios) <= 5


def test_dp_kmeans_exact_ledger(blobs_2d: Dataset) -> None:
    sol = dp_kmeans_exact(blobs_2d, 2, 1.0, RngStream(4), SHALLOW)
    assert sol.k <= 2
    assert math.fsum(eps for _, eps in sol.ledger) == pytest.approx(1.0)
    assert sol.ledger[-1][0] == "reverse_greedy.weights"
