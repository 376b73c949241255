"""Private k-means: badly-cut filtering, iterated tree DP and reverse-greedy reduction."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from treeclust.config import KMeansConfig, check_epsilon, log2n
from treeclust.core import Dataset, RngStream, Solution, clustering_cost
from treeclust.errors import ConfigError
from treeclust.kmedian import dp_solve
from treeclust.log_utils import get_logger
from treeclust.models import KMeansRoundRecord
from treeclust.privacy import PrivacyBudget, dp_one_mean, laplace_sample, make_private
from treeclust.quadtree import Quadtree, badly_cut_centers

logger = get_logger("treeclust.kmeans")


@dataclass(frozen=True)
class FilteredInstance:
    data: Dataset
    bad_centers: np.ndarray
    bad_indices: tuple[int, ...]
    provenance: np.ndarray
    removed: np.ndarray


@dataclass(frozen=True)
class WeightedCenters:
    locations: np.ndarray
    weights: np.ndarray

    @property
    def multiplicities(self) -> np.ndarray:
        return np.maximum(self.weights, 0.0)


def filter_instance(data: Dataset, L: Solution, t: Quadtree, cfg: KMeansConfig) -> FilteredInstance:
    """Drop the cluster of every badly-cut center of L."""
    centers = L.centers
    bad = sorted(badly_cut_centers(t, centers, cfg.alpha_f(t.n)))
    _, assignment = clustering_cost(data, centers, 2)
    keep = ~np.isin(assignment, bad)
    provenance = np.nonzero(keep)[0]
    return FilteredInstance(
        data=data.subset(provenance),
        bad_centers=centers[bad].reshape(-1, data.d),
        bad_indices=tuple(bad),
        provenance=provenance,
        removed=np.nonzero(~keep)[0],
    )


def dp_kmeans_round(
    data: Dataset,
    L: Solution,
    k: int,
    epsilon: float,
    rng: RngStream,
    cfg: KMeansConfig | None = None,
    *,
    budget: PrivacyBudget | None = None,
    label: str = "kmeans.round",
) -> Solution:
    """One round: half of ε to the tree weights on P_T, half to the noisy sizes of S ∪ B_T."""
    cfg = cfg or KMeansConfig()
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    budget = budget or PrivacyBudget(epsilon)
    half = epsilon / 2
    tree = Quadtree(data.d, data.n, rng.child("tree-shift"), data.lam, cfg.tree.resolve_max_depth(data.d))
    filtered = filter_instance(data, L, tree, cfg)
    tree_cost = None
    if filtered.data.n == 0:
        budget.charge(f"{label}.make_private", half)
        centers = filtered.bad_centers
    else:
        tree.attach(filtered.data.points)
        weights = make_private(
            tree, filtered.data, budget, rng.child("laplace"), epsilon=half, config=cfg.tree, label=f"{label}.make_private"
        )
        _, tree_solution = dp_solve(tree, weights, k, z=2)
        tree_cost = tree_solution.tree_cost
        centers = np.vstack([tree_solution.centers, filtered.bad_centers])
    budget.charge(f"{label}.weights", half)
    sizes = weighted_centers(data, centers, half, rng.child("weights").generator())
    return Solution.evaluate(
        data,
        centers,
        2,
        tree_cost=tree_cost,
        ledger=budget.entries(),
        meta={
            "bad_centers": len(filtered.bad_indices),
            "filtered_n": filtered.data.n,
            "cluster_weights": sizes.weights.tolist(),
        },
    )


def dp_kmeans(
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    cfg: KMeansConfig | None = None,
    *,
    budget: PrivacyBudget | None = None,
) -> Solution:
    """Iterated rounds starting from a single center; each round returns at most k + |B_T| centers."""
    cfg = cfg or KMeansConfig()
    check_epsilon(epsilon)
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    budget = budget or PrivacyBudget(epsilon)
    rounds = log2n(data.n)
    shares = rounds + 1 if cfg.init == "one_mean" else rounds
    eps_round = epsilon / shares
    if cfg.init == "one_mean":
        budget.charge("kmeans.init.one_mean", eps_round)
        start = dp_one_mean(data.points, eps_round, data.lam, rng.child("init").generator())
    else:
        start = np.zeros(data.d)
    L = Solution.evaluate(data, start[None, :], 2)
    trace = [KMeansRoundRecord(round=0, centers=L.k, bad_centers=0, tree_cost=None, cost=L.cost, epsilon_spent=budget.spent)]
    for i in range(1, rounds + 1):
        L = dp_kmeans_round(data, L, k, eps_round, rng.child(f"round-{i}"), cfg, budget=budget, label=f"kmeans.round{i}")
        trace.append(
            KMeansRoundRecord(
                round=i,
                centers=L.k,
                bad_centers=L.meta["bad_centers"],
                tree_cost=L.tree_cost,
                cost=L.cost,
                epsilon_spent=budget.spent,
                cluster_weights=L.meta["cluster_weights"],
            )
        )
        logger.debug("dp_kmeans round=%d centers=%d bad=%d cost=%.6g", i, L.k, L.meta["bad_centers"], L.cost)
    return Solution(
        L.centers,
        power=2,
        cost=L.cost,
        assignment=L.assignment,
        tree_cost=L.tree_cost,
        ledger=budget.entries(),
        meta={"rounds": trace},
    )


def weighted_centers(data: Dataset, centers: np.ndarray, epsilon: float, gen: np.random.Generator, z: int = 2):
    _, assignment = clustering_cost(data, centers, z)
    sizes = np.bincount(assignment, minlength=centers.shape[0]).astype(np.float64)
    noise = laplace_sample(1 / epsilon, gen, size=centers.shape[0], enabled=not math.isinf(epsilon))
    return WeightedCenters(np.asarray(centers, dtype=np.float64), sizes + noise)


def _weighted_cost(dist: np.ndarray, mult: np.ndarray, columns: list[int]) -> float:
    return math.fsum(mult * dist[:, columns].min(axis=1))


def reverse_greedy(
    source: Dataset | WeightedCenters,
    S: Solution | np.ndarray,
    k: int,
    epsilon: float,
    rng: RngStream,
    *,
    z: int = 2,
    budget: PrivacyBudget | None = None,
) -> Solution:
    """Drop the center whose removal raises the weighted cost least until k remain."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    check_epsilon(epsilon)
    centers = S.centers if isinstance(S, Solution) else np.asarray(S, dtype=np.float64)
    if centers.shape[0] <= k:
        chosen = list(range(centers.shape[0]))
    else:
        if isinstance(source, WeightedCenters):
            instance = source
        else:
            if budget is not None:
                budget.charge("reverse_greedy.weights", epsilon)
            instance = weighted_centers(source, centers, epsilon, rng.child("weights").generator(), z)
        dist = cdist(instance.locations, centers, "euclidean" if z == 1 else "sqeuclidean")
        mult = instance.multiplicities
        chosen = list(range(centers.shape[0]))
        while len(chosen) > k:
            best, best_cost = None, math.inf
            for c in chosen:
                cost = _weighted_cost(dist, mult, [o for o in chosen if o != c])
                if cost < best_cost:
                    best, best_cost = c, cost
            chosen.remove(best)
    kept = centers[chosen]
    meta = {"kept_indices": chosen}
    if isinstance(source, Dataset):
        return Solution.evaluate(source, kept, z, ledger=budget.entries() if budget else (), meta=meta)
    dist = cdist(source.locations, kept, "euclidean" if z == 1 else "sqeuclidean")
    cost = math.fsum(source.multiplicities * dist.min(axis=1))
    return Solution(kept, power=z, cost=cost, meta=meta)


def dp_kmeans_exact(
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    cfg: KMeansConfig | None = None,
) -> Solution:
    """Exactly k centers: half the budget to the rounds, half to the reverse-greedy weights."""
    check_epsilon(epsilon)
    budget = PrivacyBudget(epsilon)
    half = epsilon / 2
    many = dp_kmeans(data, k, half, rng.child("rounds"), cfg, budget=budget)
    if many.k <= k:
        budget.charge("reverse_greedy.weights", half)
    out = reverse_greedy(data, many, k, half, rng.child("reverse-greedy"), z=2, budget=budget)
    return Solution(
        out.centers,
        power=2,
        cost=out.cost,
        assignment=out.assignment,
        tree_cost=many.tree_cost,
        ledger=budget.entries(),
        meta={"rounds": many.meta["rounds"], "before_reduction": many.k},
    )
