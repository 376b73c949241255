"""Private k-median on the noisy quadtree, JL reduction and project-back."""

import math
from dataclasses import dataclass, field

import numpy as np

from treeclust.config import KMedianConfig, OneMedianConfig, ProjectBackConfig, check_epsilon, log2n
from treeclust.core import Dataset, RngStream, Solution, clamp_to_ball, clustering_cost, normalize
from treeclust.errors import ConfigError, DataError
from treeclust.log_utils import get_logger
from treeclust.privacy import NoisyWeights, PrivacyBudget, laplace_sample, make_private, solve_one_median
from treeclust.quadtree import ROOT, Quadtree

logger = get_logger("treeclust.kmedian")

_JL_BLOCK = 512


def base_cost(weight: float | None, diam: float, z: int) -> float:
    """Cost of serving a cell from outside it: max(w, 0)·diam^z."""
    if weight is None or weight <= 0:
        return 0.0
    return weight * diam**z


def leaf_values(weight: float | None, diam: float, z: int, k: int) -> np.ndarray:
    v = np.zeros(k + 1)
    v[0] = base_cost(weight, diam, z)
    return v


def combine_children(v1: np.ndarray, v2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Min-plus convolution for k' ≥ 1; entry 0 is left for the caller."""
    sums = np.add.outer(v1, v2)[:, ::-1]
    v = np.zeros(k + 1)
    split = np.zeros(k + 1, dtype=np.int64)
    for kp in range(1, k + 1):
        diag = np.diagonal(sums, offset=k - kp)
        i = int(np.argmin(diag))
        v[kp] = diag[i]
        split[kp] = i
    return v, split


@dataclass
class DpTable:
    k: int
    z: int
    values: dict[int, np.ndarray] = field(default_factory=dict)
    splits: dict[int, np.ndarray | None] = field(default_factory=dict)
    root_id: int = ROOT

    @property
    def root_value(self) -> float:
        return float(self.values[self.root_id][self.k])


def solve_subtree(tree: Quadtree, w: NoisyWeights, start: int, k: int, z: int, table: DpTable) -> None:
    """Post-order DP over the expanded cells under `start`, filling `table`."""
    stack = [(start, False)]
    while stack:
        cid, ready = stack.pop()
        cell = tree.cell(cid)
        if not w.is_expanded(cid):
            table.values[cid] = leaf_values(w.weight(cid), cell.diam, z, k)
            table.splits[cid] = None
            continue
        lower, upper = cell.children
        if ready:
            v, split = combine_children(table.values[lower], table.values[upper], k)
            v[0] = base_cost(w.weight(cid), cell.diam, z)
            table.values[cid] = v
            table.splits[cid] = split
        else:
            stack.extend([(cid, True), (upper, False), (lower, False)])


def share_pending(pending: float, k1: int, k2: int, v1_zero: float, v2_zero: float) -> tuple[float, float]:
    """Split attributed cost between children; a center-free child bills its sibling."""
    if k1 == 0:
        return 0.0, pending + v1_zero
    if k2 == 0:
        return pending + v2_zero, 0.0
    kp = k1 + k2
    return pending * k1 / kp, pending * k2 / kp


def extract(
    table: DpTable, tree: Quadtree, k: int | None = None, pending: float = 0.0
) -> list[tuple[int, int, float]]:
    """Backpointer walk: (leaf cell id, copies, attributed cost per copy) in depth-first order.

    `pending` is cost already billed to the subtree root by its ancestors.
    """
    k = table.k if k is None else k
    out = []
    stack = [(table.root_id, k, pending)]
    while stack:
        cid, kp, pending = stack.pop()
        if kp == 0:
            continue
        split = table.splits[cid]
        if split is None:
            out.append((cid, kp, pending / kp))
            continue
        lower, upper = tree.cell(cid).children
        k1 = int(split[kp])
        p1, p2 = share_pending(pending, k1, kp - k1, table.values[lower][0], table.values[upper][0])
        stack.append((upper, kp - k1, p2))
        stack.append((lower, k1, p1))
    return out


def placement_centers(tree: Quadtree, placement: list[tuple[int, int, float]]) -> tuple[np.ndarray, np.ndarray]:
    centers = [tree.cell(cid).center for cid, copies, _ in placement for _ in range(copies)]
    costs = [each for _, copies, each in placement for _ in range(copies)]
    return np.array(centers).reshape(-1, tree.d), np.array(costs)


def tree_dp_cost(tree: Quadtree, w: NoisyWeights, placement: dict[int, int], z: int) -> float:
    """Objective of a leaf placement, summed in the same order as the DP."""
    inside: dict[int, int] = {}
    for cid, copies in placement.items():
        c = cid
        while c >= ROOT:
            inside[c] = inside.get(c, 0) + copies
            c >>= 1

    def cost(cid: int) -> float:
        if not inside.get(cid):
            return base_cost(w.weight(cid), tree.cell(cid).diam, z)
        if not w.is_expanded(cid):
            return 0.0
        lower, upper = tree.cell(cid).children
        return cost(lower) + cost(upper)

    return cost(ROOT)


def dp_leaves(tree: Quadtree, w: NoisyWeights) -> list[int]:
    """Cells where the DP stops: unexpanded cells reachable from the root."""
    out, stack = [], [ROOT]
    while stack:
        cid = stack.pop()
        if w.is_expanded(cid):
            stack.extend(tree.cell(cid).children)
        else:
            out.append(cid)
    return sorted(out)


def dp_solve(t: Quadtree, w: NoisyWeights, k: int, z: int = 1) -> tuple[DpTable, Solution]:
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    table = DpTable(k, z)
    solve_subtree(t, w, ROOT, k, z, table)
    centers, costs = placement_centers(t, extract(table, t))
    value = table.root_value
    return table, Solution(centers, power=z, cost=value, tree_cost=value, center_costs=costs)


def dp_kmedian(
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    config: KMedianConfig | None = None,
    *,
    budget: PrivacyBudget | None = None,
    z: int = 1,
) -> Solution:
    config = config or KMedianConfig()
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    check_epsilon(epsilon)
    budget = budget or PrivacyBudget(epsilon)
    tree = Quadtree.for_dataset(data, rng.child("tree-shift"), config.tree.resolve_max_depth(data.d))
    weights = make_private(tree, data, budget, rng.child("laplace"), epsilon=epsilon, config=config.tree)
    _, tree_solution = dp_solve(tree, weights, k, z)
    logger.debug("dp_kmedian n=%d d=%d k=%d tree_cost=%.6g", data.n, data.d, k, tree_solution.tree_cost)
    return Solution.evaluate(
        data,
        tree_solution.centers,
        z,
        tree_cost=tree_solution.tree_cost,
        center_costs=tree_solution.center_costs,
        ledger=budget.entries(),
    )


def jl_target_dim(k: int) -> int:
    return math.ceil(4 * math.log2(k + 2))


@dataclass(frozen=True)
class JlProjection:
    """Gaussian projection plus the renormalization applied after it; matrix None is the identity."""

    source_dim: int
    target_dim: int
    matrix: np.ndarray | None = None
    shift: np.ndarray | None = None
    scale: float = 1.0

    @property
    def identity(self) -> bool:
        return self.matrix is None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Row-by-row products, so a row's image does not depend on which rows share the call."""
        x = np.asarray(x, dtype=np.float64)
        if self.matrix is None:
            return x
        x = x.reshape(-1, self.source_dim)
        out = np.empty((x.shape[0], self.target_dim))
        for start in range(0, x.shape[0], _JL_BLOCK):
            block = x[start : start + _JL_BLOCK]
            out[start : start + _JL_BLOCK] = (block[:, None, :] * self.matrix[None, :, :]).sum(axis=-1)
        return out

    def lift(self, y: np.ndarray) -> np.ndarray:
        """Minimum-norm preimage of normalized projected points."""
        y = np.asarray(y, dtype=np.float64)
        if self.matrix is None:
            return y
        raw = y / self.scale + self.shift
        return raw @ np.linalg.pinv(self.matrix).T


def jl_matrix(source_dim: int, target_dim: int, rng: RngStream) -> np.ndarray:
    return rng.generator().normal(size=(target_dim, source_dim)) / math.sqrt(target_dim)


def jl_project(data: Dataset, k: int, rng: RngStream, target_dim: int | None = None) -> tuple[Dataset, JlProjection]:
    target = target_dim or jl_target_dim(k)
    if data.d <= target:
        return data, JlProjection(data.d, data.d)
    matrix = jl_matrix(data.d, target, rng)
    projected = normalize(JlProjection(data.d, target, matrix).apply(data.points), data.lam)
    logger.debug("jl_project d=%d target=%d scale=%.6g", data.d, target, projected.scale)
    return projected, JlProjection(data.d, target, matrix, projected.shift, projected.scale)


@dataclass
class RingSample:
    anchor: np.ndarray
    delta: float
    omega: np.ndarray
    multiplicity: int
    ring_index: np.ndarray
    ring_counts: np.ndarray
    kept: np.ndarray
    beyond: int
    t: int
    d_close: float
    r_small: float

    @property
    def n_rings(self) -> int:
        return self.ring_counts.shape[0]

    def survivors(self) -> np.ndarray:
        inside = (self.ring_index >= 1) & (self.ring_index <= self.n_rings)
        keep = inside.copy()
        keep[inside] = self.kept[self.ring_index[inside] - 1]
        anchors = np.repeat(self.anchor[None, :], self.multiplicity, axis=0)
        return np.vstack([anchors, self.omega[keep]])


def sample_indices(size: int, t: int, gen: np.random.Generator) -> np.ndarray:
    if t >= size:
        return np.arange(size)
    return np.sort(gen.choice(size, size=t, replace=False))


def ring_of(dist: np.ndarray, delta: float, n_rings: int) -> np.ndarray:
    """0 below Δ, i on (2^iΔ, 2^{i+1}Δ] with [Δ, 2Δ] folded into 1, n_rings + 1 past the last ring."""
    ring = np.zeros(dist.shape[0], dtype=np.int64)
    far = dist >= delta
    ring[far] = np.maximum(np.ceil(np.log2(dist[far] / delta)).astype(np.int64) - 1, 1)
    return np.minimum(ring, n_rings + 1)


def ring_sample(
    omega: np.ndarray,
    cluster_size: int,
    apx_median: np.ndarray,
    apx_cost: float,
    params: ProjectBackConfig,
    alpha_apx: float,
    eps_rings: float,
    gen: np.random.Generator,
) -> RingSample:
    """Merge Ω-points near the anchor and drop sparse distance rings."""
    anchor = np.asarray(apx_median, dtype=np.float64)
    delta = params.d_close / alpha_apx * apx_cost / cluster_size
    n_rings = max(1, math.ceil(math.log2(max(cluster_size * alpha_apx, 2))))
    r_small = params.r_small or 1 / (8 * n_rings)
    if delta > 0:
        ring = ring_of(np.linalg.norm(omega - anchor, axis=1), delta, n_rings)
        multiplicity = int((ring == 0).sum())
        beyond = int((ring > n_rings).sum())
        counts = np.bincount(ring, minlength=n_rings + 2)[1 : n_rings + 1]
        noise = laplace_sample(1 / eps_rings, gen, size=n_rings, enabled=not math.isinf(eps_rings))
        kept = counts >= r_small * omega.shape[0] + noise
    else:
        ring = np.ones(omega.shape[0], dtype=np.int64)
        multiplicity = beyond = 0
        counts = np.array([omega.shape[0]])
        kept = np.ones(1, dtype=bool)
    if beyond:
        logger.debug("ring_sample dropped points past the last ring beyond=%d", beyond)
    return RingSample(
        anchor, delta, omega, multiplicity, ring, counts, kept, beyond, omega.shape[0], params.d_close, r_small
    )


def estimate_anchor(
    omega: np.ndarray,
    cluster_size: int,
    epsilon: float,
    rng: RngStream,
    one_median: OneMedianConfig | None = None,
    lam: float = 1.0,
) -> tuple[np.ndarray, float]:
    """Private first-pass median of Ω and the cluster's cost at it, scaled up from the sample."""
    half = epsilon / 2
    anchor = solve_one_median(omega, half, rng.child("median").generator(), one_median, lam).point
    total = math.fsum(np.linalg.norm(omega - anchor, axis=1))
    total += laplace_sample(2 * lam / half, rng.child("cost").generator(), enabled=not math.isinf(half))
    return anchor, max(total, 0.0) * cluster_size / omega.shape[0]


def anchor_epsilon(epsilon: float, params: ProjectBackConfig) -> float:
    return epsilon * params.anchor_share


def median_from_sample(
    omega: np.ndarray,
    cluster_size: int,
    apx_median: np.ndarray | None,
    apx_cost: float | None,
    params: ProjectBackConfig,
    epsilon: float,
    rng: RngStream,
    *,
    alpha_apx: float = 1.0,
    one_median: OneMedianConfig | None = None,
    lam: float = 1.0,
) -> tuple[np.ndarray, RingSample]:
    """Rings and median on Ω; without an anchor, part of ε first estimates one in the sample's space."""
    if apx_median is None:
        eps_anchor = anchor_epsilon(epsilon, params)
        apx_median, apx_cost = estimate_anchor(omega, cluster_size, eps_anchor, rng.child("anchor"), one_median, lam)
        epsilon = epsilon - eps_anchor if not math.isinf(epsilon) else epsilon
    gen = rng.child("rings").generator()
    sample = ring_sample(omega, cluster_size, apx_median, apx_cost, params, alpha_apx, epsilon / 2, gen)
    survivors = sample.survivors()
    if survivors.shape[0] == 0:
        logger.debug("project_back all rings dropped, returning anchor")
        return clamp_to_ball(sample.anchor, lam), sample
    result = solve_one_median(survivors, epsilon / 2, rng.child("one-median").generator(), one_median, lam)
    return result.point, sample


def project_back(
    cluster: np.ndarray,
    apx_median: np.ndarray | None,
    apx_cost: float | None,
    params: ProjectBackConfig | None,
    epsilon: float,
    rng: RngStream,
    *,
    alpha_apx: float = 1.0,
    one_median: OneMedianConfig | None = None,
    lam: float = 1.0,
    budget: PrivacyBudget | None = None,
) -> np.ndarray:
    """Private 1-median of a cluster from a ring-filtered uniform sample around an anchor.

    With apx_median None the anchor and its cost are estimated privately from the
    sample, spending params.anchor_share of ε.
    """
    params = params or ProjectBackConfig()
    cluster = np.asarray(cluster, dtype=np.float64)
    if cluster.ndim != 2 or cluster.shape[0] == 0:
        raise DataError("empty dataset")
    if (apx_median is None) != (apx_cost is None):
        raise ConfigError("apx_median and apx_cost must be given together")
    if apx_cost is not None and apx_cost < 0:
        raise ConfigError(f"apx_cost must be >= 0, got {apx_cost}")
    check_epsilon(epsilon)
    if budget is not None:
        rest = epsilon
        if apx_median is None:
            rest -= budget.charge("project_back.anchor", anchor_epsilon(epsilon, params))
        budget.charge("project_back.rings", rest / 2, "parallel")
        budget.charge("project_back.median", rest / 2)
    idx = sample_indices(cluster.shape[0], params.resolve_t(cluster.shape[0]), rng.child("omega").generator())
    point, _ = median_from_sample(
        cluster[idx],
        cluster.shape[0],
        apx_median,
        apx_cost,
        params,
        epsilon,
        rng,
        alpha_apx=alpha_apx,
        one_median=one_median,
        lam=lam,
    )
    return point


def alpha_apx_for(target_dim: int, n: int) -> float:
    return target_dim**1.5 * log2n(n)


def cluster_epsilon(config: KMedianConfig, eps_back: float, clusters: int) -> float:
    """Per-cluster project-back budget: all of eps_back on disjoint clusters, or an even share."""
    if config.back_composition == "sequential":
        return eps_back / clusters
    return eps_back


def charge_project_back(budget: PrivacyBudget, config: KMedianConfig, eps: float, clusters: int) -> None:
    if config.back_composition == "sequential":
        for j in range(clusters):
            budget.charge(f"project_back.cluster{j}", eps)
    else:
        budget.charge_parallel("project_back", [eps] * clusters)


def tree_anchor(
    projection: JlProjection, centers: np.ndarray, center_costs: np.ndarray, j: int, n: int
) -> tuple[np.ndarray | None, float | None, float]:
    """Anchor, cost and approximation factor handed to project-back for cluster j.

    Without a projection these are the tree center, its attributed cost and the
    tree distortion. After a projection no anchor is passed; the one estimated from
    the sample is a 1-median and counts as factor 1.
    """
    if projection.identity:
        return centers[j], float(center_costs[j]), alpha_apx_for(projection.target_dim, n)
    return None, None, 1.0


def kmedian_high_dim(
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    config: KMedianConfig | None = None,
) -> Solution:
    config = config or KMedianConfig()
    check_epsilon(epsilon)
    budget = PrivacyBudget(epsilon)
    eps_tree = epsilon * config.tree_share
    eps_back = epsilon - eps_tree if not math.isinf(epsilon) else math.inf
    projected, projection = jl_project(data, k, rng.child("jl"), config.jl_dim)
    low = dp_kmedian(projected, k, eps_tree, rng, config, budget=budget)
    eps_cluster = cluster_epsilon(config, eps_back, low.k)
    centers = np.empty((low.k, data.d))
    for j in range(low.k):
        members = data.points[low.assignment == j]
        if members.shape[0] == 0:
            centers[j] = clamp_to_ball(projection.lift(low.centers[j]).reshape(data.d), data.lam)
            continue
        anchor, apx_cost, alpha_apx = tree_anchor(projection, low.centers, low.center_costs, j, data.n)
        centers[j] = project_back(
            members,
            anchor,
            apx_cost,
            config.project_back,
            eps_cluster,
            rng.child(f"project-back/{j}"),
            alpha_apx=alpha_apx,
            one_median=config.one_median,
            lam=data.lam,
        )
    charge_project_back(budget, config, eps_cluster, low.k)
    logger.debug("kmedian_high_dim d=%d target=%d k=%d", data.d, projection.target_dim, k)
    return Solution.evaluate(data, centers, 1, tree_cost=low.tree_cost, ledger=budget.entries())
