"""Laplace mechanism, privatized tree weights, budget ledger and private 1-center solvers."""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from treeclust.config import OneMedianConfig, TreeConfig, check_epsilon
from treeclust.core import Dataset, RngStream, clamp_to_ball
from treeclust.errors import BudgetExhaustedError, ConfigError, DataError
from treeclust.log_utils import get_logger
from treeclust.quadtree import ROOT, Cell, Quadtree

logger = get_logger("treeclust.privacy")

_SLACK = 1e-9


@dataclass(frozen=True)
class LedgerEntry:
    label: str
    epsilon: float
    composition: Literal["sequential", "parallel"] = "sequential"


class PrivacyBudget:
    """ε ledger; an infinite ε means noise-disabled mode."""

    def __init__(self, epsilon: float):
        self.epsilon = check_epsilon(float(epsilon))
        self.ledger: list[LedgerEntry] = []

    @property
    def noise_disabled(self) -> bool:
        return math.isinf(self.epsilon)

    @property
    def spent(self) -> float:
        return math.fsum(e.epsilon for e in self.ledger)

    @property
    def remaining(self) -> float:
        if self.noise_disabled:
            return math.inf
        return max(0.0, self.epsilon - self.spent)

    def charge(self, label: str, epsilon: float, composition: str = "sequential") -> float:
        check_epsilon(epsilon)
        if not self.noise_disabled and self.spent + epsilon > self.epsilon * (1 + _SLACK):
            raise BudgetExhaustedError(
                f"budget exhausted: {label} needs {epsilon:.6g}, remaining {self.remaining:.6g} of {self.epsilon:.6g}"
            )
        self.ledger.append(LedgerEntry(label, epsilon, composition))
        return epsilon

    def charge_parallel(self, label: str, epsilons: list[float]) -> float:
        """Mechanisms on disjoint data cost the max of their ε's."""
        return self.charge(label, max(epsilons), "parallel")

    def entries(self) -> tuple[tuple[str, float], ...]:
        return tuple((e.label, e.epsilon) for e in self.ledger)


def _laplace_from_uniform(b: float, u):
    return b * np.sign(u) * np.log(1 - 2 * np.abs(u))


def laplace_sample(b: float, rng: np.random.Generator, size: int | None = None, enabled: bool = True):
    """Laplace(b) draws by inverse CDF; zeros when noise is disabled."""
    if not enabled:
        return 0.0 if size is None else np.zeros(size)
    if not b > 0:
        raise ConfigError(f"Laplace scale must be > 0, got {b}")
    u = rng.random(size) - 0.5
    u = np.where(u == -0.5, 0.0, u)
    out = _laplace_from_uniform(b, u)
    return float(out) if size is None else out


def laplace_at(b: float, stream: RngStream, key: int, enabled: bool = True) -> float:
    """Keyed Laplace draw: depends only on (stream, key)."""
    if not enabled:
        return 0.0
    if not b > 0:
        raise ConfigError(f"Laplace scale must be > 0, got {b}")
    return float(_laplace_from_uniform(b, stream.uniform_at(key) - 0.5))


@dataclass
class NoisyWeights:
    weights: dict[int, float]
    expanded: set[int]
    threshold: float
    scale: float
    epsilon: float

    def weight(self, cell_id: int) -> float | None:
        return self.weights.get(cell_id)

    def is_expanded(self, cell_id: int) -> bool:
        return cell_id in self.expanded


@dataclass(frozen=True)
class NoiseParams:
    scale: float
    threshold: float
    stream: RngStream
    enabled: bool
    epsilon: float = math.inf


def weigh_cell(tree: Quadtree, cell: Cell, count: int, noise: NoiseParams) -> tuple[float | None, bool]:
    """Noisy weight of a popped cell and whether its children are enqueued."""
    if not tree.is_weighted(cell):
        return None, False
    w = count + laplace_at(noise.scale, noise.stream, cell.id, noise.enabled)
    return w, w > noise.threshold and cell.depth < tree.max_depth


def privatize_from(
    tree: Quadtree,
    start: int,
    noise: NoiseParams,
    count_of: Callable[[Cell], int] | None = None,
) -> tuple[dict[int, float], set[int]]:
    """Breadth-first weighting of the subtree under `start`."""
    count_of = count_of or (lambda c: c.true_count or 0)
    weights: dict[int, float] = {}
    expanded: set[int] = set()
    queue = deque([tree.cell(start)])
    while queue:
        cell = queue.popleft()
        w, expand = weigh_cell(tree, cell, count_of(cell), noise)
        if w is None:
            continue
        weights[cell.id] = w
        cell.weight = w
        if expand:
            expanded.add(cell.id)
            queue.extend(tree.children(cell.id))
    return weights, expanded


def noise_params(tree: Quadtree, epsilon: float, stream: RngStream, config: TreeConfig) -> NoiseParams:
    return NoiseParams(
        scale=config.noise_scale(tree.d, tree.n, epsilon, tree.max_depth),
        threshold=config.expansion_threshold(tree.d, tree.n, epsilon),
        stream=stream,
        enabled=not math.isinf(epsilon),
        epsilon=epsilon,
    )


def make_private(
    t: Quadtree,
    data: Dataset,
    budget: PrivacyBudget,
    rng: RngStream,
    *,
    epsilon: float | None = None,
    config: TreeConfig | None = None,
    label: str = "make_private",
) -> NoisyWeights:
    config = config or TreeConfig()
    if t.points is None or t.cells[ROOT].true_count is None:
        t.attach(data.points)
    eps = budget.remaining if epsilon is None else epsilon
    budget.charge(label, eps)
    noise = noise_params(t, eps, rng, config)
    weights, expanded = privatize_from(t, ROOT, noise)
    logger.debug(
        "make_private done cells=%d expanded=%d scale=%.4g threshold=%.4g",
        len(weights),
        len(expanded),
        noise.scale,
        noise.threshold,
    )
    return NoisyWeights(weights, expanded, noise.threshold, noise.scale, eps)


@dataclass
class AuditReport:
    checked: int = 0
    max_abs_delta: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def _full_counts(tree: Quadtree, points: np.ndarray) -> dict[int, int]:
    twin = tree.same_shift(points)
    twin.expand_nonempty()
    return twin.counts()


def _path_ids(tree: Quadtree, p: np.ndarray) -> set[int]:
    return {c.id for c in tree.same_shift().path(p)}


def sensitivity_audit(
    data: Dataset,
    t: Quadtree,
    indices: list[int] | None = None,
    add_duplicates: bool = True,
) -> AuditReport:
    """Check that one point more or less moves exact counts by 1 along exactly one root-leaf path."""
    report = AuditReport()
    base = _full_counts(t, data.points)
    indices = range(data.n) if indices is None else indices
    for i in indices:
        p = data.points[i]
        path = _path_ids(t, p)
        variants = [("remove", np.delete(data.points, i, axis=0), 1)]
        if add_duplicates:
            variants.append(("add", np.vstack([data.points, p]), -1))
        for kind, points, sign in variants:
            other = _full_counts(t, points)
            deltas = {c: base.get(c, 0) - other.get(c, 0) for c in base.keys() | other.keys()}
            touched = {c for c, v in deltas.items() if v}
            report.max_abs_delta = max([report.max_abs_delta, *(abs(v) for v in deltas.values())])
            if any(v != sign for c, v in deltas.items() if v):
                report.violations.append(f"{kind} point {i}: delta other than {sign}")
            if touched != path:
                report.violations.append(f"{kind} point {i}: touched cells differ from its root-leaf path")
            report.checked += 1
    if report.violations:
        logger.warning("sensitivity_audit violations=%d first=%s", len(report.violations), report.violations[0])
    return report


def smoothed_norm(r: np.ndarray, lambda_smooth: float) -> np.ndarray:
    """f_λ(r) = r + 2λ·log((1 + e^{−r/λ})/2)."""
    return r + 2 * lambda_smooth * (np.logaddexp(0.0, -r / lambda_smooth) - math.log(2))


@dataclass(frozen=True)
class OneMedianResult:
    point: np.ndarray
    converged: bool
    iterations: int


def solve_one_median(
    points: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    config: OneMedianConfig | None = None,
    lam: float = 1.0,
) -> OneMedianResult:
    config = config or OneMedianConfig()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DataError("empty dataset")
    check_epsilon(epsilon)
    n, d = pts.shape
    lam_s = config.lambda_smooth
    b = np.zeros(d)
    if not math.isinf(epsilon):
        gamma = config.resolve_gamma(d, n)
        direction = rng.normal(size=d)
        direction /= max(float(np.linalg.norm(direction)), 1e-300)
        b = direction * rng.gamma(shape=d, scale=2 * gamma / (epsilon * n))

    def objective(x):
        r = np.linalg.norm(pts - x, axis=1)
        return float(smoothed_norm(r, lam_s).mean() + b @ x)

    def gradient(x):
        diff = x - pts
        r = np.linalg.norm(diff, axis=1)
        coef = np.full(n, 1 / (2 * lam_s))
        np.divide(np.tanh(r / (2 * lam_s)), r, out=coef, where=r > 0)
        return (coef[:, None] * diff).mean(axis=0) + b

    x = pts.mean(axis=0)
    fx = objective(x)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        g = gradient(x)
        gn2 = float(g @ g)
        if math.sqrt(gn2) < config.grad_tol:
            converged = True
            break
        t = step
        while True:
            candidate = x - t * g
            fc = objective(candidate)
            if fc <= fx - 0.5 * t * gn2:
                break
            t *= 0.5
            if t < 1e-18:
                break
        if t < 1e-18:
            # no descent representable in floating point
            converged = True
            break
        x, fx = candidate, fc
        step = min(2 * t, 1e6)
    if not converged:
        logger.warning("dp_one_median not converged iters=%d grad_norm=%.3g", it, math.sqrt(gn2))
    return OneMedianResult(clamp_to_ball(x, lam), converged, it)


def dp_one_median(
    points: np.ndarray,
    epsilon: float,
    lambda_smooth: float = 0.2,
    gamma_grad: float | None = None,
    rng: np.random.Generator | None = None,
    *,
    lam: float = 1.0,
    max_iter: int = 500,
) -> np.ndarray:
    config = OneMedianConfig(lambda_smooth=lambda_smooth, gamma_grad=gamma_grad, max_iter=max_iter)
    rng = rng if rng is not None else np.random.default_rng()
    return solve_one_median(points, epsilon, rng, config, lam).point


def dp_one_mean(points: np.ndarray, epsilon: float, lam: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy sum over noisy count, half the budget each."""
    pts = np.asarray(points, dtype=np.float64)
    check_epsilon(epsilon)
    if pts.ndim != 2:
        raise DataError("points must be a 2-d array")
    n, d = pts.shape
    enabled = not math.isinf(epsilon)
    if not enabled:
        if n == 0:
            raise DataError("empty dataset")
        return clamp_to_ball(pts.mean(axis=0), lam)
    rng = rng if rng is not None else np.random.default_rng()
    total = pts.sum(axis=0) + laplace_sample(2 * d * lam / (epsilon / 2), rng, size=d)
    count = n + laplace_sample(2 / epsilon, rng)
    if count <= 1:
        logger.warning("dp_one_mean noisy count=%.3f <= 1, returning origin", count)
        return np.zeros(d)
    return clamp_to_ball(total / count, lam)
