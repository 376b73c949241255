"""Round-synchronous simulator of the private quadtree k-median on m machines.

Machines run one after another inside a round, but only see messages sent in
the previous round, sorted by sender. Every stored value and every message
carries its size in words; after each round the per-machine send, receive
and resident volumes are checked against the memory cap s.

All cell geometry and all per-cell noise are keyed on (shared seed, cell id),
so the distributed run reproduces the sequential dp_kmedian bit for bit.
"""

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from treeclust.config import KMedianConfig, MpcConfig, check_epsilon, log2n
from treeclust.core import NORM_MARGIN, Dataset, RngStream, Solution, clamp_to_ball, exact_partials, point_costs
from treeclust.errors import ConfigError, MemoryOverflowError
from treeclust.kmedian import (
    DpTable,
    JlProjection,
    base_cost,
    charge_project_back,
    cluster_epsilon,
    combine_children,
    extract,
    jl_matrix,
    jl_target_dim,
    leaf_values,
    median_from_sample,
    placement_centers,
    sample_indices,
    share_pending,
    solve_subtree,
    tree_anchor,
)
from treeclust.log_utils import get_logger
from treeclust.models import RoundRecordModel, RoundTraceReport
from treeclust.privacy import NoiseParams, NoisyWeights, PrivacyBudget, noise_params, privatize_from, weigh_cell
from treeclust.quadtree import ROOT, Quadtree, depth_of, dfs_key

logger = get_logger("treeclust.mpc")

WORD_TABLE = {"coordinate": 1, "count": 1, "cost": 1, "cell_id": 2}
CELL_WORDS = WORD_TABLE["cell_id"]
COUNT_ENTRY_WORDS = CELL_WORDS + WORD_TABLE["count"]
# id, count, weight, expanded flag
CELL_STATE_WORDS = CELL_WORDS + 3
# id, copies, attributed cost
CENTER_ENTRY_WORDS = CELL_WORDS + 2


@dataclass(frozen=True, slots=True)
class Message:
    src: int
    dst: int
    tag: str
    payload: list
    words: float


class Outbox:
    """Groups items per (destination, tag) into one message each."""

    def __init__(self, src: int):
        self.src = src
        self._items: dict[tuple[int, str], list] = defaultdict(list)
        self._words: dict[tuple[int, str], float] = defaultdict(float)

    def send(self, dst: int, tag: str, item: Any, words: float) -> None:
        self._items[(dst, tag)].append(item)
        self._words[(dst, tag)] += words

    def messages(self) -> list[Message]:
        return [Message(self.src, dst, tag, items, self._words[(dst, tag)]) for (dst, tag), items in self._items.items()]


def received(inbox: list[Message], tag: str) -> list:
    return [item for msg in inbox if msg.tag == tag for item in msg.payload]


class Machine:
    """Local store of one machine; each entry is ledgered with its size in words."""

    def __init__(self, machine_id: int):
        self.id = machine_id
        self.store: dict[str, Any] = {}
        self.words: dict[str, float] = {}

    def put(self, key: str, value: Any, words: float) -> None:
        self.store[key] = value
        self.words[key] = float(words)

    def get(self, key: str, default: Any = None) -> Any:
        return self.store.get(key, default)

    def pop(self, key: str, default: Any = None) -> Any:
        self.words.pop(key, None)
        return self.store.pop(key, default)

    @property
    def resident(self) -> float:
        return sum(self.words.values())


@dataclass(frozen=True)
class RoundRecord:
    index: int
    phase: str
    messages: int
    words: float
    max_in: float
    max_out: float
    max_resident: float


@dataclass
class RoundTrace:
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def total_rounds(self) -> int:
        return len(self.rounds)

    def rounds_in(self, prefix: str) -> int:
        return sum(1 for r in self.rounds if r.phase.startswith(prefix))

    def to_report(self, machines: int, memory_words: float) -> RoundTraceReport:
        return RoundTraceReport(
            machines=machines,
            memory_words="inf" if math.isinf(memory_words) else memory_words,
            word_table=dict(WORD_TABLE),
            rounds=[RoundRecordModel(**asdict(r)) for r in self.rounds],
        )


Step = Callable[[Machine, list[Message]], Outbox | None]


class MpcCluster:
    def __init__(
        self,
        machines: int,
        memory_words: float,
        shared_seed: int,
        *,
        delta: float | None = None,
        gamma: float | None = None,
    ):
        if machines < 1:
            raise ConfigError(f"machine count must be >= 1, got {machines}")
        if not memory_words > 0:
            raise ConfigError(f"memory_words must be > 0, got {memory_words}")
        self.m = machines
        self.s = float(memory_words)
        self.shared_seed = shared_seed
        self.shared = RngStream(shared_seed)
        self.delta = delta
        self.gamma = gamma
        self.machines = [Machine(i) for i in range(machines)]
        self.round = 0
        self.trace = RoundTrace()
        self._inboxes: list[list[Message]] = [[] for _ in range(machines)]

    def pending(self, machine_id: int, tag: str) -> list:
        """Items waiting for a machine at the next round."""
        return received(self._inboxes[machine_id], tag)

    def has_pending(self, tag: str) -> bool:
        return any(msg.tag == tag for inbox in self._inboxes for msg in inbox)

    def run_round(self, phase: str, step: Step) -> RoundRecord:
        self.round += 1
        r = self.round
        inboxes, self._inboxes = self._inboxes, [[] for _ in range(self.m)]
        incoming = [0.0] * self.m
        max_out = volume = 0.0
        count = 0
        for machine in self.machines:
            inbox = sorted(inboxes[machine.id], key=lambda msg: msg.src)
            out = step(machine, inbox)
            if out is None:
                continue
            msgs = out.messages()
            sent = sum(msg.words for msg in msgs)
            if sent > self.s:
                raise MemoryOverflowError(r, machine.id, sent, self.s)
            for msg in msgs:
                if not 0 <= msg.dst < self.m:
                    raise ConfigError(f"message to unknown machine {msg.dst}")
                self._inboxes[msg.dst].append(msg)
                incoming[msg.dst] += msg.words
            max_out = max(max_out, sent)
            volume += sent
            count += len(msgs)
        for machine_id, words in enumerate(incoming):
            if words > self.s:
                raise MemoryOverflowError(r, machine_id, words, self.s)
        max_resident = 0.0
        for machine in self.machines:
            if machine.resident > self.s:
                raise MemoryOverflowError(r, machine.id, machine.resident, self.s)
            max_resident = max(max_resident, machine.resident)
        record = RoundRecord(r, phase, count, volume, max(incoming), max_out, max_resident)
        self.trace.rounds.append(record)
        logger.debug(
            "mpc round=%d phase=%s messages=%d words=%.0f max_in=%.0f max_resident=%.0f",
            r,
            phase,
            count,
            volume,
            record.max_in,
            max_resident,
        )
        return record


@dataclass(frozen=True)
class ResponsibilityMap:
    owner: dict[int, int]
    machines: int

    def __call__(self, cell_id: int) -> int:
        return self.owner[cell_id]

    def __len__(self) -> int:
        return len(self.owner)

    def loads(self) -> list[int]:
        out = [0] * self.machines
        for machine in self.owner.values():
            out[machine] += 1
        return out


def build_responsibility_map(cell_ids, m: int, seed: int = 0) -> ResponsibilityMap:
    """Sorted cell ids dealt round-robin, starting at machine seed mod m."""
    if m < 1:
        raise ConfigError(f"machine count must be >= 1, got {m}")
    offset = seed % m
    return ResponsibilityMap({cid: (i + offset) % m for i, cid in enumerate(sorted(set(cell_ids)))}, m)


def auto_memory_words(n: int, d: int, k: int, m: int, max_depth: int) -> float:
    """Generous per-machine cap: local points, local paths, owned DP state and a broadcast of k centers."""
    if m == 1:
        return math.inf
    per_machine = math.ceil(n / m)
    paths = per_machine * (max_depth + 1)
    owned = math.ceil(n * (max_depth + 1) / m) + 1
    return float(2 * (per_machine * d + 2 * COUNT_ENTRY_WORDS * paths + owned * (2 * k + 12) + m * k * (d + 4) + 1024))


def make_cluster(cfg: MpcConfig, shared_seed: int, n: int, d: int, k: int, max_depth: int) -> MpcCluster:
    s = cfg.memory_words if cfg.memory_words is not None else auto_memory_words(n, d, k, cfg.machines, max_depth)
    bound = s / (cfg.dp_word_constant * d * log2n(n))
    if k > bound:
        raise ConfigError(f"k={k} exceeds the DP state bound {bound:.3g} for memory_words={s:.6g}")
    if cfg.gamma is not None and cfg.machines * s < (n * d) ** (1 + cfg.gamma):
        raise ConfigError(f"m*s={cfg.machines * s:.6g} below N^(1+gamma) for N={n * d}")
    logger.debug("mpc cluster machines=%d memory_words=%.6g", cfg.machines, s)
    return MpcCluster(cfg.machines, s, shared_seed, delta=cfg.delta, gamma=cfg.gamma)


def distribute(cluster: MpcCluster, points: np.ndarray, key: str = "points") -> None:
    """Contiguous index blocks, machine i holding the i-th block."""
    points = np.asarray(points, dtype=np.float64)
    for machine, block in zip(cluster.machines, np.array_split(np.arange(points.shape[0]), cluster.m)):
        local = points[block]
        machine.put(key, local, local.size * WORD_TABLE["coordinate"])


def compute_local_cells(cluster: MpcCluster, proto: Quadtree, key: str = "points") -> None:
    """Each machine expands its own points in a tree of the shared shift and keeps the cell counts."""

    def step(machine: Machine, inbox: list[Message]) -> None:
        points = machine.get(key)
        counts: dict[int, int] = {}
        if points is not None and points.shape[0]:
            local = proto.same_shift(points)
            local.expand_nonempty()
            counts = local.counts()
        machine.put("local_cells", counts, COUNT_ENTRY_WORDS * len(counts))

    cluster.run_round("cell-compute", step)


def mpc_count_cells(
    cluster: MpcCluster, local_counts: list[dict[int, int]] | None = None
) -> tuple[ResponsibilityMap, dict[int, int]]:
    """Exact per-cell counts at their responsible machines in three rounds.

    Partial counts go to an aggregator chosen by a shared hash of the cell id,
    aggregators sum them and forward the totals to r(c).
    """
    if local_counts is not None:
        if len(local_counts) != cluster.m:
            raise ConfigError(f"expected {cluster.m} local count tables, got {len(local_counts)}")
        for machine, counts in zip(cluster.machines, local_counts):
            machine.put("local_cells", dict(counts), COUNT_ENTRY_WORDS * len(counts))
    cell_ids = set()
    for machine in cluster.machines:
        cell_ids.update(machine.get("local_cells", {}))
    rmap = build_responsibility_map(cell_ids, cluster.m)
    aggregate_stream = cluster.shared.child("aggregate")

    def partial(machine: Machine, inbox: list[Message]) -> Outbox:
        out = Outbox(machine.id)
        for cid, count in sorted(machine.pop("local_cells", {}).items()):
            out.send(aggregate_stream.hash_at(cid) % cluster.m, "partial", (cid, count), COUNT_ENTRY_WORDS)
        return out

    def aggregate(machine: Machine, inbox: list[Message]) -> Outbox:
        totals: dict[int, int] = {}
        fan_in: dict[int, int] = defaultdict(int)
        for cid, count in received(inbox, "partial"):
            totals[cid] = totals.get(cid, 0) + count
            fan_in[cid] += 1
        machine.put("fan_in", max(fan_in.values(), default=0), WORD_TABLE["count"])
        out = Outbox(machine.id)
        for cid in sorted(totals):
            out.send(rmap(cid), "count", (cid, totals[cid]), COUNT_ENTRY_WORDS)
        return out

    def route(machine: Machine, inbox: list[Message]) -> None:
        counts = dict(received(inbox, "count"))
        machine.put("counts", counts, COUNT_ENTRY_WORDS * len(counts))

    cluster.run_round("count-partial", partial)
    cluster.run_round("count-aggregate", aggregate)
    cluster.run_round("count-route", route)
    merged: dict[int, int] = {}
    for machine in cluster.machines:
        merged.update(machine.get("counts", {}))
    return rmap, merged


def _weigh_owned_cells(cluster: MpcCluster, proto: Quadtree, noise: NoiseParams, rmap: ResponsibilityMap) -> int:
    """Noisy weights for owned cells whose ancestors all expanded; returns the deepest expanded depth (−1 if none).

    A cell is reached when every ancestor expanded, an AND along its root path.
    It is gathered by pointer doubling on heap ids: after step r each cell holds
    the AND of its own flag and those of its 2^r − 1 nearest ancestors, and a
    last step reads that value off the parent.
    """
    steps = max(1, math.ceil(math.log2(proto.max_depth + 1)))
    jumps = [2**r for r in range(steps)] + [1]
    flag_words = CELL_WORDS + 1
    ask_words = 2 * CELL_WORDS

    def ask(machine: Machine, jump: int) -> Outbox:
        out = Outbox(machine.id)
        for cid in sorted(machine.get("chain", {})):
            target = cid >> jump
            if target >= ROOT:
                out.send(rmap(target), "ask", (target, cid), ask_words)
        return out

    def weigh(machine: Machine, inbox: list[Message]) -> Outbox:
        counts = machine.pop("counts", {})
        weighed = {cid: weigh_cell(proto, proto.cell(cid), counts[cid], noise) for cid in sorted(counts)}
        machine.put("weighed", weighed, CELL_STATE_WORDS * len(weighed))
        machine.put("chain", {cid: expand for cid, (_, expand) in weighed.items()}, flag_words * len(weighed))
        return ask(machine, jumps[0])

    def make_gate(step: int) -> Step:
        def gate(machine: Machine, inbox: list[Message]) -> Outbox:
            chain = machine.get("chain", {})
            # replies to the previous step are applied before this step's questions are answered
            for cid, flag in received(inbox, "flag"):
                chain[cid] = chain[cid] and flag
            out = ask(machine, jumps[step + 1]) if step + 1 < len(jumps) else Outbox(machine.id)
            for target, cid in received(inbox, "ask"):
                out.send(rmap(cid), "flag", (cid, chain[target]), flag_words)
            return out

        return gate

    def reach(machine: Machine, inbox: list[Message]) -> Outbox:
        weighed = machine.pop("weighed", {})
        machine.pop("chain")
        reached = dict(received(inbox, "flag"))
        by_depth: dict[int, dict[int, tuple[float | None, bool]]] = defaultdict(dict)
        deepest = -1
        for cid, (w, expand) in weighed.items():
            if cid != ROOT and not reached[cid]:
                continue
            by_depth[depth_of(cid)][cid] = (w, expand)
            if expand:
                deepest = max(deepest, depth_of(cid))
        machine.put("cells", dict(by_depth), CELL_STATE_WORDS * sum(len(v) for v in by_depth.values()))
        out = Outbox(machine.id)
        for dst in range(cluster.m):
            out.send(dst, "deepest", deepest, 1)
        return out

    cluster.run_round("weight", weigh)
    for step in range(len(jumps)):
        cluster.run_round(f"gate {step}", make_gate(step))
    cluster.run_round("reach", reach)
    # every machine reads the same broadcast maxima at its next step
    return max(cluster.pending(0, "deepest"), default=-1)


def _empty_subtree(proto: Quadtree, noise: NoiseParams, cid: int, k: int, z: int) -> DpTable:
    """DP table of a cell no machine counted: all its counts are 0."""
    weights, expanded = privatize_from(proto, cid, noise, count_of=lambda c: 0)
    w = NoisyWeights(weights, expanded, noise.threshold, noise.scale, noise.epsilon)
    table = DpTable(k, z, root_id=cid)
    solve_subtree(proto, w, cid, k, z, table)
    return table


def _table_words(table: DpTable) -> float:
    return sum(CELL_WORDS + 2 * (table.k + 1) for _ in table.values)


def _dp_up(cluster: MpcCluster, proto: Quadtree, noise: NoiseParams, rmap: ResponsibilityMap, k: int, z: int, top: int):
    """One depth per round from `top` to the root; children send v-vectors to r(parent)."""
    vector_words = CELL_WORDS + k + 1

    def make_step(depth: int) -> Step:
        def step(machine: Machine, inbox: list[Message]) -> Outbox:
            cells = machine.get("cells", {}).get(depth, {})
            dp = machine.get("dp") or {}
            empty = machine.get("empty") or {}
            child_v = dict(received(inbox, "v"))
            out = Outbox(machine.id)
            for cid in sorted(cells):
                w, expand = cells[cid]
                cell = proto.cell(cid)
                if expand:
                    lower, upper = (c.id for c in proto.children(cid))
                    vs = []
                    for child in (lower, upper):
                        if child not in child_v:
                            empty[child] = _empty_subtree(proto, noise, child, k, z)
                            child_v[child] = empty[child].values[child]
                        vs.append(child_v[child])
                    v, split = combine_children(vs[0], vs[1], k)
                    v[0] = base_cost(w, cell.diam, z)
                    dp[cid] = (split, float(vs[0][0]), float(vs[1][0]))
                else:
                    v = leaf_values(w, cell.diam, z, k)
                    dp[cid] = None
                if cid == ROOT:
                    machine.put("root_value", float(v[k]), WORD_TABLE["cost"])
                else:
                    out.send(rmap(cid >> 1), "v", (cid, v), vector_words)
            machine.put("dp", dp, sum(CELL_WORDS + (k + 3 if e is not None else 1) for e in dp.values()))
            machine.put("empty", empty, sum(_table_words(t) for t in empty.values()))
            return out

        return step

    for depth in range(top, -1, -1):
        cluster.run_round(f"dp-up {depth}", make_step(depth))


def _stash_for_coordinator(machine: Machine, inbox: list[Message]) -> None:
    if machine.id != 0:
        return
    stash = machine.get("centers_in", []) + received(inbox, "center")
    machine.put("centers_in", stash, CENTER_ENTRY_WORDS * len(stash))
    for value in received(inbox, "tree_cost"):
        machine.put("tree_cost", value, WORD_TABLE["cost"])


def _extract_down(cluster: MpcCluster, proto: Quadtree, rmap: ResponsibilityMap, k: int) -> None:
    """Top-down backpointer walk, one depth per round; leaves report centers to machine 0."""
    request_words = CELL_WORDS + 2

    def make_step(first: bool) -> Step:
        def step(machine: Machine, inbox: list[Message]) -> Outbox:
            _stash_for_coordinator(machine, inbox)
            requests = received(inbox, "request")
            out = Outbox(machine.id)
            if first and machine.id == rmap(ROOT):
                requests.insert(0, (ROOT, k, 0.0))
                out.send(0, "tree_cost", machine.get("root_value"), WORD_TABLE["cost"])
            dp = machine.get("dp", {})
            empty = machine.get("empty", {})
            for cid, kp, pending in requests:
                entry = dp[cid]
                if entry is None:
                    out.send(0, "center", (cid, kp, pending / kp), CENTER_ENTRY_WORDS)
                    continue
                split, lower_zero, upper_zero = entry
                k1 = int(split[kp])
                p1, p2 = share_pending(pending, k1, kp - k1, lower_zero, upper_zero)
                for child, kc, pc in ((2 * cid, k1, p1), (2 * cid + 1, kp - k1, p2)):
                    if kc == 0:
                        continue
                    if child in empty:
                        for leaf, copies, each in extract(empty[child], proto, kc, pc):
                            out.send(0, "center", (leaf, copies, each), CENTER_ENTRY_WORDS)
                    else:
                        out.send(rmap(child), "request", (child, kc, pc), request_words)
            return out

        return step

    depth = 0
    while True:
        cluster.run_round(f"extract-down {depth}", make_step(depth == 0))
        if not cluster.has_pending("request"):
            break
        depth += 1


def _gather_and_broadcast(cluster: MpcCluster, proto: Quadtree) -> None:
    def step(machine: Machine, inbox: list[Message]) -> Outbox | None:
        _stash_for_coordinator(machine, inbox)
        if machine.id != 0:
            return None
        placement = sorted(machine.pop("centers_in", []), key=lambda e: dfs_key(e[0], proto.max_depth))
        centers, costs = placement_centers(proto, placement)
        machine.put("centers", centers, centers.size)
        machine.put("center_costs", costs, costs.size)
        return _broadcast(cluster, machine, centers)

    cluster.run_round("gather-broadcast", step)


def _broadcast(cluster: MpcCluster, machine: Machine, centers: np.ndarray) -> Outbox:
    out = Outbox(machine.id)
    for dst in range(cluster.m):
        if dst != machine.id:
            out.send(dst, "centers", centers, centers.size)
    return out


def _cost_rounds(cluster: MpcCluster, z: int, key: str = "points") -> float:
    """Local assignment and exact partial sums, summed once on machine 0."""

    def partials(machine: Machine, inbox: list[Message]) -> Outbox | None:
        centers = machine.get("centers") if machine.id == 0 else received(inbox, "centers")[0]
        points = machine.get(key)
        if points is None or not points.shape[0]:
            return None
        costs, assignment = point_costs(points, centers, z)
        machine.put("assignment", assignment, assignment.size)
        out = Outbox(machine.id)
        parts = exact_partials(costs)
        out.send(0, "partials", parts, len(parts))
        return out

    def collect(machine: Machine, inbox: list[Message]) -> None:
        if machine.id == 0:
            machine.put("cost", math.fsum(p for parts in received(inbox, "partials") for p in parts), 1)

    cluster.run_round("cost-partials", partials)
    cluster.run_round("cost-collect", collect)
    return cluster.machines[0].get("cost")


@dataclass(frozen=True)
class _TreeRun:
    centers: np.ndarray
    center_costs: np.ndarray
    tree_cost: float
    cost: float


def _tree_kmedian(cluster: MpcCluster, proto: Quadtree, noise: NoiseParams, k: int, z: int) -> _TreeRun:
    compute_local_cells(cluster, proto)
    rmap, _ = mpc_count_cells(cluster)
    deepest = _weigh_owned_cells(cluster, proto, noise, rmap)
    _dp_up(cluster, proto, noise, rmap, k, z, deepest + 1)
    _extract_down(cluster, proto, rmap, k)
    _gather_and_broadcast(cluster, proto)
    cost = _cost_rounds(cluster, z)
    coordinator = cluster.machines[0]
    return _TreeRun(coordinator.get("centers"), coordinator.get("center_costs"), coordinator.get("tree_cost"), cost)


def mpc_run_kmedian(
    data: Dataset,
    k: int,
    epsilon: float,
    cluster_cfg: MpcConfig | None = None,
    shared_seed: int = 0,
    config: KMedianConfig | None = None,
    *,
    z: int = 1,
) -> tuple[Solution, RoundTrace]:
    """Distributed dp_kmedian; same seed, same centers and cost."""
    cluster_cfg = cluster_cfg or MpcConfig()
    config = config or KMedianConfig()
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    check_epsilon(epsilon)
    budget = PrivacyBudget(epsilon)
    rng = RngStream(shared_seed)
    proto = Quadtree(data.d, data.n, rng.child("tree-shift"), data.lam, config.tree.resolve_max_depth(data.d))
    cluster = make_cluster(cluster_cfg, shared_seed, data.n, data.d, k, proto.max_depth)
    distribute(cluster, data.points)
    budget.charge("make_private", epsilon)
    run = _tree_kmedian(cluster, proto, noise_params(proto, epsilon, rng.child("laplace"), config.tree), k, z)
    logger.info(
        "mpc_run_kmedian done machines=%d rounds=%d cost=%.6g", cluster.m, cluster.trace.total_rounds, run.cost
    )
    solution = Solution(
        run.centers,
        power=z,
        cost=run.cost,
        tree_cost=run.tree_cost,
        center_costs=run.center_costs,
        ledger=budget.entries(),
        meta={"machines": cluster.m, "memory_words": cluster.s},
    )
    return solution, cluster.trace


def mpc_sample_for_projection(
    cluster: MpcCluster,
    assignment: list[np.ndarray] | None,
    t: int | Callable[[int], int],
    rng: RngStream,
    *,
    key: str = "points",
) -> dict[int, tuple[np.ndarray, int]]:
    """Uniform sample of each cluster gathered on machine 0: {cluster: (Ω, cluster size)}.

    Machine 0 draws ranks within the cluster (members ordered by machine, then
    local index) from rng/project-back/j/omega, and each machine ships its share.
    """
    if assignment is not None:
        for machine, labels in zip(cluster.machines, assignment, strict=True):
            labels = np.asarray(labels, dtype=np.int64)
            machine.put("assignment", labels, labels.size)
    size_of = t if callable(t) else (lambda _: t)

    def counts(machine: Machine, inbox: list[Message]) -> Outbox:
        labels = machine.get("assignment", np.empty(0, dtype=np.int64))
        out = Outbox(machine.id)
        found, sizes = np.unique(labels, return_counts=True)
        out.send(0, "size", {int(j): int(c) for j, c in zip(found, sizes)}, 2 * found.size)
        return out

    def request(machine: Machine, inbox: list[Message]) -> Outbox | None:
        if machine.id != 0:
            return None
        tables = {msg.src: msg.payload[0] for msg in inbox if msg.tag == "size"}
        labels = sorted({j for table in tables.values() for j in table})
        per_machine = np.array([[tables.get(i, {}).get(j, 0) for j in labels] for i in range(cluster.m)], dtype=np.int64)
        sizes = {}
        out = Outbox(machine.id)
        for col, j in enumerate(labels):
            size = int(per_machine[:, col].sum())
            sizes[j] = size
            ranks = sample_indices(size, size_of(size), rng.child(f"project-back/{j}").child("omega").generator())
            starts = np.concatenate([[0], np.cumsum(per_machine[:, col])])
            owners = np.searchsorted(starts, ranks, side="right") - 1
            for i in np.unique(owners):
                local = ranks[owners == i] - starts[i]
                out.send(int(i), "ranks", (j, local), local.size + 1)
        machine.put("cluster_sizes", sizes, 2 * len(sizes))
        return out

    def ship(machine: Machine, inbox: list[Message]) -> Outbox:
        labels = machine.get("assignment")
        points = machine.get(key)
        out = Outbox(machine.id)
        for j, local in received(inbox, "ranks"):
            chosen = points[np.nonzero(labels == j)[0][local]]
            out.send(0, "sample", (j, chosen), chosen.size + 1)
        return out

    def collect(machine: Machine, inbox: list[Message]) -> None:
        if machine.id != 0:
            return
        parts: dict[int, list[np.ndarray]] = defaultdict(list)
        for j, chosen in received(inbox, "sample"):
            parts[j].append(chosen)
        omega = {j: np.vstack(chunks) for j, chunks in parts.items()}
        machine.put("omega", omega, sum(o.size for o in omega.values()))

    cluster.run_round("sample-counts", counts)
    cluster.run_round("sample-request", request)
    cluster.run_round("sample-ship", ship)
    cluster.run_round("sample-collect", collect)
    coordinator = cluster.machines[0]
    omega = coordinator.get("omega", {})
    d = next((o.shape[1] for o in omega.values()), 0)
    return {j: (omega.get(j, np.empty((0, d))), size) for j, size in coordinator.get("cluster_sizes", {}).items()}


def _distributed_projection(cluster: MpcCluster, projection: JlProjection, lam: float) -> JlProjection:
    """Project local points, then agree on the bounding-box midpoint and the norm scale."""
    target = projection.target_dim

    def bounds(machine: Machine, inbox: list[Message]) -> Outbox | None:
        raw = machine.get("raw_points")
        if not raw.shape[0]:
            return None
        projected = projection.apply(raw)
        machine.put("projected", projected, projected.size)
        out = Outbox(machine.id)
        out.send(0, "bounds", (projected.min(axis=0), projected.max(axis=0)), 2 * target)
        return out

    def shift(machine: Machine, inbox: list[Message]) -> Outbox | None:
        if machine.id != 0:
            return None
        pairs = received(inbox, "bounds")
        lo = np.min(np.stack([p[0] for p in pairs]), axis=0)
        hi = np.max(np.stack([p[1] for p in pairs]), axis=0)
        mid = (lo + hi) / 2
        out = Outbox(machine.id)
        for dst in range(cluster.m):
            out.send(dst, "shift", mid, target)
        return out

    def norms(machine: Machine, inbox: list[Message]) -> Outbox:
        mid = received(inbox, "shift")[0]
        machine.put("shift", mid, target)
        out = Outbox(machine.id)
        projected = machine.get("projected")
        if projected is not None:
            centered = projected - mid
            machine.put("projected", centered, centered.size)
            out.send(0, "norm", float(np.linalg.norm(centered, axis=1).max()), 1)
        return out

    def scale(machine: Machine, inbox: list[Message]) -> Outbox | None:
        if machine.id != 0:
            return None
        max_norm = max(received(inbox, "norm"))
        value = lam * (1 - NORM_MARGIN) / max_norm if max_norm > 0 else 1.0
        out = Outbox(machine.id)
        for dst in range(cluster.m):
            out.send(dst, "scale", value, 1)
        return out

    def apply(machine: Machine, inbox: list[Message]) -> None:
        value = received(inbox, "scale")[0]
        machine.put("scale", value, 1)
        centered = machine.pop("projected")
        points = centered * value if centered is not None else np.empty((0, target))
        machine.put("points", points, points.size)

    cluster.run_round("jl-bounds", bounds)
    cluster.run_round("jl-shift", shift)
    cluster.run_round("jl-norm", norms)
    cluster.run_round("jl-scale", scale)
    cluster.run_round("jl-apply", apply)
    coordinator = cluster.machines[0]
    return JlProjection(
        projection.source_dim, target, projection.matrix, coordinator.get("shift"), coordinator.get("scale")
    )


def mpc_run_kmedian_high_dim(
    data: Dataset,
    k: int,
    epsilon: float,
    cluster_cfg: MpcConfig | None = None,
    shared_seed: int = 0,
    config: KMedianConfig | None = None,
) -> tuple[Solution, RoundTrace]:
    """Distributed kmedian_high_dim: projected tree run, then per-cluster sampling and project-back."""
    cluster_cfg = cluster_cfg or MpcConfig()
    config = config or KMedianConfig()
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    check_epsilon(epsilon)
    budget = PrivacyBudget(epsilon)
    eps_tree = epsilon * config.tree_share
    eps_back = epsilon - eps_tree if not math.isinf(epsilon) else math.inf
    rng = RngStream(shared_seed)
    target = config.jl_dim or jl_target_dim(k)
    low_dim = target if data.d > target else data.d
    proto = Quadtree(low_dim, data.n, rng.child("tree-shift"), data.lam, config.tree.resolve_max_depth(low_dim))
    cluster = make_cluster(cluster_cfg, shared_seed, data.n, data.d + low_dim, k, proto.max_depth)
    distribute(cluster, data.points, key="raw_points")
    if data.d > target:
        projection = _distributed_projection(
            cluster, JlProjection(data.d, target, jl_matrix(data.d, target, rng.child("jl"))), data.lam
        )
    else:
        projection = JlProjection(data.d, data.d)
        for machine in cluster.machines:
            raw = machine.get("raw_points")
            machine.put("points", raw, raw.size)
    budget.charge("make_private", eps_tree)
    low = _tree_kmedian(cluster, proto, noise_params(proto, eps_tree, rng.child("laplace"), config.tree), k, 1)
    samples = mpc_sample_for_projection(cluster, None, config.project_back.resolve_t, rng, key="raw_points")
    clusters = low.centers.shape[0]
    eps_cluster = cluster_epsilon(config, eps_back, clusters)

    def project_back_step(machine: Machine, inbox: list[Message]) -> Outbox | None:
        if machine.id != 0:
            return None
        centers = np.empty((clusters, data.d))
        for j in range(clusters):
            omega, size = samples.get(j, (None, 0))
            if size == 0:
                centers[j] = clamp_to_ball(projection.lift(low.centers[j]).reshape(data.d), data.lam)
                continue
            anchor, apx_cost, alpha_apx = tree_anchor(projection, low.centers, low.center_costs, j, data.n)
            centers[j], _ = median_from_sample(
                omega,
                size,
                anchor,
                apx_cost,
                config.project_back,
                eps_cluster,
                rng.child(f"project-back/{j}"),
                alpha_apx=alpha_apx,
                one_median=config.one_median,
                lam=data.lam,
            )
        machine.put("centers", centers, centers.size)
        return _broadcast(cluster, machine, centers)

    cluster.run_round("project-back", project_back_step)
    charge_project_back(budget, config, eps_cluster, clusters)
    cost = _cost_rounds(cluster, 1, key="raw_points")
    logger.info(
        "mpc_run_kmedian_high_dim done machines=%d rounds=%d target=%d cost=%.6g",
        cluster.m,
        cluster.trace.total_rounds,
        projection.target_dim,
        cost,
    )
    solution = Solution(
        cluster.machines[0].get("centers"),
        power=1,
        cost=cost,
        tree_cost=low.tree_cost,
        ledger=budget.entries(),
        meta={"machines": cluster.m, "memory_words": cluster.s},
    )
    return solution, cluster.trace
