"""Report models serialized to JSON."""

import math
from typing import Literal

from pydantic import BaseModel, Field, field_serializer, model_validator


def _epsilon_out(eps: float) -> float | str:
    return "inf" if math.isinf(eps) else eps


class LedgerEntryModel(BaseModel):
    label: str
    epsilon: float

    @field_serializer("epsilon")
    def _eps(self, eps: float):
        return _epsilon_out(eps)


class SolutionReport(BaseModel):
    centers: list[list[float]]
    power: Literal[1, 2] = 1
    cost: float
    tree_cost: float | None = None
    epsilon: float
    ledger: list[LedgerEntryModel] = Field(default_factory=list)
    wall_time: float | None = None
    created_at: str | None = None

    @field_serializer("epsilon")
    def _eps(self, eps: float):
        return _epsilon_out(eps)

    @property
    def k(self) -> int:
        return len(self.centers)


class KMeansRoundRecord(BaseModel):
    round: int
    centers: int
    bad_centers: int
    tree_cost: float | None = None
    cost: float
    epsilon_spent: float
    cluster_weights: list[float] = []

    @field_serializer("epsilon_spent")
    def _eps(self, eps: float):
        return _epsilon_out(eps)


class RoundRecordModel(BaseModel):
    index: int
    phase: str
    messages: int
    words: float
    max_in: float
    max_out: float
    max_resident: float


class RoundTraceReport(BaseModel):
    machines: int
    memory_words: float | str
    word_table: dict[str, int]
    rounds: list[RoundRecordModel]

    @property
    def total_rounds(self) -> int:
        return len(self.rounds)


class RunRecord(BaseModel):
    algorithm: str
    k: int
    epsilon: float
    seed: int
    alpha_depth: float | None = None
    beta: float | None = None
    power: Literal[1, 2] = 1
    cost: float | None = None
    normalized_cost: float | None = None
    tree_cost: float | None = None
    wall_time: float = 0.0
    centers: int = 0
    ledger: list[LedgerEntryModel] = Field(default_factory=list)
    error: str | None = None

    @field_serializer("epsilon")
    def _eps(self, eps: float):
        return _epsilon_out(eps)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def epsilon_spent(self) -> float:
        return math.fsum(e.epsilon for e in self.ledger)


class AggregateRecord(BaseModel):
    algorithm: str
    k: int
    epsilon: float
    alpha_depth: float | None = None
    beta: float | None = None
    runs: int
    median_cost: float | None = None
    mean_cost: float | None = None
    median_normalized: float | None = None
    mean_normalized: float | None = None

    @field_serializer("epsilon")
    def _eps(self, eps: float):
        return _epsilon_out(eps)


class RunReport(BaseModel):
    name: str
    created_at: str
    runs: list[RunRecord]
    aggregates: list[AggregateRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _normalized_floor(self):
        for run in self.runs:
            if run.normalized_cost is not None and run.normalized_cost < 1 - 1e-9:
                raise ValueError(f"normalized cost below 1 for {run.algorithm} k={run.k} seed={run.seed}")
        return self

    def failed(self) -> list[RunRecord]:
        return [r for r in self.runs if not r.ok]
