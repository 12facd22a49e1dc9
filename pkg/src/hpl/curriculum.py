"""Two-axis curriculum: group length x reward gap, consumed in three phases."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import ConfigError, UsageError
from .prefgen import GroupPair

log = logging.getLogger(__name__)

LEVELS = (1, 2, 3)

PHASE_BUCKETS: dict[int, tuple[tuple[int, int], ...]] = {
    1: ((1, 1),),
    2: ((1, 1), (1, 2), (2, 1)),
    3: tuple((L, D) for L in LEVELS for D in LEVELS),
}


@dataclass(frozen=True)
class CurriculumThresholds:
    length_edges: tuple[int, int, int] = (0, 3, 6)
    difficulty_edges: tuple[float, float, float] = (1.0, 0.7, 0.4)

    def __post_init__(self):
        object.__setattr__(self, "length_edges", tuple(int(x) for x in self.length_edges))
        object.__setattr__(self, "difficulty_edges", tuple(float(x) for x in self.difficulty_edges))
        l0, l1, l2 = self.length_edges
        d0, d1, d2 = self.difficulty_edges
        if not l0 < l1 < l2:
            raise ConfigError(f"length edges must be strictly ascending, got {self.length_edges}")
        if not d0 > d1 > d2 >= 0:
            raise ConfigError(f"difficulty edges must be strictly descending and >= 0, got {self.difficulty_edges}")

    def to_json(self) -> dict:
        return {"length_edges": list(self.length_edges), "difficulty_edges": list(self.difficulty_edges)}


def length_level(length: int, th: CurriculumThresholds) -> int:
    l0, l1, l2 = th.length_edges
    if length <= l0:
        raise UsageError(f"group length {length} is not above the lowest edge {l0}")
    if length <= l1:
        return 1
    return 2 if length <= l2 else 3


def difficulty_level(delta_r: float, th: CurriculumThresholds) -> int:
    """Large gaps are easy (level 1); the top edge is only a nominal cap."""
    d0, d1, d2 = th.difficulty_edges
    if delta_r <= 0:
        raise UsageError(f"reward gap {delta_r} must be positive")
    if delta_r > d0:
        raise UsageError(f"reward gap {delta_r} exceeds the cap {d0}")
    if delta_r >= d1:
        return 1
    return 2 if delta_r >= d2 else 3


def assign_bucket(pair: GroupPair, th: CurriculumThresholds) -> tuple[int, int]:
    return length_level(pair.length, th), difficulty_level(pair.delta_r, th)


@dataclass
class CurriculumMatrix:
    thresholds: CurriculumThresholds
    buckets: dict[tuple[int, int], list[GroupPair]] = field(default_factory=dict)

    def __post_init__(self):
        for L in LEVELS:
            for D in LEVELS:
                self.buckets.setdefault((L, D), [])

    def __getitem__(self, cell: tuple[int, int]) -> list[GroupPair]:
        return self.buckets[cell]

    def counts(self) -> dict[tuple[int, int], int]:
        return {cell: len(v) for cell, v in self.buckets.items()}

    def total(self) -> int:
        return sum(len(v) for v in self.buckets.values())

    def summary(self) -> dict:
        return {
            "thresholds": self.thresholds.to_json(),
            "counts": {f"{L},{D}": len(self.buckets[(L, D)]) for L in LEVELS for D in LEVELS},
            "phases": {str(s): [list(c) for c in cells] for s, cells in PHASE_BUCKETS.items()},
            "phase_sizes": {str(s): len(phase_dataset(self, s)) for s in PHASE_BUCKETS},
        }


def build_matrix(pairs: list[GroupPair], th: CurriculumThresholds) -> CurriculumMatrix:
    m = CurriculumMatrix(th)
    for p in pairs:
        m.buckets[assign_bucket(p, th)].append(p)
    return m


def phase_dataset(matrix: CurriculumMatrix, s: int) -> list[GroupPair]:
    if s not in PHASE_BUCKETS:
        raise UsageError(f"phase must be 1, 2 or 3, got {s}")
    out = [p for cell in PHASE_BUCKETS[s] for p in matrix.buckets[cell]]
    if not out:
        log.warning("curriculum phase %d has no active pairs", s)
    return out
