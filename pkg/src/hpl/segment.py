"""Action-group segmentation strategies.

Every strategy returns a :class:`Segmentation` whose spans are inclusive
``(start, end)`` index pairs that tile ``[0, len)`` with no gaps or overlap.
"""
from __future__ import annotations

import json
import logging
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .envsim import Trajectory
from .errors import TransportError, UsageError, ValidationError
from .policy import PolicyParams, entropies

log = logging.getLogger(__name__)

STRATEGIES = ("fixed_n", "fixed_k", "uncertainty", "semantic")

Span = tuple[int, int]


@dataclass
class Segmentation:
    strategy: str
    boundaries: list[Span]
    params: dict = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return [e - s + 1 for s, e in self.boundaries]


def is_partition(spans: Sequence[Span], n: int) -> bool:
    """True iff ``spans`` are contiguous, disjoint, and cover 0..n-1 in order."""
    nxt = 0
    for s, e in spans:
        if s != nxt or e < s:
            return False
        nxt = e + 1
    return nxt == n and n > 0


def _spans_from_sizes(sizes: Sequence[int]) -> list[Span]:
    out, start = [], 0
    for k in sizes:
        out.append((start, start + k - 1))
        start += k
    return out


def segment_fixed_n(traj: Trajectory, n_groups: int) -> Segmentation:
    """Split into ``n_groups`` near-equal groups; the first ``len % n_groups``
    groups take the extra step."""
    n = len(traj)
    if not 1 <= n_groups <= n:
        raise UsageError(f"N={n_groups} must lie in [1, {n}]")
    q, r = divmod(n, n_groups)
    sizes = [q + 1] * r + [q] * (n_groups - r)
    return Segmentation("fixed_n", _spans_from_sizes(sizes), {"N": n_groups})


def segment_fixed_k(traj: Trajectory, k: int) -> Segmentation:
    if k < 1:
        raise UsageError("K must be >= 1")
    n = len(traj)
    sizes = [k] * (n // k) + ([n % k] if n % k else [])
    return Segmentation("fixed_k", _spans_from_sizes(sizes), {"K": k})


def boundaries_from_entropies(h: Sequence[float], threshold: float) -> list[Span]:
    """Open a new group before step t >= 1 whenever ``h[t] > threshold``."""
    cuts = [t for t in range(1, len(h)) if h[t] > threshold]
    edges = [0] + cuts + [len(h)]
    return [(a, b - 1) for a, b in zip(edges[:-1], edges[1:])]


def step_entropies(traj: Trajectory, ref: PolicyParams) -> np.ndarray:
    return entropies(ref)[[s.obs for s in traj.steps]]


def segment_uncertainty(traj: Trajectory, ref: PolicyParams, threshold: float) -> Segmentation:
    if not math.isfinite(threshold):
        raise UsageError("entropy threshold must be finite")
    spans = boundaries_from_entropies(step_entropies(traj, ref), threshold)
    return Segmentation("uncertainty", spans, {"threshold": threshold})


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Value at 1-based rank ceil(q * n) of the ascending sort."""
    if len(values) == 0:
        raise UsageError("empty value pool")
    if not 0.0 < q < 1.0:
        raise UsageError("quantile must lie in (0, 1)")
    v = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(q * len(v)))
    return float(v[rank - 1])


def calibrate_entropy_threshold(dataset: Sequence[Trajectory], ref: PolicyParams, q: float = 0.8) -> float:
    pool = [h for tr in dataset for h in step_entropies(tr, ref)]
    return nearest_rank(pool, q)


# --- semantic segmentation --------------------------------------------------------


def validate_response(raw: str, num_actions: int) -> list[Span]:
    """Parse and check a segmenter reply.

    Accepted replies are a bare JSON array of non-empty integer arrays whose
    indices run 0..num_actions-1 contiguously, each index in exactly one group,
    with the final index equal to num_actions-1. Groups may list every index
    or only their endpoints. Anything else raises :class:`ValidationError`.
    """
    try:
        data = json.loads(raw)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"response is not valid JSON: {exc}", raw) from None
    if not isinstance(data, list) or not data:
        raise ValidationError("response must be a non-empty JSON array", raw)
    spans: list[Span] = []
    expected = 0
    for i, grp in enumerate(data):
        if not isinstance(grp, list) or not grp:
            raise ValidationError(f"group {i} is not a non-empty array", raw)
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in grp):
            raise ValidationError(f"group {i} contains non-integers", raw)
        if any(x < 0 or x >= num_actions for x in grp):
            raise ValidationError(f"group {i} has an index outside 0..{num_actions - 1}", raw)
        lo, hi = grp[0], grp[-1]
        if len(grp) > 2 and grp != list(range(lo, hi + 1)):
            raise ValidationError(f"group {i} is not a contiguous run", raw)
        if hi < lo:
            raise ValidationError(f"group {i} is decreasing", raw)
        if lo > expected:
            raise ValidationError(f"index {expected} is not covered", raw)
        if lo < expected:
            raise ValidationError(f"index {lo} belongs to more than one group", raw)
        spans.append((lo, hi))
        expected = hi + 1
    if expected != num_actions:
        raise ValidationError(f"last index must be {num_actions - 1}, got {expected - 1}", raw)
    return spans


class SegmenterProvider(Protocol):
    name: str

    def segment(self, traj: Trajectory) -> list[Span]: ...


class OracleSegmenter:
    """Returns the environment's ground-truth sub-task boundaries."""

    name = "oracle"

    def segment(self, traj: Trajectory) -> list[Span]:
        if traj.subtask_boundaries is None:
            raise UsageError(f"{traj.task_id} carries no ground-truth boundaries")
        return [tuple(b) for b in traj.subtask_boundaries]


class HttpSegmenter:
    """Client for an external segmenter.

    POSTs ``{"actions": [...], "num_actions": n}`` as JSON and expects the raw
    JSON array of index groups as the response body.
    """

    name = "http"

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def request_body(self, traj: Trajectory) -> dict:
        return {"actions": [f"obs {s.obs}: action {s.action}" for s in traj.steps], "num_actions": len(traj)}

    def fetch(self, traj: Trajectory) -> str:
        body = json.dumps(self.request_body(traj)).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"segmenter at {self.url} unreachable: {exc}") from exc

    def segment(self, traj: Trajectory) -> list[Span]:
        return validate_response(self.fetch(traj), len(traj))


def segment_semantic(traj: Trajectory, provider: SegmenterProvider) -> Segmentation:
    spans = provider.segment(traj)
    if not is_partition(spans, len(traj)):
        raise ValidationError(f"provider {provider.name} returned a non-partition", json.dumps(spans))
    return Segmentation("semantic", [tuple(s) for s in spans], {"provider": provider.name})


# --- strategy dispatch -------------------------------------------------------------


@dataclass
class Segmenter:
    """A configured strategy. Semantic failures fall back to the oracle and
    are appended to ``fallback_events``."""

    strategy: str
    params: dict = field(default_factory=dict)
    provider: SegmenterProvider | None = None
    fallback_events: list = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown segmentation strategy {self.strategy!r}")

    def __call__(self, traj: Trajectory, ref: PolicyParams | None = None) -> Segmentation:
        if self.strategy == "fixed_n":
            return segment_fixed_n(traj, min(int(self.params.get("N", 3)), len(traj)))
        if self.strategy == "fixed_k":
            return segment_fixed_k(traj, int(self.params.get("K", 3)))
        if self.strategy == "uncertainty":
            if ref is None:
                raise UsageError("uncertainty segmentation needs the reference policy")
            return segment_uncertainty(traj, ref, float(self.params["threshold"]))
        provider = self.provider or OracleSegmenter()
        try:
            return segment_semantic(traj, provider)
        except (ValidationError, TransportError) as exc:
            if isinstance(provider, OracleSegmenter):
                raise
            log.warning("semantic segmenter failed on %s (%s); using oracle", traj.task_id, exc)
            self.fallback_events.append({"task_id": traj.task_id, "error": str(exc), "raw": getattr(exc, "raw", None)})
            seg = segment_semantic(traj, OracleSegmenter())
            seg.params["fallback"] = True
            return seg
