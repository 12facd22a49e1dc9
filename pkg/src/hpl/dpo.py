"""Trajectory-, step-, and group-level DPO losses and the staged trainer.

Every pair is reduced to two scored segments, lists of (state, action) with
the states the segment actually visited. A dataset is compiled once into a
sparse (pairs x states*actions) matrix of winner-minus-loser action counts,
which gives log-ratios and gradients as matrix products.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .curriculum import CurriculumMatrix, phase_dataset
from .envsim import Trajectory
from .errors import UsageError
from .policy import PolicyParams, Segment, bc_loss_and_grad, sequence_logprob
from .prefgen import GroupPair, StepPair, TrajPair

log = logging.getLogger(__name__)

COMPONENTS = ("bc", "traj", "step", "group")
LOG2 = float(np.log(2.0))


@dataclass
class DpoConfig:
    beta: float = 0.3
    include_bc: bool = True
    include_traj: bool = True
    include_step: bool = True
    include_group: bool = True
    lr: float = 0.5
    seed: int = 0
    phase_epochs: tuple[int, int, int] = (20, 20, 20)
    weights: dict = field(default_factory=lambda: {c: 1.0 for c in COMPONENTS})
    curriculum: str = "staged"
    refreeze: bool = False

    def __post_init__(self):
        self.phase_epochs = tuple(int(e) for e in self.phase_epochs)
        if self.beta <= 0:
            raise UsageError("beta must be positive")
        if not any(self.enabled(c) for c in COMPONENTS):
            raise UsageError("at least one loss component must be enabled")
        if self.lr < 0:
            raise UsageError("lr must be non-negative")
        if len(self.phase_epochs) != 3 or min(self.phase_epochs) < 0:
            raise UsageError("phase_epochs must be three non-negative counts")
        if self.curriculum not in ("staged", "static"):
            raise UsageError("curriculum must be 'staged' or 'static'")
        self.weights = {c: float(self.weights.get(c, 1.0)) for c in COMPONENTS}

    def enabled(self, component: str) -> bool:
        return bool(getattr(self, f"include_{component}"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["phase_epochs"] = list(self.phase_epochs)
        return d


@dataclass
class PairLogits:
    logp_theta_w: float
    logp_ref_w: float
    logp_theta_l: float
    logp_ref_l: float
    beta: float

    @property
    def delta_theta(self) -> float:
        return (self.logp_theta_w - self.logp_ref_w) - (self.logp_theta_l - self.logp_ref_l)

    @property
    def margin(self) -> float:
        return self.beta * self.delta_theta


def pair_logits(theta: PolicyParams, ref: PolicyParams, winner: Segment, loser: Segment, beta: float) -> PairLogits:
    return PairLogits(
        sequence_logprob(theta, winner),
        sequence_logprob(ref, winner),
        sequence_logprob(theta, loser),
        sequence_logprob(ref, loser),
        beta,
    )


def dpo_objective(margin: np.ndarray) -> np.ndarray:
    """-log sigmoid(margin), evaluated without overflow."""
    return np.logaddexp(0.0, -margin)


# --- compiled pair batches ----------------------------------------------------------


class PairBatch:
    """Winner-minus-loser action counts for a list of (winner, loser) segments."""

    def __init__(self, pairs: Sequence[tuple[Segment, Segment]], num_states: int, num_actions: int):
        self.num_states, self.num_actions = num_states, num_actions
        rows, cols, vals = [], [], []
        for i, (w, lo) in enumerate(pairs):
            if len(w) == 0 or len(lo) == 0:
                raise UsageError(f"pair {i} has an empty segment")
            for sign, seg in ((1.0, w), (-1.0, lo)):
                for s, a in seg:
                    if not (0 <= s < num_states and 0 <= a < num_actions):
                        raise UsageError(f"pair {i} references ({s}, {a}) outside the policy table")
                    rows.append(i)
                    cols.append(s * num_actions + a)
                    vals.append(sign)
        n = len(pairs)
        shape = (n, num_states * num_actions)
        self.counts = sp.csr_matrix((vals, (rows, cols)), shape=shape)
        self.counts.sum_duplicates()
        # per-state visit differences, used for the softmax normaliser term
        agg = sp.csr_matrix(
            (np.ones(shape[1]), (np.arange(shape[1]), np.arange(shape[1]) // num_actions)),
            shape=(shape[1], num_states),
        )
        self.state_counts = (self.counts @ agg).tocsr()

    def __len__(self) -> int:
        return self.counts.shape[0]

    def delta(self, theta: PolicyParams, ref: PolicyParams) -> np.ndarray:
        """Delta_theta for every pair."""
        d = theta.log_probs().ravel() - ref.log_probs().ravel()
        return self.counts @ d

    def loss_and_grad(self, theta: PolicyParams, ref: PolicyParams, beta: float) -> tuple[float, np.ndarray]:
        n = len(self)
        if n == 0:
            return 0.0, np.zeros_like(theta.logits)
        margin = beta * self.delta(theta, ref)
        loss = float(dpo_objective(margin).mean())
        # d loss_i / d Delta_i = -beta * sigmoid(-margin_i)
        coef = -beta * expit(-margin) / n
        g_counts = (self.counts.T @ coef).reshape(self.num_states, self.num_actions)
        g_rows = self.state_counts.T @ coef
        grad = g_counts - g_rows[:, None] * theta.probs()
        return loss, grad


def traj_segments(data: Sequence[TrajPair]) -> list[tuple[Segment, Segment]]:
    return [(p.winner.pairs(), p.loser.pairs()) for p in data]


def step_segments(data: Sequence[StepPair]) -> list[tuple[Segment, Segment]]:
    return [([(s.obs, s.action) for s in p.winner_suffix], [(s.obs, s.action) for s in p.loser_suffix]) for p in data]


def group_segments(data: Sequence[GroupPair]) -> list[tuple[Segment, Segment]]:
    return [([(s.obs, s.action) for s in p.winner.steps], [(s.obs, s.action) for s in p.loser.steps]) for p in data]


# --- single-pair and per-granularity losses -----------------------------------------


def dpo_pair_loss(theta: PolicyParams, ref: PolicyParams, winner: Segment, loser: Segment, beta: float) -> tuple[float, np.ndarray]:
    batch = PairBatch([(winner, loser)], theta.num_states, theta.num_actions)
    return batch.loss_and_grad(theta, ref, beta)


def _mean_loss(segments, theta, ref, beta, name) -> tuple[float, np.ndarray]:
    if not segments:
        log.warning("%s dataset is empty; contributing zero loss", name)
        return 0.0, np.zeros_like(theta.logits)
    return PairBatch(segments, theta.num_states, theta.num_actions).loss_and_grad(theta, ref, beta)


def loss_traj(theta, ref, data: Sequence[TrajPair], beta: float) -> tuple[float, np.ndarray]:
    return _mean_loss(traj_segments(data), theta, ref, beta, "trajectory")


def loss_step(theta, ref, data: Sequence[StepPair], beta: float) -> tuple[float, np.ndarray]:
    return _mean_loss(step_segments(data), theta, ref, beta, "step")


def loss_group(theta, ref, data: Sequence[GroupPair], beta: float) -> tuple[float, np.ndarray]:
    return _mean_loss(group_segments(data), theta, ref, beta, "group")


# --- composite objective ------------------------------------------------------------


@dataclass
class Datasets:
    expert: list[Trajectory]
    traj: list[TrajPair]
    step: list[StepPair]
    group: list[GroupPair]


class CompiledObjective:
    """Composite loss with the fixed datasets compiled once."""

    def __init__(self, num_states: int, num_actions: int, datasets: Datasets, config: DpoConfig):
        self.config = config
        self.expert = datasets.expert
        self.batches: dict[str, PairBatch | None] = {
            "traj": PairBatch(traj_segments(datasets.traj), num_states, num_actions) if config.include_traj else None,
            "step": PairBatch(step_segments(datasets.step), num_states, num_actions) if config.include_step else None,
            "group": PairBatch(group_segments(datasets.group), num_states, num_actions) if config.include_group else None,
        }
        present = []
        if config.include_bc and self.expert:
            present.append("bc")
        present += [c for c, b in self.batches.items() if b is not None and len(b)]
        if not present:
            raise UsageError("every enabled loss component has empty data")
        for c in COMPONENTS:
            if config.enabled(c) and c not in present:
                log.warning("%s component enabled but its dataset is empty", c)

    def set_group(self, pairs: Sequence[GroupPair], num_states: int, num_actions: int) -> None:
        if self.config.include_group:
            self.batches["group"] = PairBatch(group_segments(pairs), num_states, num_actions)

    def __call__(self, theta: PolicyParams, ref: PolicyParams) -> tuple[float, np.ndarray, dict]:
        cfg = self.config
        parts: dict[str, float] = {c: 0.0 for c in COMPONENTS}
        grad = np.zeros_like(theta.logits)
        if cfg.include_bc and self.expert:
            lbc, gbc = bc_loss_and_grad(theta, self.expert)
            parts["bc"] = lbc
            grad += cfg.weights["bc"] * gbc
        for c, batch in self.batches.items():
            if batch is None or len(batch) == 0:
                continue
            lc, gc = batch.loss_and_grad(theta, ref, cfg.beta)
            parts[c] = lc
            grad += cfg.weights[c] * gc
        total = sum(cfg.weights[c] * parts[c] for c in COMPONENTS)
        return float(total), grad, parts


def loss_hpl(theta: PolicyParams, ref: PolicyParams, datasets: Datasets, config: DpoConfig) -> tuple[float, np.ndarray]:
    """Sum of the enabled components (unit weights unless configured)."""
    total, grad, _ = CompiledObjective(theta.num_states, theta.num_actions, datasets, config)(theta, ref)
    return total, grad


# --- training -----------------------------------------------------------------------


@dataclass
class TrainReport:
    config: dict
    records: list[dict] = field(default_factory=list)
    phase_pair_counts: dict = field(default_factory=dict)
    phase_params: dict = field(default_factory=dict)
    final: PolicyParams | None = None
    gradient_checks: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "phase_pair_counts": self.phase_pair_counts,
            "records": self.records,
            "gradient_checks": self.gradient_checks,
            "final_policy": None if self.final is None else self.final.to_json(),
            "phase_policies": {k: v.to_json() for k, v in self.phase_params.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainReport":
        return cls(
            config=d["config"],
            records=d["records"],
            phase_pair_counts=d["phase_pair_counts"],
            phase_params={k: PolicyParams.from_json(v) for k, v in d.get("phase_policies", {}).items()},
            final=None if d.get("final_policy") is None else PolicyParams.from_json(d["final_policy"]),
            gradient_checks=d.get("gradient_checks", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True) + "\n"

    def loss_csv(self) -> str:
        buf = io.StringIO()
        cols = ["phase", "epoch", "loss_total", "loss_bc", "loss_traj", "loss_step", "loss_group"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({c: r[c] for c in cols})
        return buf.getvalue()


def train_hpl(
    init: PolicyParams,
    ref: PolicyParams,
    datasets: Datasets,
    matrix: CurriculumMatrix | None,
    config: DpoConfig,
) -> TrainReport:
    """Three curriculum phases of full-batch gradient descent on the composite loss.

    Phase s trains on the phase-s group subset (or on every bucket when
    ``config.curriculum == "static"``). ``ref`` is never modified; with
    ``config.refreeze`` a copy of the current policy becomes the reference at
    the start of each phase.
    """
    S, A = init.num_states, init.num_actions
    objective = CompiledObjective(S, A, datasets, config)
    report = TrainReport(config=config.to_json())
    theta = init.with_logits(init.logits.copy())
    current_ref = ref
    for s in (1, 2, 3):
        if config.include_group:
            if matrix is None:
                group = datasets.group
            else:
                group = phase_dataset(matrix, 3 if config.curriculum == "static" else s)
            objective.set_group(group, S, A)
            report.phase_pair_counts[str(s)] = len(group)
        else:
            report.phase_pair_counts[str(s)] = 0
        if config.refreeze and s > 1:
            current_ref = PolicyParams(theta.logits.copy(), "ref")
        for epoch in range(config.phase_epochs[s - 1]):
            total, grad, parts = objective(theta, current_ref)
            report.records.append(
                {
                    "phase": s,
                    "epoch": epoch,
                    "loss_total": total,
                    **{f"loss_{c}": parts[c] for c in COMPONENTS},
                }
            )
            theta = theta.with_logits(theta.logits - config.lr * grad)
        report.phase_params[str(s)] = theta
    report.final = theta
    return report


# --- gradient checking --------------------------------------------------------------


def finite_difference_check(
    fn,
    params: PolicyParams,
    rng: np.random.Generator,
    n: int = 10,
    h: float = 1e-5,
    rows: Sequence[int] | None = None,
) -> float:
    """Relative error ||g - g_fd|| / max(||g||, ||g_fd||) on ``n`` random logits.

    ``fn(params) -> (loss, grad)``. Entries are drawn from ``rows`` when given,
    so the slice lands where the loss actually depends on the parameters.
    """
    _, g = fn(params)
    S, A = params.logits.shape
    pool = np.array([(s, a) for s in (range(S) if rows is None else rows) for a in range(A)])
    pick = pool[rng.choice(len(pool), size=min(n, len(pool)), replace=False)]
    analytic, numeric = [], []
    for s, a in pick:
        lp, lm = params.logits.copy(), params.logits.copy()
        lp[s, a] += h
        lm[s, a] -= h
        fp = fn(params.with_logits(lp))[0]
        fm = fn(params.with_logits(lm))[0]
        numeric.append((fp - fm) / (2 * h))
        analytic.append(g[s, a])
    a_, n_ = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a_), np.linalg.norm(n_), 1e-300)
    return float(np.linalg.norm(a_ - n_) / denom)
