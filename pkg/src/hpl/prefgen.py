"""Preference datasets at trajectory, step, and action-group granularity.

All generators take a mapping ``task_id -> EnvConfig`` (or a TaskSuite) and a
root seed. Each expert trajectory draws from its own stream keyed by
(task_id, stage), and outputs are sorted by (task_id, position), so the
result does not depend on worker count or processing order.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .envsim import (
    EnvConfig,
    Step,
    TaskSuite,
    Trajectory,
    outcome_reward,
    replay_prefix,
    step,
    steps_from_json,
    steps_to_json,
)
from .errors import UsageError
from .policy import PolicyParams, action_cdf, sample_action, sample_rollout
from .seeding import as_rng, stream
from .segment import Segmenter

log = logging.getLogger(__name__)

REJECTION_BUDGET = 32
DEFAULT_MC_SAMPLES = 8


@dataclass
class TrajPair:
    instruction: str
    winner: Trajectory
    loser: Trajectory

    @property
    def task_id(self) -> str:
        return self.winner.task_id

    @property
    def reward_w(self) -> float:
        return self.winner.outcome_reward

    @property
    def reward_l(self) -> float:
        return self.loser.outcome_reward

    def to_json(self) -> dict:
        return {"u": self.instruction, "winner": self.winner.to_json(), "loser": self.loser.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "TrajPair":
        return cls(d["u"], Trajectory.from_json(d["winner"]), Trajectory.from_json(d["loser"]))


@dataclass
class StepPair:
    task_id: str
    t: int
    prefix: list[Step]
    winner_suffix: list[Step]
    loser_suffix: list[Step]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "t": self.t,
            "prefix": steps_to_json(self.prefix),
            "winner_suffix": steps_to_json(self.winner_suffix),
            "loser_suffix": steps_to_json(self.loser_suffix),
        }

    @classmethod
    def from_json(cls, d: dict) -> "StepPair":
        return cls(d["task_id"], int(d["t"]), steps_from_json(d["prefix"]),
                   steps_from_json(d["winner_suffix"]), steps_from_json(d["loser_suffix"]))


@dataclass
class ActionGroup:
    source_task: str
    span: tuple[int, int]
    context: list[Step]
    steps: list[Step]
    r_hat: float | None = None
    origin: str = "expert"

    def __post_init__(self):
        if len(self.steps) < 1:
            raise UsageError("an action group needs at least one step")
        if self.origin == "expert" and len(self.steps) != self.span[1] - self.span[0] + 1:
            raise UsageError("span length does not match the number of steps")


@dataclass
class GroupPair:
    task_id: str
    context: list[Step]
    winner: ActionGroup
    loser: ActionGroup
    delta_r: float
    length: int

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "context": steps_to_json(self.context),
            "winner": {"span": list(self.winner.span), "steps": steps_to_json(self.winner.steps), "r_hat": self.winner.r_hat},
            "loser": {"steps": steps_to_json(self.loser.steps), "r_hat": self.loser.r_hat},
            "delta_r": None if math.isnan(self.delta_r) else self.delta_r,
            "length": self.length,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroupPair":
        ctx = steps_from_json(d["context"])
        span = tuple(d["winner"]["span"])
        w = ActionGroup(d["task_id"], span, ctx, steps_from_json(d["winner"]["steps"]), d["winner"]["r_hat"], "expert")
        lsteps = steps_from_json(d["loser"]["steps"])
        lo = ActionGroup(d["task_id"], span, ctx, lsteps, d["loser"]["r_hat"], "sampled")
        return cls(d["task_id"], ctx, w, lo, math.nan if d["delta_r"] is None else float(d["delta_r"]), int(d["length"]))


def _configs(env: Mapping[str, EnvConfig] | TaskSuite | EnvConfig) -> Mapping[str, EnvConfig]:
    if isinstance(env, TaskSuite):
        return env.by_id()
    if isinstance(env, EnvConfig):
        return {env.task_id: env}
    return env


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _check_expert(expert: Iterable[Trajectory]) -> None:
    for tr in expert:
        if tr.outcome_reward != 1.0:
            raise UsageError(f"expert trajectory {tr.task_id} has outcome {tr.outcome_reward} != 1")


# --- trajectory level ---------------------------------------------------------------


def _traj_pair_for(tr: Trajectory, ref: PolicyParams, configs, seed: int) -> list[TrajPair]:
    cfg = configs[tr.task_id]
    rng = stream(seed, tr.task_id, "prefs.traj")
    steps, final = sample_rollout(ref, cfg, replay_prefix(cfg, []), seed=rng)
    loser = Trajectory(tr.task_id, tr.instruction, steps, outcome_reward(final, cfg))
    if loser.outcome_reward < tr.outcome_reward:
        return [TrajPair(tr.instruction, tr, loser)]
    return []


def gen_traj_pairs(expert: Sequence[Trajectory], ref: PolicyParams, env, seed: int, workers: int = 1) -> list[TrajPair]:
    """One reference rollout per expert trajectory; keep it iff it scores lower."""
    _check_expert(expert)
    fn = partial(_traj_pair_for, ref=ref, configs=_configs(env), seed=seed)
    out = [p for ps in _map(fn, list(expert), workers) for p in ps]
    return sorted(out, key=lambda p: p.task_id)


# --- step level ---------------------------------------------------------------------


def _alternative_action(ref: PolicyParams, obs: int, avoid: int, rng: np.random.Generator, cdf) -> int | None:
    for _ in range(REJECTION_BUDGET):
        a = sample_action(ref, obs, rng, cdf)
        if a != avoid:
            return a
    return None


def _step_pairs_for(tr: Trajectory, ref: PolicyParams, configs, seed: int, mc_samples: int) -> tuple[list[StepPair], int]:
    cfg = configs[tr.task_id]
    rng = stream(seed, tr.task_id, "prefs.step")
    cdf = action_cdf(ref)
    pairs, skipped = [], 0
    for t in range(len(tr)):
        prefix = tr.steps[:t]
        state = replay_prefix(cfg, prefix)
        obs = cfg.obs(state)
        expert_a = tr.steps[t].action
        alt = _alternative_action(ref, obs, expert_a, rng, cdf)
        if alt is None:
            skipped += 1
            continue
        s1, r, _ = step(state, alt, cfg)
        rest, final = sample_rollout(ref, cfg, s1, seed=rng, cdf=cdf)
        loser = [Step(obs, alt, r)] + rest
        if mc_samples > 0:
            mc_rng = stream(seed, tr.task_id, "prefs.step.mc", t)
            r_w = estimate_from_state(replay_prefix(cfg, tr.steps[: t + 1]), ref, cfg, mc_samples, mc_rng, cdf)
            r_l = estimate_from_state(s1, ref, cfg, mc_samples, stream(seed, tr.task_id, "prefs.step.mc", t), cdf)
            keep = r_w - r_l > 0
        else:
            keep = outcome_reward(final, cfg) < tr.outcome_reward
        if keep:
            pairs.append(StepPair(tr.task_id, t, list(prefix), list(tr.steps[t:]), loser))
    return pairs, skipped


def gen_step_pairs(
    expert: Sequence[Trajectory],
    ref: PolicyParams,
    env,
    seed: int,
    workers: int = 1,
    counters: dict | None = None,
    mc_samples: int = 0,
) -> list[StepPair]:
    """For every expert step, branch with a reference-sampled action different
    from the expert's and finish the episode with the reference policy.

    By default a branch is kept iff its realised outcome is below the expert's;
    with ``mc_samples > 0`` it is kept iff the MC value estimate after the
    expert action exceeds the one after the alternative.
    """
    _check_expert(expert)
    fn = partial(_step_pairs_for, ref=ref, configs=_configs(env), seed=seed, mc_samples=mc_samples)
    results = _map(fn, list(expert), workers)
    if counters is not None:
        counters["rejection_exhausted"] = counters.get("rejection_exhausted", 0) + sum(r[1] for r in results)
    out = [p for ps, _ in results for p in ps]
    return sorted(out, key=lambda p: (p.task_id, p.t))


# --- Monte-Carlo group rewards ------------------------------------------------------


def estimate_from_state(state, ref: PolicyParams, cfg: EnvConfig, m: int, rng, cdf=None) -> float:
    if state.done:
        return outcome_reward(state, cfg)
    cdf = action_cdf(ref) if cdf is None else cdf
    total = 0.0
    for _ in range(m):
        _, final = sample_rollout(ref, cfg, state, seed=rng, cdf=cdf)
        total += outcome_reward(final, cfg)
    return total / m


def estimate_group_reward(
    group: ActionGroup,
    ref: PolicyParams,
    config: EnvConfig,
    m: int = DEFAULT_MC_SAMPLES,
    seed: int | np.random.Generator | None = 0,
    cdf: np.ndarray | None = None,
) -> float:
    """Mean final outcome of ``m`` reference rollouts started after the group."""
    if m < 1:
        raise UsageError("M must be >= 1")
    state = replay_prefix(config, list(group.context) + list(group.steps))
    return estimate_from_state(state, ref, config, m, as_rng(seed), cdf)


# --- group level --------------------------------------------------------------------


def _group_candidates_for(tr: Trajectory, ref: PolicyParams, segmenter: Segmenter, configs, seed: int):
    cfg = configs[tr.task_id]
    cdf = action_cdf(ref)
    seg = segmenter(tr, ref)
    rng = stream(seed, tr.task_id, "prefs.group")
    out = []
    for start, end in seg.boundaries:
        k = end - start + 1
        context = list(tr.steps[:start])
        state = replay_prefix(cfg, context)
        loser_steps, _ = sample_rollout(ref, cfg, state, max_len=k, seed=rng, cdf=cdf)
        if len(loser_steps) != k:
            # episode ended inside the group; cannot happen for valid experts
            continue
        w = ActionGroup(tr.task_id, (start, end), context, list(tr.steps[start : end + 1]), origin="expert")
        lo = ActionGroup(tr.task_id, (start, end), context, loser_steps, origin="sampled")
        out.append(GroupPair(tr.task_id, context, w, lo, float("nan"), k))
    return out, seg, list(segmenter.fallback_events)


def sample_group_candidates(
    expert: Sequence[Trajectory],
    ref: PolicyParams,
    segmenter: Segmenter,
    env,
    seed: int = 0,
    workers: int = 1,
    segmentations: list | None = None,
) -> list[GroupPair]:
    """Segment each expert trajectory and draw one same-length reference group
    per expert group from the same context. Rewards are left unset."""
    _check_expert(expert)
    fn = partial(_group_candidates_for, ref=ref, segmenter=segmenter, configs=_configs(env), seed=seed)
    results = _map(fn, list(expert), workers)
    if segmentations is not None:
        segmentations.extend((tr.task_id, seg) for tr, (_, seg, _) in zip(expert, results))
    if workers > 1 and len(results) > 1:
        # workers each mutated their own pickled copy of the segmenter
        for _, _, events in results:
            segmenter.fallback_events.extend(events)
    out = [p for ps, _, _ in results for p in ps]
    return sorted(out, key=lambda p: (p.task_id, p.winner.span[0]))


def _score_task(pairs: list[GroupPair], ref: PolicyParams, configs, m: int, seed: int) -> list[GroupPair]:
    cdf = action_cdf(ref)
    kept = []
    for p in pairs:
        cfg = configs[p.task_id]
        start = p.winner.span[0]
        # common random numbers: identical groups get identical estimates
        r_w = estimate_group_reward(p.winner, ref, cfg, m, stream(seed, p.task_id, "mc", start), cdf)
        r_l = estimate_group_reward(p.loser, ref, cfg, m, stream(seed, p.task_id, "mc", start), cdf)
        if r_w - r_l > 0:
            w = replace(p.winner, r_hat=r_w)
            lo = replace(p.loser, r_hat=r_l)
            kept.append(GroupPair(p.task_id, p.context, w, lo, r_w - r_l, p.length))
    return kept


def score_group_candidates(
    candidates: Sequence[GroupPair],
    ref: PolicyParams,
    env,
    m: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    workers: int = 1,
) -> list[GroupPair]:
    """Estimate both rewards of every candidate with ``m`` rollouts and keep the
    pairs whose gap is strictly positive."""
    if m < 1:
        raise UsageError("M must be >= 1")
    by_task: dict[str, list[GroupPair]] = {}
    for p in candidates:
        by_task.setdefault(p.task_id, []).append(p)
    fn = partial(_score_task, ref=ref, configs=_configs(env), m=m, seed=seed)
    results = _map(fn, [by_task[t] for t in sorted(by_task)], workers)
    out = [p for ps in results for p in ps]
    return sorted(out, key=lambda p: (p.task_id, p.winner.span[0]))


def gen_group_pairs(
    expert: Sequence[Trajectory],
    ref: PolicyParams,
    segmenter: Segmenter,
    env,
    m: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    workers: int = 1,
    segmentations: list | None = None,
) -> list[GroupPair]:
    """Pair every expert group with a same-length reference sample from the same
    context; keep pairs whose estimated reward gap is strictly positive."""
    if m < 1:
        raise UsageError("M must be >= 1")
    cands = sample_group_candidates(expert, ref, segmenter, env, seed, workers, segmentations)
    return score_group_candidates(cands, ref, env, m, seed, workers)
