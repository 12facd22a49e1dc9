"""Tabular softmax sequence policy, behaviour cloning, and rollout sampling."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .envsim import EnvConfig, EnvState, Step, Trajectory, outcome_reward, reset, step
from .errors import UsageError
from .seeding import as_rng

log = logging.getLogger(__name__)

Segment = Sequence[tuple[int, int]]


@dataclass
class PolicyParams:
    logits: np.ndarray
    tag: str = "theta"

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 2:
            raise UsageError("logits must be a (num_states, num_actions) table")
        if not np.all(np.isfinite(self.logits)):
            raise UsageError("logits must be finite")

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int, tag: str = "theta") -> "PolicyParams":
        return cls(np.zeros((num_states, num_actions)), tag)

    def with_logits(self, logits: np.ndarray) -> "PolicyParams":
        return PolicyParams(logits, self.tag)

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "tag": self.tag,
            "logits": [float(x) for x in self.logits.ravel()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PolicyParams":
        logits = np.asarray(d["logits"], dtype=float).reshape(d["num_states"], d["num_actions"])
        return cls(logits, d.get("tag", "theta"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check(params: PolicyParams, state: int, action: int | None = None) -> None:
    if not 0 <= state < params.num_states:
        raise UsageError(f"state {state} outside [0, {params.num_states})")
    if action is not None and not 0 <= action < params.num_actions:
        raise UsageError(f"action {action} outside [0, {params.num_actions})")


def action_logprob(params: PolicyParams, state: int, action: int) -> float:
    _check(params, state, action)
    return float(log_softmax(params.logits[state])[action])


def sequence_logprob(params: PolicyParams, segment: Segment, context: Segment | None = None) -> float:
    """Sum of log pi(a|s) over ``segment``.

    ``context`` only fixes where the segment starts; the recorded states already
    carry that information, so it is accepted for symmetry and not scored.
    """
    if len(segment) == 0:
        raise UsageError("cannot score an empty segment")
    s, a = _unzip(segment)
    if s.min() < 0 or s.max() >= params.num_states or a.min() < 0 or a.max() >= params.num_actions:
        raise UsageError("segment index out of range")
    return float(params.log_probs()[s, a].sum())


def _unzip(segment: Segment) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray([(int(s), int(a)) for s, a in segment], dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def score_gradient(params: PolicyParams, segment: Segment, probs: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sequence_logprob`` w.r.t. the logit table."""
    p = params.probs() if probs is None else probs
    s, a = _unzip(segment)
    g = np.zeros_like(params.logits)
    np.add.at(g, s, -p[s])
    np.add.at(g, (s, a), 1.0)
    return g


def state_entropy(params: PolicyParams, state: int) -> float:
    _check(params, state)
    lp = log_softmax(params.logits[state])
    return float(-(np.exp(lp) * lp).sum())


def entropies(params: PolicyParams) -> np.ndarray:
    lp = params.log_probs()
    return -(np.exp(lp) * lp).sum(axis=1)


def sample_action(params: PolicyParams, state: int, rng: np.random.Generator, cdf: np.ndarray | None = None) -> int:
    c = np.cumsum(np.exp(log_softmax(params.logits[state]))) if cdf is None else cdf[state]
    # inverse-CDF on one uniform keeps the stream consumption fixed per step
    return int(min(np.searchsorted(c, rng.random(), side="right"), len(c) - 1))


def action_cdf(params: PolicyParams) -> np.ndarray:
    return np.cumsum(params.probs(), axis=1)


def sample_rollout(
    params: PolicyParams,
    config: EnvConfig,
    start: EnvState,
    max_len: int | None = None,
    seed: int | np.random.Generator | None = None,
    cdf: np.ndarray | None = None,
) -> tuple[list[Step], EnvState]:
    """Sample actions from the softmax until done or ``max_len`` steps."""
    rng = as_rng(seed)
    cdf = action_cdf(params) if cdf is None else cdf
    limit = config.horizon if max_len is None else max_len
    out, state = [], start
    while not state.done and len(out) < limit:
        obs = config.obs(state)
        a = sample_action(params, obs, rng, cdf)
        state, r, _ = step(state, a, config)
        out.append(Step(obs, a, r))
    return out, state


def greedy_rollout(params: PolicyParams, config: EnvConfig, start: EnvState) -> tuple[list[Step], EnvState]:
    out, state = [], start
    while not state.done:
        obs = config.obs(state)
        a = int(np.argmax(params.logits[obs]))  # ties -> lowest index
        state, r, _ = step(state, a, config)
        out.append(Step(obs, a, r))
    return out, state


def rollout_trajectory(params: PolicyParams, config: EnvConfig, seed, cdf: np.ndarray | None = None) -> Trajectory:
    steps, final = sample_rollout(params, config, reset(config), seed=seed, cdf=cdf)
    return Trajectory(config.task_id, config.task_id, steps, outcome_reward(final, config))


def freeze_reference(params: PolicyParams) -> PolicyParams:
    logits = params.logits.copy()
    logits.flags.writeable = False
    return PolicyParams(logits, "ref")


# --- behaviour cloning ------------------------------------------------------------


def bc_loss_and_grad(params: PolicyParams, expert_data: Sequence[Trajectory]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of expert actions, summed over steps and
    averaged over trajectories, with its gradient."""
    if len(expert_data) == 0:
        raise UsageError("behaviour cloning needs at least one expert trajectory")
    lp = params.log_probs()
    p = np.exp(lp)
    s, a = _unzip([sa for tr in expert_data for sa in tr.pairs()])
    n = len(expert_data)
    loss = -lp[s, a].sum() / n
    g = np.zeros_like(params.logits)
    np.add.at(g, s, p[s])
    np.add.at(g, (s, a), -1.0)
    return float(loss), g / n


def bc_train(
    expert_data: Sequence[Trajectory],
    init: PolicyParams,
    lr: float = 0.5,
    epochs: int = 1,
    seed: int | None = None,
    history: list | None = None,
) -> PolicyParams:
    """Full-batch gradient descent on the BC loss.

    Deterministic; ``seed`` is accepted for interface symmetry. If ``history``
    is given, the loss before every update and after the last is appended.
    """
    if len(expert_data) == 0:
        raise UsageError("behaviour cloning needs at least one expert trajectory")
    if lr <= 0:
        raise UsageError("lr must be positive")
    logits = init.logits.copy()
    for _ in range(epochs):
        loss, g = bc_loss_and_grad(PolicyParams(logits, init.tag), expert_data)
        if history is not None:
            history.append(loss)
        logits = logits - lr * g
    out = PolicyParams(logits, init.tag)
    if history is not None:
        history.append(bc_loss_and_grad(out, expert_data)[0])
    return out


def expert_policy(suite_tasks: Iterable[EnvConfig], num_states: int, num_actions: int, scale: float = 50.0) -> PolicyParams:
    """Near-deterministic policy that plays each task's required actions."""
    logits = np.zeros((num_states, num_actions))
    for cfg in suite_tasks:
        for p, a in enumerate(cfg.expert_actions):
            logits[cfg.state_offset + p, a] = scale
    return PolicyParams(logits, "expert")
