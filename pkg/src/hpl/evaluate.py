"""Policy evaluation on a task suite."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .envsim import TaskSuite, outcome_reward, reset
from .errors import UsageError
from .policy import PolicyParams, action_cdf, greedy_rollout, sample_rollout
from .seeding import stream


@dataclass
class EvalSummary:
    episodes: int
    mean_reward: float
    success_rate: float
    subtask_success: dict[str, float]
    seed: int
    decoding: str

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalSummary":
        return cls(**d)


def evaluate(
    params: PolicyParams,
    suite: TaskSuite,
    episodes_per_task: int = 20,
    seed: int = 0,
    decoding: str = "sample",
) -> EvalSummary:
    """Run every task ``episodes_per_task`` times.

    ``subtask_success[k]`` is the fraction of episodes that completed at least
    k + 1 sub-tasks. With greedy decoding every repeat of a task is identical.
    """
    if episodes_per_task < 1:
        raise UsageError("episodes_per_task must be >= 1")
    if decoding not in ("sample", "greedy"):
        raise UsageError("decoding must be 'sample' or 'greedy'")
    cdf = action_cdf(params)
    kmax = max(t.num_subtasks for t in suite.tasks)
    reach = np.zeros(kmax)
    rewards, successes = [], []
    for cfg in suite.tasks:
        rng = stream(seed, cfg.task_id, "eval")
        for _ in range(episodes_per_task):
            if decoding == "greedy":
                _, final = greedy_rollout(params, cfg, reset(cfg))
            else:
                _, final = sample_rollout(params, cfg, reset(cfg), seed=rng, cdf=cdf)
            rewards.append(outcome_reward(final, cfg))
            successes.append(final.completed == cfg.num_subtasks)
            reach[: final.completed] += 1
    n = len(rewards)
    return EvalSummary(
        episodes=n,
        mean_reward=float(np.mean(rewards)),
        success_rate=float(np.mean(successes)),
        subtask_success={str(k): float(reach[k] / n) for k in range(kmax)},
        seed=seed,
        decoding=decoding,
    )
