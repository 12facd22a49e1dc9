"""Small builders shared by the test modules."""
from __future__ import annotations

import itertools

import numpy as np

from hpl.envsim import EnvConfig, Step, Trajectory, outcome_reward, reset, scripted_expert, step
from hpl.policy import PolicyParams, sample_rollout
from hpl.prefgen import ActionGroup, GroupPair, StepPair, TrajPair


def chain(lengths=(2, 3, 2), num_actions=4, horizon=12, reward_mode="graded", seed=0, **kw) -> EnvConfig:
    rng = np.random.default_rng(seed)
    subtasks = tuple(tuple(int(a) for a in rng.integers(0, num_actions, n)) for n in lengths)
    return EnvConfig(subtasks, num_actions, horizon, reward_mode=reward_mode, **kw)


def random_params(rng, S, A, scale=1.0, tag="theta") -> PolicyParams:
    return PolicyParams(rng.normal(0.0, scale, (S, A)), tag)


def random_steps(rng, S, A, n) -> list[Step]:
    return [Step(int(rng.integers(S)), int(rng.integers(A)), 0.0) for _ in range(n)]


def random_traj_pairs(rng, S, A, n, max_len=6) -> list[TrajPair]:
    out = []
    for _ in range(n):
        w = Trajectory("t", "t", random_steps(rng, S, A, int(rng.integers(1, max_len + 1))), 1.0)
        lo = Trajectory("t", "t", random_steps(rng, S, A, int(rng.integers(1, max_len + 1))), 0.0)
        out.append(TrajPair("t", w, lo))
    return out


def random_step_pairs(rng, S, A, n, max_len=6) -> list[StepPair]:
    out = []
    for _ in range(n):
        t = int(rng.integers(0, 3))
        out.append(
            StepPair(
                "t",
                t,
                random_steps(rng, S, A, t),
                random_steps(rng, S, A, int(rng.integers(1, max_len + 1))),
                random_steps(rng, S, A, int(rng.integers(1, max_len + 1))),
            )
        )
    return out


def random_group_pairs(rng, S, A, n, max_len=5) -> list[GroupPair]:
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_len + 1))
        w = ActionGroup("t", (0, k - 1), [], random_steps(rng, S, A, k), 1.0)
        lo = ActionGroup("t", (0, k - 1), [], random_steps(rng, S, A, k), 0.5, "sampled")
        out.append(GroupPair("t", [], w, lo, 0.5, k))
    return out


def exact_outcome_expectation(cfg: EnvConfig, params: PolicyParams, state) -> float:
    """E[outcome] of rolling ``params`` to the end from ``state``, by full recursion."""
    if state.done:
        return outcome_reward(state, cfg)
    p = params.probs()[cfg.obs(state)]
    return sum(p[a] * exact_outcome_expectation(cfg, params, step(state, a, cfg)[0]) for a in range(cfg.num_actions))


def brute_force_value(cfg: EnvConfig) -> float:
    """max over every action sequence of the discounted return from reset."""
    best = 0.0
    for seq in itertools.product(range(cfg.num_actions), repeat=cfg.horizon):
        state, total = reset(cfg), 0.0
        for i, a in enumerate(seq):
            state, r, done = step(state, a, cfg)
            total += cfg.gamma**i * r
            if done:
                break
        best = max(best, total)
    return best


def expert_and_rollouts(cfg: EnvConfig, params: PolicyParams, seed=0):
    return scripted_expert(cfg), sample_rollout(params, cfg, reset(cfg), seed=seed)


# criterion number -> (passed, detail); filled by the acceptance suite, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
