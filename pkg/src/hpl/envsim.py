"""Synthetic long-horizon "sub-task chain" environments.

An episode is a sequence of K sub-tasks. Sub-task k is solved by emitting its
required action sequence verbatim; a wrong action sends progress back to the
start of the current sub-task and still consumes a step. Transitions are
deterministic, so every bit of randomness in this package lives in policies.

The observation of a chain state is its progress position ``p`` (number of
correct actions so far, counted across sub-tasks) shifted by the task's
``state_offset``, so several tasks can share one tabular policy.

``TabularMDP`` is the small generic finite-horizon MDP used by the analysis
module, where a fixed horizon and a dense transition table are more
convenient than the chain family.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import yaml

from .errors import CapabilityError, ConfigError, UsageError
from .seeding import as_rng

MAX_ENUMERABLE_STATES = 100_000

REWARD_MODES = ("graded", "binary")


@dataclass(frozen=True)
class EnvConfig:
    subtasks: tuple[tuple[int, ...], ...]
    num_actions: int
    horizon: int
    gamma: float = 0.9
    reward_mode: str = "graded"
    task_id: str = "task-0"
    state_offset: int = 0
    tie_break: str = "lowest"

    def __post_init__(self):
        # normalise lists coming from yaml/json into hashable tuples
        object.__setattr__(self, "subtasks", tuple(tuple(int(a) for a in s) for s in self.subtasks))
        self.validate()

    def validate(self) -> None:
        if self.num_actions < 1:
            raise ConfigError("num_actions must be >= 1")
        if not self.subtasks:
            raise ConfigError("at least one sub-task is required")
        for k, seq in enumerate(self.subtasks):
            if len(seq) == 0:
                raise ConfigError(f"sub-task {k} has an empty required sequence")
            if any(a < 0 or a >= self.num_actions for a in seq):
                raise ConfigError(f"sub-task {k} uses an action outside [0, {self.num_actions})")
        if self.horizon < self.total_length:
            raise ConfigError(
                f"horizon T={self.horizon} is shorter than the expert length {self.total_length}"
            )
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma={self.gamma} outside [0, 1)")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if self.state_offset < 0:
            raise ConfigError("state_offset must be non-negative")

    @property
    def num_subtasks(self) -> int:
        return len(self.subtasks)

    @property
    def total_length(self) -> int:
        return sum(len(s) for s in self.subtasks)

    @property
    def num_states(self) -> int:
        """Local progress positions 0..total_length (the last one is terminal)."""
        return self.total_length + 1

    @property
    def starts(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum([0] + [len(s) for s in self.subtasks[:-1]]))

    @property
    def expert_actions(self) -> tuple[int, ...]:
        return tuple(itertools.chain.from_iterable(self.subtasks))

    @property
    def subtask_reward(self) -> float:
        return 1.0 / self.num_subtasks if self.reward_mode == "graded" else 1.0

    @property
    def r_max(self) -> float:
        return self.subtask_reward

    def obs(self, state: "EnvState") -> int:
        return self.state_offset + state.progress

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "reward_mode": self.reward_mode,
            "state_offset": self.state_offset,
            "tie_break": self.tie_break,
            "subtasks": [list(s) for s in self.subtasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class EnvState:
    progress: int = 0
    completed: int = 0
    steps: int = 0
    done: bool = False


class Step(NamedTuple):
    obs: int
    action: int
    reward: float


@dataclass
class Trajectory:
    task_id: str
    instruction: str
    steps: list[Step]
    outcome_reward: float
    subtask_boundaries: list[tuple[int, int]] | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    def pairs(self) -> list[tuple[int, int]]:
        return [(s.obs, s.action) for s in self.steps]

    def to_json(self) -> dict:
        d = {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "steps": [{"obs": s.obs, "action": s.action, "reward": s.reward} for s in self.steps],
            "outcome_reward": self.outcome_reward,
        }
        if self.subtask_boundaries is not None:
            d["subtask_boundaries"] = [list(b) for b in self.subtask_boundaries]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        b = d.get("subtask_boundaries")
        return cls(
            task_id=d["task_id"],
            instruction=d["instruction"],
            steps=[Step(int(s["obs"]), int(s["action"]), float(s["reward"])) for s in d["steps"]],
            outcome_reward=float(d["outcome_reward"]),
            subtask_boundaries=None if b is None else [tuple(x) for x in b],
        )


def steps_to_json(steps: Sequence[Step]) -> list[dict]:
    return [{"obs": s.obs, "action": s.action, "reward": s.reward} for s in steps]


def steps_from_json(rows: Sequence[dict]) -> list[Step]:
    return [Step(int(s["obs"]), int(s["action"]), float(s["reward"])) for s in rows]


# --- dynamics -----------------------------------------------------------------


def reset(config: EnvConfig, seed: int | None = None) -> EnvState:
    """Initial state. Transitions are deterministic, so ``seed`` has no effect."""
    config.validate()
    return EnvState()


def step(state: EnvState, action: int, config: EnvConfig) -> tuple[EnvState, float, bool]:
    if state.done:
        raise UsageError("step() called on a finished episode")
    if not 0 <= action < config.num_actions:
        raise UsageError(f"action {action} outside [0, {config.num_actions})")
    k = state.completed
    start = config.starts[k]
    offset = state.progress - start
    seq = config.subtasks[k]
    reward = 0.0
    completed = k
    if action == seq[offset]:
        progress = state.progress + 1
        if offset + 1 == len(seq):
            completed = k + 1
            if config.reward_mode == "graded" or completed == config.num_subtasks:
                reward = config.subtask_reward
    else:
        progress = start
    steps = state.steps + 1
    done = steps >= config.horizon or completed == config.num_subtasks
    return EnvState(progress, completed, steps, done), reward, done


def outcome_reward(state: EnvState, config: EnvConfig) -> float:
    if config.reward_mode == "graded":
        return state.completed / config.num_subtasks
    return 1.0 if state.completed == config.num_subtasks else 0.0


def subtask_spans(config: EnvConfig) -> list[tuple[int, int]]:
    return [(s, s + len(seq) - 1) for s, seq in zip(config.starts, config.subtasks)]


def scripted_expert(config: EnvConfig, seed: int | None = None) -> Trajectory:
    """Execute every required sequence verbatim; the result is the unique
    shortest successful episode."""
    state = reset(config, seed)
    steps = []
    for a in config.expert_actions:
        obs = config.obs(state)
        state, r, _ = step(state, a, config)
        steps.append(Step(obs, a, r))
    return Trajectory(
        task_id=config.task_id,
        instruction=config.task_id,
        steps=steps,
        outcome_reward=outcome_reward(state, config),
        subtask_boundaries=subtask_spans(config),
    )


def _action_of(x) -> int:
    return int(x.action) if hasattr(x, "action") else int(x)


def replay_prefix(config: EnvConfig, prefix: Iterable) -> EnvState:
    """State reached by applying ``prefix`` (actions or Steps) from reset."""
    state = reset(config)
    for x in prefix:
        a = _action_of(x)
        if not 0 <= a < config.num_actions:
            raise UsageError(f"prefix contains out-of-range action {a}")
        state, _, _ = step(state, a, config)
    return state


def simulate(config: EnvConfig, actions: Iterable[int], start: EnvState | None = None) -> tuple[list[Step], EnvState]:
    """Apply ``actions`` and record the visited observations and rewards."""
    state = reset(config) if start is None else start
    out = []
    for a in actions:
        obs = config.obs(state)
        state, r, _ = step(state, int(a), config)
        out.append(Step(obs, int(a), r))
    return out, state


def optimal_values(config: EnvConfig) -> dict[tuple[int, int], float]:
    """Finite-horizon optimal values keyed by (progress, steps_elapsed).

    Done states (task complete or horizon reached) are worth 0.
    """
    n = config.num_states * (config.horizon + 1)
    if n > MAX_ENUMERABLE_STATES:
        raise CapabilityError(f"{n} time-indexed states exceed the {MAX_ENUMERABLE_STATES} limit")
    L, T = config.total_length, config.horizon
    # completed count is a function of progress for chain states
    completed_of = np.searchsorted(np.cumsum([len(s) for s in config.subtasks]), np.arange(L + 1), side="right")
    V = np.zeros((L + 1, T + 1))
    for t in range(T - 1, -1, -1):
        for p in range(L):
            st = EnvState(p, int(completed_of[p]), t, False)
            best = -np.inf
            for a in range(config.num_actions):
                nxt, r, done = step(st, a, config)
                best = max(best, r + (0.0 if done else config.gamma * V[nxt.progress, t + 1]))
            V[p, t] = best
    return {(p, t): float(V[p, t]) for p in range(L + 1) for t in range(T + 1)}


# --- task suites ----------------------------------------------------------------


@dataclass
class TaskSuite:
    """A list of chain tasks sharing one action space and one state index."""

    tasks: list[EnvConfig] = field(default_factory=list)

    @property
    def num_states(self) -> int:
        return sum(t.num_states for t in self.tasks)

    @property
    def num_actions(self) -> int:
        return self.tasks[0].num_actions

    def by_id(self) -> dict[str, EnvConfig]:
        return {t.task_id: t for t in self.tasks}

    def to_dict(self) -> dict:
        return {"tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSuite":
        return cls([EnvConfig.from_dict(t) for t in d["tasks"]])


def make_suite(
    num_tasks: int,
    num_subtasks: int | tuple[int, int] = 4,
    subtask_length: tuple[int, int] = (1, 5),
    num_actions: int = 6,
    horizon: int = 24,
    gamma: float = 0.9,
    reward_mode: str = "graded",
    seed: int | np.random.Generator = 0,
) -> TaskSuite:
    """Random suite; sub-task lengths are drawn uniformly from ``subtask_length``
    (inclusive) and redrawn until the expert fits in the horizon."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    rng = as_rng(seed)
    kmin, kmax = (num_subtasks, num_subtasks) if isinstance(num_subtasks, int) else num_subtasks
    lo, hi = subtask_length
    if kmin * lo > horizon:
        raise ConfigError("horizon too short for the smallest possible task")
    tasks, offset = [], 0
    for i in range(num_tasks):
        while True:
            k = int(rng.integers(kmin, kmax + 1))
            lengths = rng.integers(lo, hi + 1, size=k)
            if lengths.sum() <= horizon:
                break
        subtasks = tuple(tuple(int(a) for a in rng.integers(0, num_actions, size=n)) for n in lengths)
        cfg = EnvConfig(
            subtasks=subtasks,
            num_actions=num_actions,
            horizon=horizon,
            gamma=gamma,
            reward_mode=reward_mode,
            task_id=f"task-{i:03d}",
            state_offset=offset,
        )
        tasks.append(cfg)
        offset += cfg.num_states
    return TaskSuite(tasks)


# --- serialization ---------------------------------------------------------------


def write_config(config: EnvConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=None))


def read_config(path: str | Path) -> EnvConfig:
    return EnvConfig.from_dict(yaml.safe_load(Path(path).read_text()))


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=False, separators=(",", ":")) + "\n" for r in records)


def write_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> int:
    trajs = list(trajs)
    Path(path).write_text(dumps_jsonl(t.to_json() for t in trajs))
    return len(trajs)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [Trajectory.from_json(d) for d in read_jsonl(path)]


# --- generic tabular MDP (analysis) ----------------------------------------------


@dataclass(frozen=True)
class TabularMDP:
    """Deterministic finite-horizon MDP with a dense (S, A) table.

    Episodes always last exactly ``horizon`` steps and start in ``init_state``.
    """

    next_state: np.ndarray
    reward: np.ndarray
    horizon: int
    gamma: float
    init_state: int = 0

    def __post_init__(self):
        ns = np.asarray(self.next_state, dtype=np.int64)
        r = np.asarray(self.reward, dtype=float)
        object.__setattr__(self, "next_state", ns)
        object.__setattr__(self, "reward", r)
        if ns.shape != r.shape or ns.ndim != 2:
            raise ConfigError("next_state and reward must share an (S, A) shape")
        if ns.min() < 0 or ns.max() >= ns.shape[0]:
            raise ConfigError("next_state points outside the state space")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma={self.gamma} outside [0, 1)")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if r.min() < 0:
            raise ConfigError("rewards must be non-negative")

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def r_max(self) -> float:
        return float(self.reward.max())

    def values(self) -> np.ndarray:
        """Optimal values ``V[t, s]`` for t = 0..horizon, with ``V[horizon] = 0``."""
        if self.num_states * (self.horizon + 1) > MAX_ENUMERABLE_STATES:
            raise CapabilityError("state space too large for exact dynamic programming")
        V = np.zeros((self.horizon + 1, self.num_states))
        for t in range(self.horizon - 1, -1, -1):
            V[t] = (self.reward + self.gamma * V[t + 1][self.next_state]).max(axis=1)
        return V

    def with_horizon(self, horizon: int) -> "TabularMDP":
        return replace(self, horizon=horizon)


def default_analysis_mdp(horizon: int = 8, gamma: float = 0.9) -> TabularMDP:
    """Four-state, two-action cycle with uneven rewards (R_max = 1).

    Action 0 moves one step around the cycle, action 1 jumps two. Every state
    is recurrent, so trajectory segments mix quickly.
    """
    next_state = np.array([[1, 2], [2, 3], [3, 0], [0, 1]])
    reward = np.array([[0.2, 1.0], [0.9, 0.1], [0.5, 0.0], [0.0, 0.7]])
    return TabularMDP(next_state, reward, horizon, gamma)
