"""Bias and variance of DPO losses at trajectory, step, and group granularity.

Model
-----
Pairs are drawn on a small deterministic ``TabularMDP`` of horizon T. The
winner side of every pair follows the policy ``theta`` and the loser side an
independent continuation of ``ref`` from the same state. The score a loss sees
for a pair is the discounted return difference of the two compared units,

    R(u) = sum_i gamma^(i - t0) r_i + gamma^|u| V*(t0 + |u|, s_end),

and the per-pair loss is ``-log sigmoid(beta * (R(u_w) - R(u_l)))``.

* traj: one pair per trajectory, both units run to the horizon.
* step: every suffix t = 0..T-1 of a theta trajectory against a fresh ref
  suffix from s_t (T correlated pairs per trajectory).
* group(k): floor(T/k) non-overlapping k-step windows of a theta trajectory,
  each against a fresh k-step ref sample from the window's first state.

The population target for every granularity scores the *full* remaining
return, so traj and step losses are unbiased and the group loss carries the
truncation bias bounded by ``2 beta R_max gamma^k / (1 - gamma)``.

Everything exact is computed by enumerating action sequences, which caps the
horizon at a few dozen paths per start state times 2^T.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .envsim import TabularMDP
from .errors import CapabilityError, UsageError
from .policy import PolicyParams
from .seeding import as_rng

GRANULARITIES = ("traj", "step", "group")
MAX_PATHS = 1_000_000


@dataclass(frozen=True)
class ReturnSpec:
    gamma: float
    r_max: float
    values: np.ndarray  # V*[t, s], t = 0..T

    @classmethod
    def from_mdp(cls, mdp: TabularMDP, r_max: float | None = None) -> "ReturnSpec":
        return cls(mdp.gamma, mdp.r_max if r_max is None else r_max, mdp.values())

    def bellman_residual(self, mdp: TabularMDP) -> float:
        V = self.values
        target = (mdp.reward[None] + self.gamma * V[1:][:, mdp.next_state]).max(axis=2)
        return float(np.abs(V[:-1] - target).max())


@dataclass
class BiasVarResult:
    granularity: str
    k: int | None
    bias_hat: float
    stderr_bias: float
    var_hat: float
    population_loss: float
    replications: int
    dataset_size: int
    horizon: int
    sigma_hat: float
    max_sample_loss: float
    min_sample_loss: float

    def to_row(self) -> dict:
        return asdict(self)


def discounted_return(rewards: Sequence[float], t0: int, end_state: int, spec: ReturnSpec) -> float:
    g = spec.gamma
    total = sum(g**i * r for i, r in enumerate(rewards))
    return float(total + g ** len(rewards) * spec.values[t0 + len(rewards), end_state])


def bradley_terry_prob(delta_star: float, beta: float) -> float:
    return float(0.5 * (1.0 + math.tanh(0.5 * beta * delta_star)))


def pair_loss(delta: np.ndarray | float, beta: float) -> np.ndarray:
    return np.logaddexp(0.0, -beta * np.asarray(delta, dtype=float))


# --- closed forms -------------------------------------------------------------------


def k_of_epsilon(eps: float, gamma: float, beta: float, r_max: float) -> int:
    """Smallest group length whose truncation-bias bound is at most ``eps``."""
    if not 0.0 < gamma < 1.0 or beta <= 0 or r_max <= 0:
        raise UsageError("need gamma in (0,1), beta > 0 and R_max > 0")
    arg = (1.0 - gamma) * eps / (2.0 * beta * r_max)
    if arg >= 1.0:
        return 1
    x = math.log(arg) / math.log(gamma)
    # absorb float noise when the log lands on an integer
    if abs(x - round(x)) < 1e-9:
        x = round(x)
    return max(1, math.ceil(x))


def l_max(gamma: float, beta: float, r_max: float) -> float:
    return float(np.logaddexp(0.0, 2.0 * beta * r_max / (1.0 - gamma)))


def theoretical_bounds(k: int, T: int, gamma: float, beta: float, r_max: float) -> tuple[float, float, float]:
    """(group bias bound, group/traj variance ratio bound, per-sample loss cap)."""
    if k > T:
        raise UsageError(f"group length k={k} exceeds the horizon T={T}")
    if k < 1:
        raise UsageError("k must be >= 1")
    bias = 2.0 * beta * r_max * gamma**k / (1.0 - gamma)
    return bias, k / T, l_max(gamma, beta, r_max)


def step_variance_envelope(N: int, T: int, gamma: float, beta: float, r_max: float) -> float:
    return (1.0 + 2.0 * gamma / (1.0 - gamma) ** 2) * l_max(gamma, beta, r_max) ** 2 / (N * T)


# --- exact enumeration --------------------------------------------------------------


def _paths(mdp: TabularMDP, probs: np.ndarray, start: int, t0: int, length: int, spec: ReturnSpec):
    """All action sequences of ``length`` from ``start`` at time ``t0``.

    Returns (path probabilities, discounted reward sums, end states, visited
    states with shape (P, length + 1)).
    """
    A = mdp.num_actions
    P = A**length
    if P > MAX_PATHS:
        raise CapabilityError(f"{P} paths exceed the enumeration limit {MAX_PATHS}")
    acts = np.array(np.unravel_index(np.arange(P), (A,) * length)).T.reshape(P, length) if length else np.zeros((1, 0), int)
    states = np.empty((P, length + 1), dtype=np.int64)
    states[:, 0] = start
    prob = np.ones(P)
    ret = np.zeros(P)
    for i in range(length):
        s, a = states[:, i], acts[:, i]
        prob *= probs[s, a]
        ret += spec.gamma**i * mdp.reward[s, a]
        states[:, i + 1] = mdp.next_state[s, a]
    return prob, ret, states[:, -1], states


def _unit_dist(mdp, probs, start, t0, length, spec, tail: bool = True):
    """Distribution of R(u) for a ``length``-step unit of ``probs`` from ``start``."""
    p, r, end, _ = _paths(mdp, probs, start, t0, length, spec)
    if tail:
        r = r + spec.gamma**length * spec.values[t0 + length, end]
    return p, r


def _policies(policies: tuple[PolicyParams, PolicyParams]) -> tuple[np.ndarray, np.ndarray]:
    theta, ref = policies
    return theta.probs(), ref.probs()


def _theta_trajectories(mdp, p_theta, spec):
    p, _, _, states = _paths(mdp, p_theta, mdp.init_state, 0, mdp.horizon, spec)
    return p, states


def _group_layout(granularity: str, k: int | None, T: int) -> tuple[list[int], list[int]]:
    """Unit start times and unit lengths used by the empirical loss."""
    if granularity == "traj":
        return [0], [T]
    if granularity == "step":
        return list(range(T)), [T - t for t in range(T)]
    if granularity == "group":
        if k is None or not 1 <= k <= T:
            raise UsageError(f"group length k={k} must lie in [1, T={T}]")
        M = T // k
        return [j * k for j in range(M)], [k] * M
    raise UsageError(f"unknown granularity {granularity!r}")


def _per_trajectory_terms(granularity, k, mdp, policies, spec, beta, full_return: bool):
    """Enumerate theta trajectories; for each, the conditional mean and second
    moment of every unit's loss given the trajectory."""
    p_theta, p_ref = _policies(policies)
    T = mdp.horizon
    starts, lengths = _group_layout(granularity, k, T)
    ptraj, states = _theta_trajectories(mdp, p_theta, spec)
    # per-path rewards at each step are needed to score winner windows
    acts = np.array(np.unravel_index(np.arange(len(ptraj)), (mdp.num_actions,) * T)).T.reshape(len(ptraj), T)
    step_r = mdp.reward[states[:, :-1], acts]
    g = np.empty((len(ptraj), len(starts)))
    q = np.empty_like(g)
    for j, (t, L) in enumerate(zip(starts, lengths)):
        win_len = T - t if full_return else L
        disc = spec.gamma ** np.arange(win_len)
        rw = step_r[:, t : t + win_len] @ disc + spec.gamma**win_len * spec.values[t + win_len, states[:, t + win_len]]
        lose_len = T - t if full_return else L
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for s in np.unique(states[:, t]):
            cache[int(s)] = _unit_dist(mdp, p_ref, int(s), t, lose_len, spec)
        for s, (pl, rl) in cache.items():
            idx = states[:, t] == s
            loss = pair_loss(rw[idx, None] - rl[None, :], beta)
            g[idx, j] = loss @ pl
            q[idx, j] = (loss**2) @ pl
    return ptraj, g, q


def population_loss(granularity: str, k: int | None, mdp: TabularMDP, policies, spec: ReturnSpec, beta: float) -> float:
    """Exact target loss: every unit scored by its full remaining return."""
    p, g, _ = _per_trajectory_terms(granularity, k, mdp, policies, spec, beta, full_return=True)
    return float(p @ g.mean(axis=1))


def expected_empirical_loss(granularity: str, k: int | None, mdp, policies, spec, beta) -> float:
    """Exact mean of the empirical loss (units truncated as the estimator sees them)."""
    p, g, _ = _per_trajectory_terms(granularity, k, mdp, policies, spec, beta, full_return=False)
    return float(p @ g.mean(axis=1))


def exact_bias(granularity, k, mdp, policies, spec, beta) -> float:
    return expected_empirical_loss(granularity, k, mdp, policies, spec, beta) - population_loss(
        granularity, k, mdp, policies, spec, beta
    )


def exact_variance(granularity: str, k: int | None, mdp, policies, spec, beta, N: int) -> float:
    """Exact variance of the empirical loss over datasets of N trajectories."""
    p, g, q = _per_trajectory_terms(granularity, k, mdp, policies, spec, beta, full_return=False)
    M = g.shape[1]
    # E[Y^2 | tau] with losers independent given tau
    second = (q.sum(axis=1) + g.sum(axis=1) ** 2 - (g**2).sum(axis=1)) / M**2
    mean = p @ g.mean(axis=1)
    return float((p @ second - mean**2) / N)


def exact_sigma(granularity, k, mdp, policies, spec, beta) -> float:
    """Per-sample loss variance under the granularity's pair distribution."""
    p, g, q = _per_trajectory_terms(granularity, k, mdp, policies, spec, beta, full_return=False)
    m1 = p @ g.mean(axis=1)
    m2 = p @ q.mean(axis=1)
    return float(m2 - m1**2)


# --- sampling -----------------------------------------------------------------------


def _sample_actions(probs: np.ndarray, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs[states], axis=-1)
    u = rng.random(states.shape)[..., None]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[1] - 1)


def _rollout_returns(mdp, probs, starts: np.ndarray, t0: int, length: int, spec, rng) -> np.ndarray:
    s = starts.copy()
    ret = np.zeros(s.shape)
    for i in range(length):
        a = _sample_actions(probs, s, rng)
        ret += spec.gamma**i * mdp.reward[s, a]
        s = mdp.next_state[s, a]
    return ret + spec.gamma**length * spec.values[t0 + length, s]


def sample_losses(granularity, k, mdp, policies, spec, beta, n_traj: int, rng) -> np.ndarray:
    """Per-unit losses, shape (n_traj, units per trajectory)."""
    p_theta, p_ref = _policies(policies)
    T = mdp.horizon
    starts, lengths = _group_layout(granularity, k, T)
    states = np.empty((n_traj, T + 1), dtype=np.int64)
    states[:, 0] = mdp.init_state
    rewards = np.empty((n_traj, T))
    for t in range(T):
        a = _sample_actions(p_theta, states[:, t], rng)
        rewards[:, t] = mdp.reward[states[:, t], a]
        states[:, t + 1] = mdp.next_state[states[:, t], a]
    out = np.empty((n_traj, len(starts)))
    for j, (t, L) in enumerate(zip(starts, lengths)):
        rw = rewards[:, t : t + L] @ spec.gamma ** np.arange(L) + spec.gamma**L * spec.values[t + L, states[:, t + L]]
        rl = _rollout_returns(mdp, p_ref, states[:, t], t, L, spec, rng)
        out[:, j] = pair_loss(rw - rl, beta)
    return out


def estimate_bias_variance(
    granularity: str,
    k: int | None,
    mdp: TabularMDP,
    policies,
    spec: ReturnSpec,
    beta: float,
    N: int,
    replications: int,
    seed: int | np.random.Generator = 0,
) -> BiasVarResult:
    if replications < 2:
        raise UsageError("need at least two replications")
    rng = as_rng(seed)
    losses = sample_losses(granularity, k, mdp, policies, spec, beta, N * replications, rng)
    per_dataset = losses.reshape(replications, N * losses.shape[1]).mean(axis=1)
    pop = population_loss(granularity, k, mdp, policies, spec, beta)
    var_hat = float(per_dataset.var(ddof=1))
    return BiasVarResult(
        granularity=granularity,
        k=k,
        bias_hat=float(per_dataset.mean() - pop),
        stderr_bias=math.sqrt(var_hat / replications),
        var_hat=var_hat,
        population_loss=pop,
        replications=replications,
        dataset_size=N,
        horizon=mdp.horizon,
        sigma_hat=float(losses.var(ddof=1)),
        max_sample_loss=float(losses.max()),
        min_sample_loss=float(losses.min()),
    )


def perturbed_policy(ref: PolicyParams, scale: float = 0.1, seed: int | np.random.Generator = 0) -> PolicyParams:
    rng = as_rng(seed)
    return PolicyParams(ref.logits + scale * rng.standard_normal(ref.logits.shape), "theta")


def default_reference(mdp: TabularMDP, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(rng.standard_normal((mdp.num_states, mdp.num_actions)), "ref")


# --- experiment grid ----------------------------------------------------------------


CSV_COLUMNS = ["granularity", "k", "N", "T", "gamma", "beta", "bias_hat", "stderr_bias", "var_hat", "bound_bias", "bound_var_ratio"]


def run_grid(
    ks: Sequence[int],
    gammas: Sequence[float],
    Ns: Sequence[int],
    Ts: Sequence[int],
    beta: float = 0.3,
    replications: int = 2000,
    seed: int = 0,
    var_slack: float = 1.25,
    policy_seed: int = 0,
) -> tuple[list[dict], dict]:
    """Run traj, step, and every group k on each (gamma, N, T) cell.

    Returns CSV rows and a pass/fail summary of the asserted bounds.
    """
    from .seeding import stream

    if not (ks and gammas and Ns and Ts):
        raise UsageError("every grid axis needs at least one value")
    rows, checks = [], []
    for gamma in gammas:
        for T in Ts:
            mdp = default_analysis_mdp_for(T, gamma)
            spec = ReturnSpec.from_mdp(mdp, r_max=1.0)
            ref = default_reference(mdp, policy_seed)
            theta = perturbed_policy(ref, 0.1, stream(policy_seed, "theta"))
            pol = (theta, ref)
            for N in Ns:
                cell = f"gamma={gamma},T={T},N={N}"
                res = {}
                units: list[tuple[str, int | None]] = [("traj", None), ("step", None)]
                units += [("group", k) for k in ks if k <= T]
                for g, k in units:
                    try:
                        r = estimate_bias_variance(g, k, mdp, pol, spec, beta, N, replications, stream(seed, cell, g, str(k)))
                    except CapabilityError as exc:
                        raise CapabilityError(f"grid cell {cell}, {g} k={k}: {exc}") from None
                    res[(g, k)] = r
                    bb, vr, lm = (0.0, 1.0, l_max(gamma, beta, 1.0)) if g != "group" else theoretical_bounds(k, T, gamma, beta, 1.0)
                    rows.append(
                        {
                            "granularity": g,
                            "k": "" if k is None else k,
                            "N": N,
                            "T": T,
                            "gamma": gamma,
                            "beta": beta,
                            "bias_hat": r.bias_hat,
                            "stderr_bias": r.stderr_bias,
                            "var_hat": r.var_hat,
                            "bound_bias": bb,
                            "bound_var_ratio": vr if g == "group" else "",
                        }
                    )
                    checks.append({"cell": cell, "check": f"loss_range[{g},{k}]", "passed": bool(r.min_sample_loss >= 0 and r.max_sample_loss <= lm)})
                traj = res[("traj", None)]
                for g in ("traj", "step"):
                    r = res[(g, None)]
                    checks.append({"cell": cell, "check": f"zero_bias[{g}]", "passed": bool(abs(r.bias_hat) <= 3 * r.stderr_bias),
                                   "value": r.bias_hat, "limit": 3 * r.stderr_bias})
                step = res[("step", None)]
                env = step_variance_envelope(N, T, gamma, beta, 1.0)
                checks.append({"cell": cell, "check": "step_variance_envelope", "passed": bool(step.var_hat <= env), "value": step.var_hat, "limit": env})
                for k in ks:
                    if k > T:
                        continue
                    r = res[("group", k)]
                    bb, vr, _ = theoretical_bounds(k, T, gamma, beta, 1.0)
                    lim = bb + 3 * r.stderr_bias
                    checks.append({"cell": cell, "check": f"bias_envelope[k={k}]", "passed": bool(abs(r.bias_hat) <= lim), "value": r.bias_hat, "limit": lim})
                    vlim = vr * traj.var_hat * var_slack
                    checks.append({"cell": cell, "check": f"variance_ratio[k={k}]", "passed": bool(r.var_hat <= vlim), "value": r.var_hat, "limit": vlim})
    summary = {"passed": all(c["passed"] for c in checks), "checks": checks}
    return rows, summary


def default_analysis_mdp_for(T: int, gamma: float) -> TabularMDP:
    from .envsim import default_analysis_mdp

    return default_analysis_mdp(horizon=T, gamma=gamma)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
