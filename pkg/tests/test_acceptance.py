"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""
import itertools
import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    ACCEPTANCE,
    exact_outcome_expectation,
    random_group_pairs,
    random_params,
    random_step_pairs,
    random_traj_pairs,
)
from hpl.analysis import k_of_epsilon, run_grid, theoretical_bounds
from hpl.curriculum import PHASE_BUCKETS, CurriculumThresholds, build_matrix, difficulty_level, length_level, phase_dataset
from hpl.dpo import finite_difference_check, group_segments, loss_group, loss_step, loss_traj, step_segments, traj_segments
from hpl.envsim import EnvConfig, Trajectory, replay_prefix, scripted_expert
from hpl.errors import ValidationError
from hpl.pipeline import Pipeline, PipelineConfig, run_seeds
from hpl.policy import PolicyParams, bc_loss_and_grad, freeze_reference
from hpl.prefgen import ActionGroup, estimate_group_reward
from hpl.segment import (
    OracleSegmenter,
    is_partition,
    segment_fixed_k,
    segment_fixed_n,
    segment_semantic,
    segment_uncertainty,
    validate_response,
)
from test_segment import INVALID, VALID, _traj

LOG2 = math.log(2.0)
SEEDS = [0, 1, 2, 3, 4]


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# --- 1 ---------------------------------------------------------------------------

_identity_worst = []


@settings(max_examples=100, deadline=None, derandomize=True)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(2, 6), st.integers(1, 12), st.floats(0.01, 5.0))
def _identity_case(seed, S, A, n, beta):
    rng = np.random.default_rng(seed)
    ref = freeze_reference(random_params(rng, S, A, scale=3.0))
    err = max(
        abs(loss_traj(ref, ref, random_traj_pairs(rng, S, A, n), beta)[0] - LOG2),
        abs(loss_step(ref, ref, random_step_pairs(rng, S, A, n), beta)[0] - LOG2),
        abs(loss_group(ref, ref, random_group_pairs(rng, S, A, n), beta)[0] - LOG2),
    )
    _identity_worst.append(err)


def test_criterion_1_identity_loss():
    t0 = time.perf_counter()
    _identity_case()
    dt = time.perf_counter() - t0
    worst = max(_identity_worst)
    record(1, len(_identity_worst) >= 100 and worst <= 1e-12 and dt < 10, f"{len(_identity_worst)} cases, max |L - log 2| = {worst:.1e}, {dt:.1f}s")


# --- 2 ---------------------------------------------------------------------------


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    S, A = 8, 4
    worst = {}
    for kind in ("bc", "traj", "step", "group"):
        errs = []
        for i in range(50):
            rng = np.random.default_rng(1000 + i)
            ref = freeze_reference(random_params(rng, S, A))
            theta = random_params(rng, S, A)
            if kind == "bc":
                data = [Trajectory("t", "t", p.winner.steps, 1.0) for p in random_traj_pairs(rng, S, A, 4)]
                fn = lambda q, d=data: bc_loss_and_grad(q, d)  # noqa: E731
                rows = sorted({s.obs for tr in data for s in tr.steps})
            else:
                gen = {"traj": random_traj_pairs, "step": random_step_pairs, "group": random_group_pairs}[kind]
                loss = {"traj": loss_traj, "step": loss_step, "group": loss_group}[kind]
                segf = {"traj": traj_segments, "step": step_segments, "group": group_segments}[kind]
                data = gen(rng, S, A, 6)
                fn = lambda q, d=data, loss=loss: loss(q, ref, d, 0.3)  # noqa: E731
                rows = sorted({s for w, lo in segf(data) for s, _ in list(w) + list(lo)})
            errs.append(finite_difference_check(fn, theta, rng, n=10, h=1e-5, rows=rows))
        worst[kind] = max(errs)
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-5 for v in worst.values()) and dt < 60
    record(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s")


# --- 3 ---------------------------------------------------------------------------


def test_criterion_3_partitions():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = {"fixed_n": 0, "fixed_k": 0, "uncertainty": 0, "oracle": 0}
    for _ in range(1000):
        n = int(rng.integers(1, 41))
        tr = _traj(n)
        bad["fixed_n"] += not is_partition(segment_fixed_n(tr, int(rng.integers(1, n + 1))).boundaries, n)
        bad["fixed_k"] += not is_partition(segment_fixed_k(tr, int(rng.integers(1, 41))).boundaries, n)
        ref = PolicyParams(rng.normal(size=(n, 1 + int(rng.integers(1, 6)))) * 2)
        thr = float(rng.uniform(-0.5, 2.0))
        bad["uncertainty"] += not is_partition(segment_uncertainty(tr, ref, thr).boundaries, n)
        lengths = tuple(int(x) for x in rng.integers(1, 6, size=int(rng.integers(1, 6))))
        cfg = EnvConfig(tuple(tuple(int(a) for a in rng.integers(0, 4, size=k)) for k in lengths), num_actions=4, horizon=sum(lengths) + 2)
        et = scripted_expert(cfg)
        bad["oracle"] += not is_partition(segment_semantic(et, OracleSegmenter()).boundaries, len(et))
    examples = [
        segment_fixed_n(_traj(7), 3).sizes == [3, 2, 2],
        segment_fixed_n(_traj(6), 3).sizes == [2, 2, 2],
        segment_fixed_n(_traj(5), 5).sizes == [1] * 5,
        segment_fixed_k(_traj(7), 3).sizes == [3, 3, 1],
        segment_fixed_k(_traj(3), 5).sizes == [3],
        segment_fixed_k(_traj(6), 3).sizes == [3, 3],
    ]
    dt = time.perf_counter() - t0
    ok = not any(bad.values()) and all(examples) and dt < 10
    record(3, ok, f"violations {bad}, worked examples {sum(examples)}/6, {dt:.1f}s")


# --- 4 ---------------------------------------------------------------------------


def test_criterion_4_validator():
    t0 = time.perf_counter()
    accepted = sum(validate_response(raw, n) == spans for raw, n, spans in VALID)
    rejected = 0
    for raw, n, _ in INVALID:
        try:
            validate_response(raw, n)
        except ValidationError:
            rejected += 1
    dt = time.perf_counter() - t0
    ok = accepted == len(VALID) and rejected == len(INVALID) == 12 and dt < 1
    record(4, ok, f"accepted {accepted}/{len(VALID)} valid, rejected {rejected}/{len(INVALID)} invalid, {dt:.2f}s")


# --- 5 ---------------------------------------------------------------------------


def test_criterion_5_mc_calibration():
    t0 = time.perf_counter()
    cfg = EnvConfig(((0, 1), (1, 0)), num_actions=2, horizon=8)
    tr = scripted_expert(cfg)
    hits = {}
    for M in (8, 64):
        good = 0
        for rep in range(100):
            rng = np.random.default_rng(rep)
            ref = PolicyParams(rng.normal(size=(cfg.num_states, 2)), "ref")
            cut = int(rng.integers(1, len(tr) + 1))
            g = ActionGroup(cfg.task_id, (0, cut - 1), [], tr.steps[:cut])
            exact = exact_outcome_expectation(cfg, ref, replay_prefix(cfg, tr.steps[:cut]))
            est = estimate_group_reward(g, ref, cfg, m=M, seed=10_000 + rep)
            good += abs(est - exact) <= 3 / math.sqrt(M)
        hits[M] = good
    dt = time.perf_counter() - t0
    record(5, all(v >= 99 for v in hits.values()) and dt < 60, f"within 3/sqrt(M): M=8 {hits[8]}/100, M=64 {hits[64]}/100, {dt:.1f}s")


# --- 6 ---------------------------------------------------------------------------


def test_criterion_6_curriculum():
    t0 = time.perf_counter()
    th = CurriculumThresholds((0, 3, 6), (1.0, 0.7, 0.4))
    grid = [round(0.05 * i, 2) for i in range(1, 21)]
    cells = list(itertools.product(range(1, 11), grid))
    pairs = random_group_pairs(np.random.default_rng(6), 4, 3, len(cells), max_len=1)
    mismatches = 0
    for p, (length, dr) in zip(pairs, cells):
        p.length, p.delta_r = length, dr
        want_l = 1 if length <= 3 else 2 if length <= 6 else 3
        want_d = 1 if dr >= 0.7 else 2 if dr >= 0.4 else 3
        mismatches += (length_level(length, th), difficulty_level(dr, th)) != (want_l, want_d)
    m = build_matrix(pairs, th)
    ident = lambda ps: {id(p) for p in ps}  # noqa: E731
    sets_ok = (
        ident(phase_dataset(m, 1)) == ident(m[(1, 1)])
        and ident(phase_dataset(m, 2)) == ident(m[(1, 1)]) | ident(m[(1, 2)]) | ident(m[(2, 1)])
        and ident(phase_dataset(m, 3)) == ident(pairs)
        and PHASE_BUCKETS[1] == ((1, 1),)
        and m.total() == len(pairs)
    )
    dt = time.perf_counter() - t0
    record(6, mismatches == 0 and sets_ok and dt < 5, f"{len(cells)} sweep points, {mismatches} mismatches, phase set identities {'hold' if sets_ok else 'broken'}, {dt:.2f}s")


# --- 7 ---------------------------------------------------------------------------


def test_criterion_7_bias_variance():
    t0 = time.perf_counter()
    rows, summary = run_grid([1, 2, 4, 8], [0.9], [16], [8], beta=0.3, replications=2000)
    k = k_of_epsilon(0.1, 0.9, 0.3, 1.0)
    bound = theoretical_bounds(k, max(k, 8), 0.9, 0.3, 1.0)[0]
    failed = [c["check"] for c in summary["checks"] if not c["passed"]]
    dt = time.perf_counter() - t0
    ok = summary["passed"] and k == 39 and bound <= 0.1 and dt < 600
    record(7, ok, f"{len(summary['checks'])} grid checks, failed {failed}, k(0.1)={k}, bound {bound:.6f}, {dt:.1f}s")


# --- 8 and 9 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    results = run_seeds(PipelineConfig(), out, SEEDS)
    return out, results, time.perf_counter() - t0


def test_criterion_8_directional_replication(desk_runs):
    _, results, dt = desk_runs
    chain_ = ("hpl", "step_only", "traj_only", "bc_only")
    wins = sum(results[s][a].success_rate > results[s][b].success_rate for s in SEEDS for a, b in zip(chain_, chain_[1:]))
    mean = {arm: float(np.mean([results[s][arm].success_rate for s in SEEDS])) for arm in results[SEEDS[0]]}
    ok = wins >= 8 and mean["hpl"] > mean["static"] and dt < 900
    detail = f"adjacent wins {wins}/15, mean success " + ", ".join(f"{a} {mean[a]:.4f}" for a in (*chain_, "static")) + f", {dt:.0f}s"
    record(8, ok, detail)


def test_criterion_9_reproducibility(desk_runs, tmp_path):
    out, _, _ = desk_runs
    t0 = time.perf_counter()
    again = tmp_path / "again"
    Pipeline(PipelineConfig(seed=SEEDS[0]), again).run()
    a = json.loads((out / "seed-0" / "manifest.json").read_text())["files"]
    b = json.loads((again / "manifest.json").read_text())["files"]
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    data_files = [k for k in a if k.endswith((".jsonl", ".json", ".csv")) and not k.startswith("manifests/")]
    dt = time.perf_counter() - t0
    record(9, not differ and dt < 300, f"{len(a)} artifacts hashed ({len(data_files)} data and report files), {len(differ)} differ, {dt:.1f}s")

