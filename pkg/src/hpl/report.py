"""Summary tables (CSV) and figures (PNG) from one or more pipeline runs."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import yaml

from .curriculum import LEVELS

PHASE_ARM = "hpl"


def find_runs(out: Path) -> list[Path]:
    """``seed-*`` subdirectories if present, otherwise ``out`` itself."""
    subs = sorted((p for p in out.glob("seed-*") if p.is_dir()), key=lambda p: int(p.name.split("-", 1)[1]))
    return subs or [out]


def _arms(run: Path) -> list[str]:
    return sorted(p.stem for p in (run / "eval").glob("*.json"))


def required_files(runs: list[Path]) -> list[Path]:
    need = []
    for run in runs:
        need += [run / "config.resolved.yaml", run / "curriculum.json", run / "eval" / f"{PHASE_ARM}.json"]
        need += [run / "train" / f"{PHASE_ARM}.json"]
    return need


def missing_files(runs: list[Path]) -> list[Path]:
    return [p for p in required_files(runs) if not p.exists()]


def _seed(run: Path) -> int:
    return int(yaml.safe_load((run / "config.resolved.yaml").read_text())["seed"])


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def phase_rows(runs: list[Path]) -> list[list]:
    rows = []
    for run in runs:
        ev = json.loads((run / "eval" / f"{PHASE_ARM}.json").read_text())
        for s in sorted(ev["phases"], key=int):
            ph = ev["phases"][s]
            rows.append([_seed(run), int(s), ev["phase_pair_counts"][s], _fmt(ph["success_rate"]), _fmt(ph["mean_reward"])])
    return rows


def ablation_rows(runs: list[Path]) -> tuple[list[str], list[list]]:
    arms = sorted(set.intersection(*(set(_arms(r)) for r in runs)))
    table = []
    for run in runs:
        vals = [json.loads((run / "eval" / f"{a}.json").read_text())["final"]["success_rate"] for a in arms]
        table.append((_seed(run), vals))
    rows = [[seed] + [_fmt(v) for v in vals] for seed, vals in table]
    means = np.mean([vals for _, vals in table], axis=0)
    rows.append(["mean"] + [_fmt(v) for v in means])
    return arms, rows


def census_rows(runs: list[Path]) -> list[list]:
    rows = []
    for run in runs:
        counts = json.loads((run / "curriculum.json").read_text())["counts"]
        rows += [[_seed(run), L, D, counts[f"{L},{D}"]] for L in LEVELS for D in LEVELS]
    return rows


def write_report(runs: list[Path], dest: Path, figures: bool = True) -> list[Path]:
    """Write the three tables (and figures unless disabled); return written paths."""
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    phase = phase_rows(runs)
    arms, ablation = ablation_rows(runs)
    census = census_rows(runs)
    tables = {
        "phase_table.csv": _csv(["seed", "phase", "group_pairs", "success_rate", "mean_reward"], phase),
        "ablation.csv": _csv(["seed"] + arms, ablation),
        "bucket_census.csv": _csv(["seed", "L", "D", "count"], census),
    }
    for name, text in tables.items():
        (dest / name).write_text(text)
        written.append(dest / name)
    if figures:
        written += render_figures(phase, arms, ablation, census, dest)
    return written


def render_figures(phase, arms, ablation, census, dest: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    seeds = sorted({r[0] for r in phase})
    for s in seeds:
        pts = [(r[1], float(r[3])) for r in phase if r[0] == s]
        ax.plot(*zip(*pts), marker="o", alpha=0.6, label=f"seed {s}")
    ax.set_xticks([1, 2, 3])
    ax.set_xlabel("curriculum phase")
    ax.set_ylabel("success rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out.append(dest / "phase_progression.png")
    fig.savefig(out[-1], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    means = [float(v) for v in ablation[-1][1:]]
    ax.bar(arms, means, color="tab:gray")
    ax.set_ylabel("mean success rate")
    ax.tick_params(axis="x", labelrotation=30)
    fig.tight_layout()
    out.append(dest / "ablation.png")
    fig.savefig(out[-1], dpi=100)
    plt.close(fig)

    grid = np.zeros((3, 3))
    for _, L, D, c in census:
        grid[L - 1, D - 1] += c
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(grid, cmap="Blues")
    for (i, j), c in np.ndenumerate(grid):
        ax.text(j, i, int(c), ha="center", va="center")
    ax.set_xticks(range(3), [f"D={d}" for d in LEVELS])
    ax.set_yticks(range(3), [f"L={l}" for l in LEVELS])
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    out.append(dest / "bucket_census.png")
    fig.savefig(out[-1], dpi=100)
    plt.close(fig)
    return out
