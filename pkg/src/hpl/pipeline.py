"""Stage-by-stage experiment driver with hashed, resumable artifacts.

Every stage writes its outputs under the run directory plus a manifest in
``manifests/<stage>.json`` recording a key (hash of the stage parameters and
upstream file hashes) and the sha256 of each output. A stage whose manifest key
and output hashes still match is skipped, so deleting any artifact regenerates
exactly that stage and whatever depends on it.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import yaml

from .curriculum import CurriculumMatrix, CurriculumThresholds, build_matrix
from .dpo import Datasets, DpoConfig, TrainReport, train_hpl
from .envsim import TaskSuite, dumps_jsonl, make_suite, read_jsonl, read_trajectories, scripted_expert
from .errors import ConfigError, HplError, UsageError
from .evaluate import EvalSummary, evaluate
from .policy import PolicyParams, bc_train, freeze_reference
from .prefgen import (
    DEFAULT_MC_SAMPLES,
    GroupPair,
    StepPair,
    TrajPair,
    gen_step_pairs,
    gen_traj_pairs,
    sample_group_candidates,
    score_group_candidates,
)
from .segment import HttpSegmenter, Segmenter, calibrate_entropy_threshold
from .seeding import stream

log = logging.getLogger(__name__)

ARMS: dict[str, dict | None] = {
    "bc_only": None,
    "traj_only": {"include_step": False, "include_group": False},
    "step_only": {"include_traj": False, "include_group": False},
    "hpl": {},
    "static": {"curriculum": "static"},
    "no_group": {"include_group": False},
}
DEFAULT_ARMS = ("bc_only", "traj_only", "step_only", "hpl", "static")
STAGES = ("suite", "expert", "bc", "prefs", "mc", "bucket", "train", "eval")


class StageError(HplError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    env: dict = field(
        default_factory=lambda: {
            "num_tasks": 20,
            "num_subtasks": 4,
            "subtask_length": [1, 5],
            "num_actions": 6,
            "horizon": 24,
            "gamma": 0.9,
            "reward_mode": "graded",
        }
    )
    bc: dict = field(default_factory=lambda: {"epochs": 100, "lr": 0.5})
    segmenter: dict = field(default_factory=lambda: {"strategy": "semantic", "params": {}, "url": None, "timeout": 10.0})
    mc_samples: int = DEFAULT_MC_SAMPLES
    step_mc_samples: int = 0
    thresholds: dict = field(default_factory=lambda: {"length_edges": [0, 3, 6], "difficulty_edges": [1.0, 0.3, 0.1]})
    dpo: dict = field(default_factory=lambda: {"beta": 0.3, "lr": 0.5, "phase_epochs": [30, 30, 30], "refreeze": False})
    arms: list = field(default_factory=lambda: list(DEFAULT_ARMS))
    eval: dict = field(default_factory=lambda: {"episodes_per_task": 20, "decoding": "sample"})

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.step_mc_samples < 0:
            raise ConfigError("step_mc_samples must be >= 0")
        if int(self.env.get("num_tasks", 0)) < 1:
            raise ConfigError("env.num_tasks must be >= 1")
        if int(self.bc.get("epochs", 0)) < 0:
            raise ConfigError("bc.epochs must be >= 0")
        if int(self.eval.get("episodes_per_task", 0)) < 1:
            raise ConfigError("eval.episodes_per_task must be >= 1")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown or not self.arms:
            raise ConfigError(f"unknown or empty arms: {unknown or self.arms}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("arms must be distinct")
        self.curriculum_thresholds()
        self.dpo_config("hpl")

    def curriculum_thresholds(self) -> CurriculumThresholds:
        return CurriculumThresholds(**self.thresholds)

    def dpo_config(self, arm: str) -> DpoConfig:
        try:
            return DpoConfig(**{**self.dpo, **(ARMS[arm] or {})})
        except TypeError as exc:
            raise ConfigError(f"bad dpo section: {exc}") from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        base = cls()
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {}
        for k in names:
            default = getattr(base, k)
            v = d.get(k, default)
            if isinstance(default, dict) and isinstance(v, dict):
                allowed = {f.name for f in fields(DpoConfig)} if k == "dpo" else set(default)
                extra = set(v) - allowed
                if extra:
                    raise ConfigError(f"unknown keys in {k}: {sorted(extra)}")
            # nested sections merge over the defaults
            merged[k] = {**default, **v} if isinstance(default, dict) and isinstance(v, dict) else v
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path} must hold a mapping")
        return cls.from_dict(d)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


class Pipeline:
    """Runs stages against one run directory."""

    def __init__(self, config: PipelineConfig, out: str | Path):
        self.config = config
        self.out = Path(out)
        self.ran: list[str] = []
        self.skipped: list[str] = []

    # --- bookkeeping ----------------------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.out / rel

    def manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def require(self, rels: list[str]) -> None:
        missing = [r for r in rels if not self.path(r).exists()]
        if missing:
            raise FileNotFoundError("missing artifacts: " + ", ".join(str(self.path(r)) for r in missing))

    def _run(self, stage: str, params: dict, inputs: list[str], outputs: list[str], build: Callable[[], dict]) -> bool:
        """Run ``build`` unless an up-to-date manifest exists. Returns True if it ran."""
        self.require(inputs)
        in_hashes = {r: sha256_file(self.path(r)) for r in inputs}
        key = _key({"stage": stage, "params": params, "inputs": in_hashes})
        mpath = self.manifest_path(stage)
        if mpath.exists():
            old = json.loads(mpath.read_text())
            if old.get("key") == key and all(
                self.path(r).exists() and sha256_file(self.path(r)) == h for r, h in old.get("outputs", {}).items()
            ):
                self.skipped.append(stage)
                return False
        try:
            extra = build() or {}
        except (HplError, OSError):
            raise
        except Exception as exc:  # surface the stage name for anything unexpected
            raise StageError(stage, exc) from exc
        manifest = {
            "stage": stage,
            "key": key,
            "params": params,
            "inputs": in_hashes,
            "outputs": {r: sha256_file(self.path(r)) for r in outputs},
            **extra,
        }
        _write(mpath, _dump_json(manifest))
        self.ran.append(stage)
        return True

    def write_resolved_config(self) -> None:
        _write(self.path("config.resolved.yaml"), self.config.dumps())

    # --- loaders --------------------------------------------------------------------

    def suite(self) -> TaskSuite:
        return TaskSuite.from_dict(json.loads(self.path("suite.json").read_text()))

    def expert(self):
        return read_trajectories(self.path("expert.jsonl"))

    def ref(self) -> PolicyParams:
        return freeze_reference(PolicyParams.load(self.path("ref.json")))

    def traj_pairs(self) -> list[TrajPair]:
        return [TrajPair.from_json(r) for r in read_jsonl(self.path("prefs/traj.jsonl"))]

    def step_pairs(self) -> list[StepPair]:
        return [StepPair.from_json(r) for r in read_jsonl(self.path("prefs/step.jsonl"))]

    def group_pairs(self) -> list[GroupPair]:
        return [GroupPair.from_json(r) for r in read_jsonl(self.path("prefs/group.jsonl"))]

    def matrix(self) -> CurriculumMatrix:
        return build_matrix(self.group_pairs(), self.config.curriculum_thresholds())

    def train_report(self, arm: str) -> TrainReport:
        return TrainReport.from_json(json.loads(self.path(f"train/{arm}.json").read_text()))

    # --- stages ---------------------------------------------------------------------

    def stage_suite(self) -> None:
        env = self.config.env

        def build():
            kw = dict(env)
            kw["subtask_length"] = tuple(kw.get("subtask_length", (1, 5)))
            suite = make_suite(seed=stream(self.config.seed, "env"), **kw)
            _write(self.path("suite.json"), _dump_json(suite.to_dict()))
            return {"counts": {"tasks": len(suite.tasks), "states": suite.num_states}}

        self._run("suite", {"env": env, "seed": self.config.seed}, [], ["suite.json"], build)

    def stage_expert(self) -> None:
        def build():
            trajs = [scripted_expert(c) for c in self.suite().tasks]
            _write(self.path("expert.jsonl"), dumps_jsonl(t.to_json() for t in trajs))
            return {"counts": {"trajectories": len(trajs)}}

        self._run("expert", {}, ["suite.json"], ["expert.jsonl"], build)

    def stage_bc(self) -> None:
        bc = self.config.bc

        def build():
            suite = self.suite()
            init = PolicyParams.uniform(suite.num_states, suite.num_actions)
            history: list = []
            ref = freeze_reference(bc_train(self.expert(), init, float(bc["lr"]), int(bc["epochs"]), history=history))
            ref.save(self.path("ref.json"))
            _write(self.path("bc_loss.json"), _dump_json([float(x) for x in history]))
            return {"counts": {"epochs": int(bc["epochs"])}}

        self._run("bc", {"bc": bc}, ["suite.json", "expert.jsonl"], ["ref.json", "bc_loss.json"], build)

    def segmenter(self, ref: PolicyParams) -> Segmenter:
        spec = self.config.segmenter
        strategy = spec.get("strategy", "semantic")
        params = dict(spec.get("params") or {})
        provider = None
        if strategy == "semantic" and spec.get("url"):
            provider = HttpSegmenter(spec["url"], float(spec["timeout"]))
        if strategy == "uncertainty" and "threshold" not in params:
            params["threshold"] = calibrate_entropy_threshold(self.expert(), ref, float(params.get("q", 0.8)))
        return Segmenter(strategy, params, provider)

    def stage_prefs(self) -> None:
        cfg = self.config
        params = {
            "segmenter": cfg.segmenter,
            "step_mc_samples": cfg.step_mc_samples,
            "seed": cfg.seed,
        }
        outputs = ["prefs/traj.jsonl", "prefs/step.jsonl", "prefs/group_candidates.jsonl", "prefs/segmentations.jsonl"]

        def build():
            suite, expert, ref = self.suite(), self.expert(), self.ref()
            traj = gen_traj_pairs(expert, ref, suite, cfg.seed, cfg.workers)
            counters: dict = {}
            step = gen_step_pairs(expert, ref, suite, cfg.seed, cfg.workers, counters, cfg.step_mc_samples)
            seg = self.segmenter(ref)
            segs: list = []
            cands = sample_group_candidates(expert, ref, seg, suite, cfg.seed, cfg.workers, segs)
            _write(self.path("prefs/traj.jsonl"), dumps_jsonl(p.to_json() for p in traj))
            _write(self.path("prefs/step.jsonl"), dumps_jsonl(p.to_json() for p in step))
            _write(self.path("prefs/group_candidates.jsonl"), dumps_jsonl(p.to_json() for p in cands))
            _write(
                self.path("prefs/segmentations.jsonl"),
                dumps_jsonl({"task_id": t, "strategy": s.strategy, "spans": [list(b) for b in s.boundaries], "params": s.params} for t, s in segs),
            )
            for name, data in (("traj", traj), ("step", step), ("group candidates", cands)):
                if not data:
                    log.warning("%s dataset is empty", name)
            return {
                "strategy": seg.strategy,
                "segmenter_params": seg.params,
                "seed": cfg.seed,
                "counts": {"traj": len(traj), "step": len(step), "group_candidates": len(cands), **counters},
                "fallback_events": seg.fallback_events,
            }

        self._run("prefs", params, ["suite.json", "expert.jsonl", "ref.json"], outputs, build)

    def stage_mc(self) -> None:
        cfg = self.config

        def build():
            cands = [GroupPair.from_json(r) for r in read_jsonl(self.path("prefs/group_candidates.jsonl"))]
            kept = score_group_candidates(cands, self.ref(), self.suite(), cfg.mc_samples, cfg.seed, cfg.workers)
            if not kept:
                log.warning("no group pair has a positive reward gap")
            _write(self.path("prefs/group.jsonl"), dumps_jsonl(p.to_json() for p in kept))
            return {"M": cfg.mc_samples, "seed": cfg.seed, "counts": {"candidates": len(cands), "kept": len(kept)}}

        self._run(
            "mc",
            {"M": cfg.mc_samples, "seed": cfg.seed},
            ["suite.json", "ref.json", "prefs/group_candidates.jsonl"],
            ["prefs/group.jsonl"],
            build,
        )

    def stage_bucket(self) -> None:
        def build():
            _write(self.path("curriculum.json"), _dump_json(self.matrix().summary()))
            return {}

        self._run("bucket", {"thresholds": self.config.thresholds}, ["prefs/group.jsonl"], ["curriculum.json"], build)

    def trained_arms(self) -> list[str]:
        return [a for a in self.config.arms if ARMS[a] is not None]

    def stage_train(self, arms: list[str] | None = None) -> None:
        inputs = ["suite.json", "expert.jsonl", "ref.json", "prefs/traj.jsonl", "prefs/step.jsonl", "prefs/group.jsonl"]
        for arm in arms or self.trained_arms():
            if ARMS[arm] is None:
                continue
            dcfg = self.config.dpo_config(arm)

            def build(arm=arm, dcfg=dcfg):
                ref = self.ref()
                data = Datasets(self.expert(), self.traj_pairs(), self.step_pairs(), self.group_pairs())
                report = train_hpl(ref, ref, data, self.matrix(), dcfg)
                _write(self.path(f"train/{arm}.json"), report.dumps())
                _write(self.path(f"train/{arm}_loss.csv"), report.loss_csv())
                return {"counts": report.phase_pair_counts}

            params = {"arm": arm, "dpo": dcfg.to_json(), "thresholds": self.config.thresholds}
            self._run(f"train.{arm}", params, inputs, [f"train/{arm}.json", f"train/{arm}_loss.csv"], build)

    def stage_eval(self, arms: list[str] | None = None) -> None:
        ev = self.config.eval
        for arm in arms or list(self.config.arms):
            src = "ref.json" if ARMS[arm] is None else f"train/{arm}.json"

            def build(arm=arm):
                suite = self.suite()
                kw = dict(episodes_per_task=int(ev["episodes_per_task"]), seed=self.config.seed, decoding=ev.get("decoding", "sample"))
                result: dict = {"arm": arm}
                if ARMS[arm] is None:
                    result["final"] = evaluate(self.ref(), suite, **kw).to_json()
                    result["phases"] = {}
                else:
                    rep = self.train_report(arm)
                    result["final"] = evaluate(rep.final, suite, **kw).to_json()
                    result["phases"] = {s: evaluate(p, suite, **kw).to_json() for s, p in sorted(rep.phase_params.items())}
                    result["phase_pair_counts"] = rep.phase_pair_counts
                _write(self.path(f"eval/{arm}.json"), _dump_json(result))
                return {}

            self._run(f"eval.{arm}", {"arm": arm, "eval": ev, "seed": self.config.seed}, ["suite.json", src], [f"eval/{arm}.json"], build)

    def eval_summary(self, arm: str) -> EvalSummary:
        return EvalSummary.from_json(json.loads(self.path(f"eval/{arm}.json").read_text())["final"])

    def run_stage(self, stage: str, arms: list[str] | None = None) -> None:
        if stage not in STAGES:
            raise UsageError(f"unknown stage {stage!r}")
        self.write_resolved_config()
        if stage == "train":
            self.stage_train(arms)
        elif stage == "eval":
            self.stage_eval(arms)
        else:
            getattr(self, f"stage_{stage}")()

    def run(self) -> dict[str, EvalSummary]:
        self.write_resolved_config()
        for stage in STAGES:
            self.run_stage(stage)
        self.write_manifest()
        return {arm: self.eval_summary(arm) for arm in self.config.arms}

    def write_manifest(self) -> dict:
        """Top-level manifest: sha256 of every artifact in the run directory."""
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        m = {"files": {str(p.relative_to(self.out)): sha256_file(p) for p in files}}
        _write(self.path("manifest.json"), _dump_json(m))
        return m


def seed_dirs(out: Path, seeds: list[int]) -> list[Path]:
    return [out / f"seed-{s}" for s in seeds] if len(seeds) > 1 else [out]


def run_seeds(config: PipelineConfig, out: str | Path, seeds: list[int]) -> dict[int, dict[str, EvalSummary]]:
    """Run the full pipeline once per seed; several seeds go to ``seed-<n>`` subdirectories."""
    results = {}
    for s, d in zip(seeds, seed_dirs(Path(out), seeds)):
        results[s] = Pipeline(replace(config, seed=s), d).run()
    return results
