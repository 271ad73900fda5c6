"""Resumable train -> prune/rewind -> dissect -> report pipeline.

Output tree under ``out``::

    config.yaml                  resolved config, defaults included
    state.json                   completed stages and artifact hashes
    data/micro_broden/           generated concept dataset (unless data.path)
    trial_<seed>/train/          baseline checkpoint series
    trial_<seed>/round_<rr>/     mask/, model/, metrics.json, report.json, consistency.json
    trial_<seed>/*.csv, fig*.png per-trial curves
    interpretability.csv ...     all trials, with a leading trial column
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concept_data import ArrayDataset, generate_micro_broden, load_concept_dataset, make_shape_task
from .config import ExperimentConfig
from .dissector import DissectionReport, dissect_network
from .metrics_report import ConsistencyReport, consistency, emit_curves, summarize
from .model import Checkpoint, build_model, evaluate_accuracy, load_checkpoint, load_named_tensors, named_tensors, save_checkpoint
from .pruner import PruneConfig, PruningMask, prune_round
from .trainer import CheckpointSeries, restore, train

log = logging.getLogger(__name__)

STATE_FILE = "state.json"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _files_under(root: Path, rel: str) -> list[str]:
    p = root / rel
    if p.is_dir():
        return sorted(str(f.relative_to(root)) for f in p.rglob("*") if f.is_file())
    return [rel]


@dataclass
class ExperimentState:
    """Completed stages with the content hashes of their artifacts."""

    config_hash: str = ""
    stages: dict[str, dict[str, str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "ExperimentState":
        if not path.is_file():
            return cls()
        data = json.loads(path.read_text())
        return cls(data.get("config_hash", ""), data.get("stages", {}))

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"config_hash": self.config_hash, "stages": self.stages},
                                  indent=2, sort_keys=True) + "\n")
        tmp.replace(path)

    def verified(self, root: Path, stage: str) -> bool:
        files = self.stages.get(stage)
        if not files:
            return False
        for rel, digest in files.items():
            p = root / rel
            if not p.is_file() or _sha(p) != digest:
                log.warning("stage=%s stale artifact %s; recomputing", stage, rel)
                return False
        return True

    def record(self, root: Path, stage: str, paths: list[str]) -> None:
        files = {}
        for rel in paths:
            for f in _files_under(root, rel):
                files[f] = _sha(root / f)
        self.stages[stage] = files

    def drop(self, prefix: str) -> None:
        for key in [k for k in self.stages if k.startswith(prefix)]:
            del self.stages[key]


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


class Experiment:
    """Stage runner over one output tree; every stage is skipped when its artifacts verify."""

    def __init__(self, config: ExperimentConfig, out=None, config_dir=None):
        self.config = config
        self.out = Path(out or config.output_root)
        self.config_dir = Path(config_dir) if config_dir else Path.cwd()
        self.out.mkdir(parents=True, exist_ok=True)
        self.state_path = self.out / STATE_FILE
        self.state = ExperimentState.load(self.state_path)
        digest = config.digest()
        if self.state.config_hash and self.state.config_hash != digest:
            log.warning("config changed since the last run; discarding cached stages")
            self.state = ExperimentState()
        self.state.config_hash = digest
        config.dump(self.out / "config.yaml")
        self.executed: list[str] = []
        self._done: set[str] = set()
        self._task: tuple[ArrayDataset, ArrayDataset] | None = None
        self._dataset = None
        self._series: dict[int, CheckpointSeries] = {}

    # -- helpers -------------------------------------------------------

    def _stage(self, name: str, deps: list[str], fn, paths: list[str]) -> bool:
        """Run ``fn`` unless cached; returns True when it executed.

        A stage reruns when its artifacts fail to verify or when any stage in
        ``deps`` was executed during this session.
        """
        if name in self._done:
            return name in self.executed
        stale = [d for d in deps if d in self.executed]
        if not stale and self.state.verified(self.out, name):
            self._done.add(name)
            return False
        log.info("stage=%s start", name)
        try:
            fn()
        except Exception as exc:
            self.state.stages.pop(name, None)
            self.state.save(self.state_path)
            raise StageFailure(name, exc) from exc
        self.state.record(self.out, name, paths)
        self.state.save(self.state_path)
        self.executed.append(name)
        self._done.add(name)
        log.info("stage=%s done", name)
        return True

    def data_root(self) -> Path:
        if self.config.data.path is not None:
            p = Path(self.config.data.path)
            return p if p.is_absolute() else self.config_dir / p
        return self.out / "data" / "micro_broden"

    def task(self) -> tuple[ArrayDataset, ArrayDataset]:
        if self._task is None:
            t, spec = self.config.task, self.config.data.micro_broden()
            self._task = (
                make_shape_task(t.n_train, spec, t.seed, t.noise),
                make_shape_task(t.n_test, spec, t.seed + 1_000_003, t.noise),
            )
        return self._task

    def trial_dir(self, seed: int) -> Path:
        return self.out / f"trial_{seed}"

    def round_dir(self, seed: int, r: int) -> Path:
        return self.trial_dir(seed) / f"round_{r:02d}"

    def _rel(self, p: Path) -> str:
        return str(p.relative_to(self.out))

    def prune_config(self) -> PruneConfig:
        return PruneConfig(self.config.pruning.fraction, self.config.pruning.scope)

    # -- stages --------------------------------------------------------

    def stage_data(self):
        if self.config.data.path is not None:
            return self.data_root()
        root = self.data_root()

        def run():
            if root.exists():
                shutil.rmtree(root)
            generate_micro_broden(self.config.data.micro_broden(), root)

        self._stage("data", [], run, [self._rel(root)])
        return root

    def dataset(self):
        self.stage_data()
        if self._dataset is None:
            self._dataset = load_concept_dataset(self.data_root())
        return self._dataset

    def stage_train(self, seed: int) -> CheckpointSeries:
        d = self.trial_dir(seed) / "train"
        trial = f"trial_{seed}"

        def run():
            if d.exists():
                shutil.rmtree(d)
            train_set, _ = self.task()
            model = build_model(self.config.model_spec(), seed)
            series, _ = train(model, train_set, self.config.schedule(seed))
            series.save(d)
            self._series[seed] = series

        self._stage(f"{trial}/train", [], run, [self._rel(d)])
        if seed not in self._series:
            self._series[seed] = CheckpointSeries.load(d)
        return self._series[seed]

    def _round_model(self, seed: int, r: int):
        spec = self.config.model_spec()
        if r == 0:
            model = restore(build_model(spec, seed), self.stage_train(seed).final())
            return model, None
        d = self.round_dir(seed, r)
        model = build_model(spec, seed)
        load_named_tensors(model, load_checkpoint(d / "model").tensors)
        return model, PruningMask.load(d / "mask")

    def _write_metrics(self, d: Path, r: int, fraction: float, model) -> None:
        _, test_set = self.task()
        acc = evaluate_accuracy(model, test_set)
        metrics = {"round": r, "fraction_remaining": fraction, "accuracy": acc}
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        log.info("stage=evaluate trial=%s round=%d accuracy=%.4f", d.parent.name, r, acc)

    def stage_baseline(self, seed: int) -> None:
        trial = f"trial_{seed}"
        d = self.round_dir(seed, 0)

        def run():
            d.mkdir(parents=True, exist_ok=True)
            model, _ = self._round_model(seed, 0)
            self._write_metrics(d, 0, 1.0, model)

        self.stage_train(seed)
        self._stage(f"{trial}/round_00/evaluate", [f"{trial}/train"], run, [self._rel(d / "metrics.json")])

    def stage_prune(self, seed: int, r: int) -> None:
        if r < 1:
            raise ValueError("prune rounds start at 1")
        trial = f"trial_{seed}"
        series = self.stage_train(seed)
        if r == 1:
            self.stage_baseline(seed)
        else:
            self.stage_prune(seed, r - 1)
        d = self.round_dir(seed, r)

        def run():
            for sub in ("mask", "model"):
                if (d / sub).exists():
                    shutil.rmtree(d / sub)
            d.mkdir(parents=True, exist_ok=True)
            prev_model, prev_mask = self._round_model(seed, r - 1)
            weights = named_tensors(prev_model)
            cfg = self.prune_config()
            mask = prev_mask or PruningMask.full(weights, cfg)
            p = self.config.pruning
            result = prune_round(weights, mask, cfg, series, self.task()[0], p.mode,
                                 p.rewind_epoch, self.config.replay_epochs, p.finetune_epochs)
            result.mask.save(d / "mask", cfg)
            save_checkpoint(d / "model", Checkpoint(r, named_tensors(result.model), series.spec_hash))
            self._write_metrics(d, r, result.mask.fraction_remaining, result.model)

        prev = f"{trial}/round_00/evaluate" if r == 1 else f"{trial}/round_{r - 1:02d}/prune"
        self._stage(f"{trial}/round_{r:02d}/prune", [f"{trial}/train", prev], run,
                    [self._rel(d / "mask"), self._rel(d / "model"), self._rel(d / "metrics.json")])

    def stage_dissect(self, seed: int, r: int) -> DissectionReport:
        trial = f"trial_{seed}"
        if r == 0:
            self.stage_baseline(seed)
        else:
            self.stage_prune(seed, r)
        dataset = self.dataset()
        d = self.round_dir(seed, r)
        paths = [self._rel(d / "report.json")]
        if self.config.dissection.iou_table:
            paths.append(self._rel(d / "iou.csv"))

        def run():
            model, mask = self._round_model(seed, r)
            report = dissect_network(model, mask, dataset, split=self.config.data.split,
                                     iou_threshold=self.config.dissection.iou_threshold,
                                     keep_ious=self.config.dissection.iou_table)
            report.save(d / "report.json", d / "iou.csv" if self.config.dissection.iou_table else None)
            n = sum(u.interpretable for u in report.units)
            log.info("stage=dissect trial=%s round=%d interpretable=%d/%d", trial, r, n, len(report.units))

        upstream = f"{trial}/round_00/evaluate" if r == 0 else f"{trial}/round_{r:02d}/prune"
        self._stage(f"{trial}/round_{r:02d}/dissect", ["data", f"{trial}/train", upstream], run, paths)
        report = DissectionReport.load(d / "report.json")
        return report

    def stage_consistency(self, seed: int, r: int) -> ConsistencyReport:
        trial = f"trial_{seed}"
        original = self.stage_dissect(seed, 0)
        pruned = self.stage_dissect(seed, r)
        d = self.round_dir(seed, r)
        frac = json.loads((d / "metrics.json").read_text())["fraction_remaining"]

        def run():
            c = consistency(original, pruned, frac, r)
            (d / "consistency.json").write_text(json.dumps({
                "round": r,
                "fraction_remaining": frac,
                "retained_fraction": c.retained_fraction,
                "same_concept_fraction": c.same_concept_fraction,
                "original_interpretable": sorted(map(list, c.original_interpretable)),
                "shared_interpretable": sorted(map(list, c.shared_interpretable)),
                "degenerate": c.degenerate,
            }, indent=2) + "\n")

        self._stage(f"{trial}/round_{r:02d}/consistency",
                    [f"{trial}/round_00/dissect", f"{trial}/round_{r:02d}/dissect"],
                    run, [self._rel(d / "consistency.json")])
        data = json.loads((d / "consistency.json").read_text())
        return ConsistencyReport(data["fraction_remaining"], data["retained_fraction"],
                                 data["same_concept_fraction"], r)

    def trial_results(self, seed: int):
        cats = list(self.dataset().index.categories)
        summaries, cons = [], []
        for r in range(self.config.pruning.rounds + 1):
            report = self.stage_dissect(seed, r)
            metrics = json.loads((self.round_dir(seed, r) / "metrics.json").read_text())
            summaries.append(summarize(report, metrics["accuracy"], metrics["fraction_remaining"], r, cats))
            if r:
                cons.append(self.stage_consistency(seed, r))
        return summaries, cons

    def stage_report(self) -> None:
        cats = list(self.dataset().index.categories)
        results = {seed: self.trial_results(seed) for seed in self.config.seeds}
        for seed, (ss, cs) in results.items():
            emit_curves(ss, cs, self.trial_dir(seed), cats)
        _write_combined(self.out, results, cats)
        first = results[self.config.seeds[0]]
        emit_curves(first[0], first[1], self.out / "figures", cats,
                    trials={f"seed {s}": v for s, v in results.items()})

    def run(self) -> None:
        self.stage_data()
        for seed in self.config.seeds:
            self.trial_results(seed)
        self.stage_report()


def _write_combined(out: Path, results, cats) -> None:
    with open(out / "interpretability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "fraction_remaining", "round", "accuracy", "interpretable_units", "unique_concepts", *cats])
        for seed, (ss, _) in results.items():
            for s in ss:
                w.writerow([seed, repr(s.fraction_remaining), s.round, repr(s.accuracy), s.interpretable_units,
                            s.unique_concepts, *(s.category_counts.get(c, 0) for c in cats)])
    with open(out / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "fraction_remaining", "round", "retained_fraction", "same_concept_fraction"])
        for seed, (_, cs) in results.items():
            for c in cs:
                w.writerow([seed, repr(c.fraction_remaining), c.round, repr(c.retained_fraction),
                            repr(c.same_concept_fraction)])


def run_experiment(config: ExperimentConfig, out=None, config_dir=None) -> Experiment:
    """Run (or resume) the full pipeline; cached stages whose artifacts verify are skipped."""
    exp = Experiment(config, out, config_dir)
    exp.run()
    return exp


def resume(config: ExperimentConfig, out=None, config_dir=None) -> Experiment:
    out = Path(out or config.output_root)
    if not (out / STATE_FILE).is_file():
        raise FileNotFoundError(f"no {STATE_FILE} under {out}")
    return run_experiment(config, out, config_dir)
