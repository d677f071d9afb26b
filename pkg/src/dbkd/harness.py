"""Zoo-wide evaluation: scan every entry, score the detector against the
manifest ground truth, and aggregate the metrics report."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import (DetectionReport, ScanConfig, report_to_dict, scan_all2one,
                       scan_source_specific)
from .errors import DbkdError
from .metrics import ScoredModel, auroc, mask_iou, texture_cosine, tpr_fpr
from .objective import All2One, TargetLabelFn
from .oracle import ModelOracle, NativeOracle, load_net
from .tensors import RandomSource, ValidationBatch
from .triggers import PatchTrigger, Trigger, trigger_mask
from .zoo import (DatasetSpec, SyntheticDataset, Zoo, ZooManifestEntry,
                  load_zoo_manifest, make_dataset)


@dataclass
class EvalEntry:
    entry_id: str
    backdoored: bool
    oracle_factory: object          # () -> ModelOracle
    truth_trigger: Trigger | None = None
    truth_label_fn: TargetLabelFn | None = None
    poison_kind: str | None = None


def entries_from_zoo(zoo: Zoo) -> list[EvalEntry]:
    out = []
    for e in zoo.entries:
        out.append(EvalEntry(
            entry_id=e.entry_id,
            backdoored=e.backdoored,
            oracle_factory=(lambda net=e.net: NativeOracle(net)),
            truth_trigger=e.poison.trigger if e.poison else None,
            truth_label_fn=e.poison.label_fn if e.poison else None,
            poison_kind=e.poison.kind if e.poison else None,
        ))
    return out


def entries_from_manifest(zoo_dir) -> tuple[DatasetSpec, int, list[EvalEntry]]:
    manifest, m_entries = load_zoo_manifest(zoo_dir)
    d = manifest["dataset"]
    spec = DatasetSpec(class_count=d["class_count"], channels=d["channels"],
                       height=d["height"], width=d["width"],
                       train_per_class=d["train_per_class"],
                       test_per_class=d["test_per_class"], style=d["style"],
                       noise=d["noise"], carrier_amp=d["carrier_amp"],
                       pattern_amp=d["pattern_amp"], base=d["base"])
    entries = []
    for m in m_entries:
        entries.append(EvalEntry(
            entry_id=m.entry_id,
            backdoored=m.backdoored,
            oracle_factory=(lambda path=m.weights_path: NativeOracle(load_net(path))),
            truth_trigger=m.trigger,
            truth_label_fn=m.label_fn,
            poison_kind=m.poison_kind,
        ))
    return spec, manifest["seed"], entries


@dataclass
class ModelEvalRecord:
    entry_id: str
    backdoored: bool
    score: float | None
    verdict: str | None
    predicted_target: int | None
    predicted_source: int | None
    true_target: int | None
    target_correct: bool | None
    iou: float | None
    texture_cs: float | None
    error: str | None
    report: DetectionReport | None


def _true_target(entry: EvalEntry) -> int | None:
    if isinstance(entry.truth_label_fn, All2One):
        return entry.truth_label_fn.t
    return None


def _synth_pattern(trig: Trigger) -> np.ndarray | None:
    if isinstance(trig, PatchTrigger):
        return trig.pattern
    return None


def evaluate_entries(entries: list[EvalEntry], dataset: SyntheticDataset,
                     cfg: ScanConfig, batch: ValidationBatch,
                     holdout: ValidationBatch | None = None,
                     per_class_batches: dict[int, ValidationBatch] | None = None,
                     progress=None) -> dict:
    """Scan every entry and aggregate detector metrics against ground truth.

    Entry failures (unreadable weights, oracle errors) are recorded and do
    not stop the evaluation.
    """
    image_shape = dataset.spec.image_shape
    records: list[ModelEvalRecord] = []
    started = time.perf_counter()
    for entry in entries:
        note = f"scan {entry.entry_id}"
        if progress is not None:
            progress(note)
        record = ModelEvalRecord(entry.entry_id, entry.backdoored, None, None, None,
                                 None, _true_target(entry), None, None, None, None, None)
        try:
            oracle = entry.oracle_factory()
            if cfg.strategy == "source_specific":
                if per_class_batches is None:
                    raise DbkdError("source-specific evaluation needs per-class batches")
                report = scan_source_specific(oracle, per_class_batches, cfg,
                                              model_id=entry.entry_id)
            else:
                report = scan_all2one(oracle, batch, cfg, holdout=holdout,
                                      model_id=entry.entry_id)
            record.report = report
            record.score = report.model_score
            record.verdict = report.verdict
            record.predicted_target = report.predicted_target
            record.predicted_source = report.predicted_source
            if record.true_target is not None:
                record.target_correct = (report.predicted_target == record.true_target)
            if entry.truth_trigger is not None and report.predicted_target is not None:
                best = next((r for r in report.results
                             if r.target == report.predicted_target
                             and r.source == report.predicted_source
                             and r.best_trigger is not None), None)
                if best is not None:
                    try:
                        record.iou = mask_iou(
                            trigger_mask(best.best_trigger, image_shape),
                            trigger_mask(entry.truth_trigger, image_shape))
                    except DbkdError:
                        pass
                    synth = _synth_pattern(best.best_trigger)
                    truth = _synth_pattern(entry.truth_trigger)
                    if synth is not None and truth is not None:
                        try:
                            record.texture_cs = texture_cosine(synth, truth)
                        except DbkdError:
                            pass
        except (DbkdError, OSError) as exc:
            record.error = str(exc)
        records.append(record)

    scored = [ScoredModel(r.score, r.backdoored) for r in records if r.score is not None]
    metrics: dict = {"models_scored": len(scored), "models_errored":
                     sum(1 for r in records if r.error is not None)}
    try:
        metrics["auroc"] = auroc(scored)
        tpr, fpr = tpr_fpr(scored, cfg.threshold)
        metrics["tpr"] = tpr
        metrics["fpr"] = fpr
    except DbkdError as exc:
        metrics["auroc"] = None
        metrics["detection_error"] = str(exc)
    label_checks = [r.target_correct for r in records if r.target_correct is not None]
    metrics["target_label_accuracy"] = (float(np.mean(label_checks))
                                        if label_checks else None)
    ious = [r.iou for r in records if r.iou is not None]
    metrics["mean_iou"] = float(np.mean(ious)) if ious else None
    css = [r.texture_cs for r in records if r.texture_cs is not None]
    metrics["mean_texture_cs"] = float(np.mean(css)) if css else None
    metrics["random_texture_cs"] = _random_cs_baseline(entries, image_shape)
    metrics["wall_time"] = time.perf_counter() - started
    return {
        "metrics": metrics,
        "threshold": cfg.threshold,
        "per_model": [{
            "id": r.entry_id, "backdoored": r.backdoored, "score": r.score,
            "verdict": r.verdict, "predicted_target": r.predicted_target,
            "predicted_source": r.predicted_source, "true_target": r.true_target,
            "target_correct": r.target_correct, "iou": r.iou,
            "texture_cs": r.texture_cs, "error": r.error,
        } for r in records],
        "records": records,
    }


def _random_cs_baseline(entries: list[EvalEntry], image_shape,
                        draws: int = 20) -> float | None:
    """Mean texture similarity of fresh uniform-random patterns to each
    planted patch pattern."""
    rng = RandomSource(123456789)
    values = []
    for entry in entries:
        truth = _synth_pattern(entry.truth_trigger) if entry.truth_trigger is not None else None
        if truth is None:
            continue
        for _ in range(draws):
            rand = rng.random(truth.shape, dtype=np.float32)
            try:
                values.append(texture_cosine(rand, truth))
            except DbkdError:
                continue
    return float(np.mean(values)) if values else None


def eval_result_to_json(result: dict) -> dict:
    """Strip in-memory objects so the result can be dumped as JSON."""
    doc = {k: v for k, v in result.items() if k != "records"}
    return doc


def save_eval_result(path, result: dict, include_reports: bool = False) -> None:
    doc = eval_result_to_json(result)
    if include_reports:
        doc["reports"] = [report_to_dict(r.report) for r in result["records"]
                          if r.report is not None]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
