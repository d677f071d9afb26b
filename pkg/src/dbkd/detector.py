"""Scan orchestration: per-target annealing runs, verdict thresholding,
and report assembly.

All2One scans run one annealing search per (template, target label).
Source-specific scans run one search per ordered class pair (s, t) on a
batch drawn from class s, which covers both One2One and All2All attacks.
Each search owns a deterministic substream derived from the scan seed, so
parallel and sequential execution produce identical reports.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .annealing import AnnealConfig, AnnealingAborted, AnnealTrace, run_annealing
from .errors import ConfigInvalid, DbkdError
from .objective import All2One, ObjectiveConfig, One2One, TargetLabelFn, asr
from .oracle import ModelOracle
from .tensors import ValidationBatch
from .triggers import SearchSpaceConfig, Trigger, trigger_to_json

SCHEMA_VERSION = 1

# Fig.-8-style defaults: full budget for patch/blend, a tenth for the
# smaller warp/noise spaces.
DEFAULT_STEPS = {"patch": 10_000, "blend": 10_000, "warp": 1_000, "noise": 1_000}


@dataclass(frozen=True)
class ScanConfig:
    templates: tuple[SearchSpaceConfig, ...]
    objective: ObjectiveConfig = ObjectiveConfig(lam=0.6, batch_size=32)
    threshold: float = 0.95
    strategy: str = "all2one"           # or "source_specific"
    steps: int | None = None            # None -> per-template default
    epsilon: float = 10.0
    seed: int = 0
    workers: int = 1
    recompute_current: bool = False
    max_pairs: int | None = None        # cap on (s, t) pairs, documented coverage loss
    attach_traces: bool = False

    def __post_init__(self):
        if not self.templates:
            raise ConfigInvalid("at least one template is required")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigInvalid("threshold must be inside (0, 1)")
        if self.strategy not in ("all2one", "source_specific"):
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}")
        if self.workers < 1:
            raise ConfigInvalid("workers must be >= 1")

    def steps_for(self, kind: str) -> int:
        return self.steps if self.steps is not None else DEFAULT_STEPS[kind]


@dataclass
class TargetScanResult:
    template: str
    target: int
    source: int | None = None
    best_trigger: Trigger | None = None
    best_casr: float | None = None
    verification_asr: float | None = None
    verification_on_holdout: bool = False
    queries: int = 0
    wall_time: float = 0.0
    error: str | None = None
    trace: AnnealTrace | None = None


@dataclass
class DetectionReport:
    model_id: str
    strategy: str
    class_count: int
    threshold: float
    seed: int
    results: list[TargetScanResult]
    model_score: float
    verdict: str                      # "backdoored" | "clean"
    predicted_target: int | None
    predicted_source: int | None
    one_shift_detected: bool | None   # source_specific scans only
    config_snapshot: dict
    total_queries: int
    wall_time: float


def verdict(score: float, threshold: float) -> str:
    """Backdoored iff the score strictly exceeds the threshold."""
    if not 0.0 <= score <= 1.0:
        raise ConfigInvalid(f"score {score} outside [0, 1]")
    return "backdoored" if score > threshold else "clean"


def _seed_for(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class _Task:
    oracle: ModelOracle
    stack: np.ndarray
    labels: np.ndarray
    class_count: int
    space: SearchSpaceConfig
    fn: TargetLabelFn
    objective: ObjectiveConfig
    anneal: AnnealConfig
    template: str
    target: int
    source: int | None
    holdout_stack: np.ndarray | None
    holdout_labels: np.ndarray | None
    keep_trace: bool


def _run_task(task: _Task) -> TargetScanResult:
    batch = ValidationBatch.from_arrays(task.stack, task.labels, task.class_count)
    result = TargetScanResult(template=task.template, target=task.target,
                              source=task.source)
    before = task.oracle.query_count
    started = time.perf_counter()
    try:
        best, best_c, trace = run_annealing(task.oracle, batch, task.space,
                                            task.fn, task.objective, task.anneal)
        result.best_trigger = best
        result.best_casr = best_c
        if task.keep_trace:
            result.trace = trace
        if task.holdout_stack is not None:
            ver_batch = ValidationBatch.from_arrays(task.holdout_stack,
                                                    task.holdout_labels,
                                                    task.class_count)
            result.verification_on_holdout = True
        else:
            ver_batch = batch
        result.verification_asr = asr(task.oracle, ver_batch, best, task.fn)
    except AnnealingAborted as exc:
        result.error = str(exc)
        if task.keep_trace:
            result.trace = exc.trace
    except DbkdError as exc:
        result.error = str(exc)
    result.queries = task.oracle.query_count - before
    result.wall_time = time.perf_counter() - started
    return result


def _execute(tasks: list[_Task], workers: int) -> list[TargetScanResult]:
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks))


def _assemble(model_id: str, cfg: ScanConfig, class_count: int,
              results: list[TargetScanResult], started: float,
              one_shift: bool | None) -> DetectionReport:
    scored = [r for r in results if r.error is None and r.best_casr is not None]
    if not scored:
        first = next((r.error for r in results if r.error), "no results")
        raise ConfigInvalid(f"every target scan failed; first error: {first}")
    best = max(scored, key=lambda r: r.best_casr)
    score = best.best_casr
    return DetectionReport(
        model_id=model_id,
        strategy=cfg.strategy,
        class_count=class_count,
        threshold=cfg.threshold,
        seed=cfg.seed,
        results=results,
        model_score=score,
        verdict=verdict(score, cfg.threshold),
        predicted_target=best.target,
        predicted_source=best.source,
        one_shift_detected=one_shift,
        config_snapshot=_config_snapshot(cfg),
        total_queries=sum(r.queries for r in results),
        wall_time=time.perf_counter() - started,
    )


def _config_snapshot(cfg: ScanConfig) -> dict:
    return {
        "templates": [{"kind": t.kind, "delta_s": t.delta_s, "alpha_max": t.alpha_max,
                       "noise_bound": t.noise_bound, "steps": cfg.steps_for(t.kind)}
                      for t in cfg.templates],
        "objective": {"lambda": cfg.objective.lam, "batch_size": cfg.objective.batch_size},
        "threshold": cfg.threshold,
        "strategy": cfg.strategy,
        "epsilon": cfg.epsilon,
        "workers": cfg.workers,
        "recompute_current": cfg.recompute_current,
        "seed": cfg.seed,
    }


def _holdout_arrays(holdout: ValidationBatch | None):
    if holdout is None:
        return None, None
    return holdout.stack, holdout.labels


def scan_all2one(oracle: ModelOracle, batch: ValidationBatch, cfg: ScanConfig,
                 holdout: ValidationBatch | None = None,
                 model_id: str = "model") -> DetectionReport:
    """One annealing run per (template, target label); the report keeps one
    result per pair, including failed ones."""
    if batch.image_shape != oracle.input_shape:
        raise ConfigInvalid("batch image shape does not match the oracle")
    n = oracle.class_count
    started = time.perf_counter()
    h_stack, h_labels = _holdout_arrays(holdout)
    tasks = []
    for space in cfg.templates:
        space = space.for_shape(oracle.input_shape)
        for t in range(n):
            anneal = AnnealConfig(steps=cfg.steps_for(space.kind), epsilon=cfg.epsilon,
                                  seed=_seed_for(cfg.seed, f"{space.kind}:all2one:t{t}"),
                                  recompute_current=cfg.recompute_current)
            tasks.append(_Task(oracle, batch.stack, batch.labels, batch.class_count,
                               space, All2One(t), cfg.objective, anneal, space.kind,
                               t, None, h_stack, h_labels, cfg.attach_traces))
    results = _execute(tasks, cfg.workers)
    return _assemble(model_id, cfg, n, results, started, None)


def scan_source_specific(oracle: ModelOracle,
                         per_class_batches: dict[int, ValidationBatch],
                         cfg: ScanConfig,
                         holdout_batches: dict[int, ValidationBatch] | None = None,
                         model_id: str = "model") -> DetectionReport:
    """One annealing run per ordered class pair (s, t); each search batch
    contains only class-s samples. Flags a one-shift pattern when at least
    three quarters of the (s, s+1 mod n) pairs clear the threshold."""
    if not per_class_batches:
        raise ConfigInvalid("need at least one per-class batch")
    n = oracle.class_count
    started = time.perf_counter()
    pairs = [(s, t) for s in sorted(per_class_batches) for t in range(n) if t != s]
    if cfg.max_pairs is not None:
        pairs = pairs[:cfg.max_pairs]
    tasks = []
    for s, t in pairs:
        batch = per_class_batches[s]
        if batch.image_shape != oracle.input_shape:
            raise ConfigInvalid(f"class-{s} batch shape does not match the oracle")
        holdout = (holdout_batches or {}).get(s)
        h_stack, h_labels = _holdout_arrays(holdout)
        for space in cfg.templates:
            space = space.for_shape(oracle.input_shape)
            anneal = AnnealConfig(steps=cfg.steps_for(space.kind), epsilon=cfg.epsilon,
                                  seed=_seed_for(cfg.seed, f"{space.kind}:pair:s{s}:t{t}"),
                                  recompute_current=cfg.recompute_current)
            tasks.append(_Task(oracle, batch.stack, batch.labels, batch.class_count,
                               space, One2One(s, t), cfg.objective, anneal, space.kind,
                               t, s, h_stack, h_labels, cfg.attach_traces))
    results = _execute(tasks, cfg.workers)
    shift_hits = 0
    classes = sorted(per_class_batches)
    for s in classes:
        t = (s + 1) % n
        hit = any(r.source == s and r.target == t and r.error is None
                  and r.best_casr is not None and r.best_casr > cfg.threshold
                  for r in results)
        shift_hits += hit
    one_shift = shift_hits >= max(2, int(np.ceil(0.75 * len(classes))))
    return _assemble(model_id, cfg, n, results, started, one_shift)


# --- report serialization -------------------------------------------------------


def _result_to_dict(r: TargetScanResult) -> dict:
    doc = {
        "template": r.template,
        "target": r.target,
        "source": r.source,
        "best_casr": r.best_casr,
        "verification_asr": r.verification_asr,
        "verification_on_holdout": r.verification_on_holdout,
        "queries": r.queries,
        "wall_time": r.wall_time,
        "error": r.error,
        "best_trigger": json.loads(trigger_to_json(r.best_trigger))
                        if r.best_trigger is not None else None,
    }
    if r.trace is not None:
        doc["trace"] = {
            "initial_casr": r.trace.initial_casr,
            "steps": [{"k": s.k, "T": s.temperature, "cASR_current": s.casr_current,
                       "cASR_new": s.casr_new, "accepted": s.accepted, "move": s.move}
                      for s in r.trace.steps],
        }
    return doc


def report_to_dict(report: DetectionReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": report.model_id,
        "strategy": report.strategy,
        "class_count": report.class_count,
        "threshold": report.threshold,
        "seed": report.seed,
        "model_score": report.model_score,
        "verdict": report.verdict,
        "predicted_target": report.predicted_target,
        "predicted_source": report.predicted_source,
        "one_shift_detected": report.one_shift_detected,
        "total_queries": report.total_queries,
        "wall_time": report.wall_time,
        "config": report.config_snapshot,
        "results": [_result_to_dict(r) for r in report.results],
    }


def save_report(path, report: DetectionReport) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")
