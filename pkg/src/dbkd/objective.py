"""Target-label functions and the two success metrics.

ASR is the fraction of triggered samples the model classifies to the target
label (strict argmax; ties count as failure). cASR is its continuous proxy:
a logistic smoothing of the per-sample margin between the target class
probability and the best non-target probability.

Margins inside the smoothing are expressed in percentage points
(100 * probability margin). With the default sharpness 0.6 this puts cASR on
the same 0..1 scale as ASR: a trigger that wins every sample by a few
points of probability scores ~1.0, one that loses everywhere scores ~0.0,
and only samples within a few points of the decision boundary contribute
intermediate values. A sharpness of 0 yields the constant 0.5; a very large
sharpness makes cASR and ASR identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid
from .tensors import ProbVector, ValidationBatch
from .oracle import ModelOracle
from .triggers import Trigger, apply_to_stack

MARGIN_SCALE = 100.0  # probability margins are smoothed in percentage points


@dataclass(frozen=True)
class All2One:
    """Every class maps to one target label t."""
    t: int


@dataclass(frozen=True)
class All2AllOneShift:
    """Each class y maps to (y + 1) mod n."""


@dataclass(frozen=True)
class One2One:
    """Victim class s maps to t; every other class maps to itself."""
    s: int
    t: int


TargetLabelFn = All2One | All2AllOneShift | One2One


def validate_label_fn(fn: TargetLabelFn, class_count: int) -> None:
    if isinstance(fn, All2One):
        if not 0 <= fn.t < class_count:
            raise ConfigInvalid(f"target {fn.t} outside [0, {class_count})")
    elif isinstance(fn, One2One):
        if not 0 <= fn.t < class_count or not 0 <= fn.s < class_count:
            raise ConfigInvalid("source/target outside the class range")
        if fn.s == fn.t:
            raise ConfigInvalid("One2One requires source != target")
    elif not isinstance(fn, All2AllOneShift):
        raise ConfigInvalid(f"unknown label function {type(fn).__name__}")


def phi(fn: TargetLabelFn, y: int, n: int) -> int:
    """The attacker's target label for a sample of class y."""
    if isinstance(fn, All2One):
        return fn.t
    if isinstance(fn, All2AllOneShift):
        return (y + 1) % n
    if isinstance(fn, One2One):
        return fn.t if y == fn.s else y
    raise ConfigInvalid(f"unknown label function {type(fn).__name__}")


def phi_array(fn: TargetLabelFn, labels: np.ndarray, n: int) -> np.ndarray:
    if isinstance(fn, All2One):
        return np.full_like(labels, fn.t)
    if isinstance(fn, All2AllOneShift):
        return (labels + 1) % n
    if isinstance(fn, One2One):
        return np.where(labels == fn.s, fn.t, labels)
    raise ConfigInvalid(f"unknown label function {type(fn).__name__}")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Smoothing sharpness and search batch size."""

    lam: float = 0.6
    batch_size: int = 32

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigInvalid("lambda must be non-negative")
        if self.batch_size < 1:
            raise ConfigInvalid("batch size must be >= 1")


def margin(probs: ProbVector, target: int) -> float:
    """Target probability minus the best non-target probability.

    Positive iff the target is the strict argmax. For a single-class model
    the non-target side is empty and treated as 0.
    """
    arr = probs.probs
    if not 0 <= target < arr.shape[0]:
        raise ConfigInvalid(f"target {target} outside [0, {arr.shape[0]})")
    if arr.shape[0] == 1:
        return float(arr[0])
    others = np.delete(arr, target)
    return float(np.float64(arr[target]) - np.float64(others.max()))


def margins_from_rows(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized margins for (B, n) probability rows, in float64."""
    b, n = probs.shape
    rows = np.arange(b)
    p = probs.astype(np.float64, copy=True)
    target_p = p[rows, targets].copy()
    if n == 1:
        return target_p
    p[rows, targets] = -np.inf
    return target_p - p.max(axis=1)


def smoothed_success(margins: np.ndarray, lam: float) -> np.ndarray:
    """Per-sample logistic success 1 / (1 + exp(-lam * margin_pct))."""
    z = lam * MARGIN_SCALE * np.asarray(margins, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _triggered_margins(oracle: ModelOracle, batch: ValidationBatch, trig: Trigger,
                       fn: TargetLabelFn) -> np.ndarray:
    """Apply the trigger, run one batch query, and return per-sample margins."""
    validate_label_fn(fn, batch.class_count)
    triggered = apply_to_stack(trig, batch.stack)
    probs = oracle.predict_array(triggered)
    targets = phi_array(fn, batch.labels, batch.class_count)
    return margins_from_rows(probs, targets)


def casr(oracle: ModelOracle, batch: ValidationBatch, trig: Trigger,
         fn: TargetLabelFn, cfg: ObjectiveConfig) -> float:
    """Continuous attack success rate over the batch; one oracle query."""
    m = _triggered_margins(oracle, batch, trig, fn)
    return float(np.mean(smoothed_success(m, cfg.lam)))


def asr(oracle: ModelOracle, batch: ValidationBatch, trig: Trigger,
        fn: TargetLabelFn) -> float:
    """Discrete attack success rate: strict-argmax hits over the batch."""
    m = _triggered_margins(oracle, batch, trig, fn)
    return float(np.mean(m > 0))


def asr_from_rows(probs: np.ndarray, targets: np.ndarray) -> float:
    """ASR given precomputed probability rows (used by zoo ground truth)."""
    return float(np.mean(margins_from_rows(probs, targets) > 0))


def logistic(x: float) -> float:
    """Scalar logistic; handy for hand checks in tests and docs."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
