"""Detector scoring against ground truth: AUROC / TPR-FPR for detection,
mask IoU and texture cosine similarity for trigger synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, SingleClassInput, ZeroVector

TEXTURE_DIMS = 4096
_QUANT_LEVELS = 8  # 8 levels per pixel of a 2x2 patch -> 8^4 = 4096 bins


@dataclass(frozen=True)
class ScoredModel:
    score: float
    backdoored: bool


def _split_scores(scored: list[ScoredModel]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.score for s in scored if s.backdoored], dtype=np.float64)
    neg = np.array([s.score for s in scored if not s.backdoored], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassInput("need at least one clean and one backdoored score")
    return pos, neg


def auroc(scored: list[ScoredModel]) -> float:
    """Probability a random backdoored score exceeds a random clean score,
    ties counted half (exact Mann-Whitney pair count)."""
    pos, neg = _split_scores(scored)
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def tpr_fpr(scored: list[ScoredModel], threshold: float) -> tuple[float, float]:
    """Rates of scores strictly above the threshold, per ground-truth label."""
    pos, neg = _split_scores(scored)
    return float((pos > threshold).mean()), float((neg > threshold).mean())


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1.0 when both empty."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = int(np.logical_or(pred, truth).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(pred, truth).sum())
    return inter / union


def texture_feature(pattern: np.ndarray) -> np.ndarray:
    """Bag-of-patches texture descriptor, fixed length 4096.

    The pattern is reduced to grayscale, every 2x2 window (with toroidal
    wrap-around, so tiling a texture leaves the histogram unchanged) is
    quantized to 8 intensity levels per pixel, and the windows are counted
    into an 8^4-bin histogram. Size-agnostic by construction.
    """
    arr = np.asarray(pattern, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeMismatch(f"pattern must be (C,H,W) or (H,W), got {arr.shape}")
    if float(arr.max() - arr.min()) < 1e-9:
        raise ZeroVector("constant pattern carries no texture")
    q = np.clip((arr * _QUANT_LEVELS).astype(np.int64), 0, _QUANT_LEVELS - 1)
    a = q
    b = np.roll(q, -1, axis=1)
    c = np.roll(q, -1, axis=0)
    d = np.roll(np.roll(q, -1, axis=0), -1, axis=1)
    codes = ((a * _QUANT_LEVELS + b) * _QUANT_LEVELS + c) * _QUANT_LEVELS + d
    hist = np.bincount(codes.ravel(), minlength=TEXTURE_DIMS).astype(np.float64)
    return hist


def texture_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of the two patterns' texture descriptors."""
    fa = texture_feature(a)
    fb = texture_feature(b)
    na = np.linalg.norm(fa)
    nb = np.linalg.norm(fb)
    if na == 0 or nb == 0:
        raise ZeroVector("texture feature degenerated to the zero vector")
    return float(np.dot(fa, fb) / (na * nb))
