"""Pixel-level F1 / AUC and dataset-level aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.stats import rankdata

FIXED_THRESHOLD = 0.5


def _check_shapes(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt.astype(bool)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    pred, gt = _check_shapes(pred, gt)
    pred = pred.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    # nothing predicted and nothing to find counts as a perfect score
    return 1.0 if denom == 0 else 2 * tp / denom


def f1(pred, gt) -> float:
    """F1 of a binary prediction map: 2TP / (2TP + FP + FN)."""
    tp, fp, fn, _ = confusion(pred, gt)
    return f1_from_counts(tp, fp, fn)


def f1_optimal(prob, gt) -> float:
    """Best F1 over every threshold of the form ``prob >= t`` (including none)."""
    prob, gt = _check_shapes(prob, gt)
    scores = prob.ravel().astype(np.float64)
    labels = gt.ravel()
    n_pos = int(labels.sum())
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    n_pred = np.arange(1, len(s) + 1)
    # only cut where the score changes, so ties are kept together
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp, n_pred = tp[last_of_run], n_pred[last_of_run]
    denom = n_pos + n_pred
    best = float(np.max(2 * tp / denom)) if len(denom) else 0.0
    empty = 1.0 if n_pos == 0 else 0.0
    return max(best, empty)


def auc_defined(gt) -> bool:
    g = np.asarray(gt).astype(bool)
    return bool(g.any() and (~g).any())


def auc(prob, gt) -> float:
    """Rank-based ROC AUC (Mann-Whitney U with average ranks for ties).

    Returns 0.5 when ``gt`` lacks one of the classes; check ``auc_defined``.
    """
    prob, gt = _check_shapes(prob, gt)
    labels = gt.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(prob.ravel(), method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ImageScore:
    id: str
    f1_fixed: float
    f1_optimal: float
    auc: float
    auc_defined: bool
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class EvalResult:
    f1_fixed: float
    f1_optimal: float
    auc: float
    f1_pooled: float
    pixel_counts: tuple[int, int, int, int]
    per_image: list[ImageScore] = field(default_factory=list)
    auc_images: int = 0
    aggregation: str = "mean over images (unweighted); f1_pooled from summed pixel counts; auc over images with both classes"

    def summary(self, title: str = "") -> str:
        lines = [title] if title else []
        tp, fp, fn, tn = self.pixel_counts
        lines += [
            f"images        {len(self.per_image)}",
            f"f1 (t=0.5)    {self.f1_fixed:.4f}",
            f"f1 pooled     {self.f1_pooled:.4f}",
            f"auc           {self.auc:.4f}  ({self.auc_images} images with both classes)",
            f"f1 optimal*   {self.f1_optimal:.4f}  (*per-image best threshold, optimistic)",
            f"pixels        tp={tp} fp={fp} fn={fn} tn={tn}",
            f"aggregation   {self.aggregation}",
        ]
        return "\n".join(lines)


def score_image(image_id: str, prob, gt) -> ImageScore:
    prob, gtb = _check_shapes(prob, gt)
    tp, fp, fn, tn = confusion(prob >= FIXED_THRESHOLD, gtb)
    return ImageScore(
        id=image_id,
        f1_fixed=f1_from_counts(tp, fp, fn),
        f1_optimal=f1_optimal(prob, gtb),
        auc=auc(prob, gtb),
        auc_defined=auc_defined(gtb),
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


def aggregate(scores: list[ImageScore]) -> EvalResult:
    if not scores:
        raise ValueError("cannot aggregate an empty list of image scores")
    n = len(scores)
    counts = tuple(sum(getattr(s, k) for s in scores) for k in ("tp", "fp", "fn", "tn"))
    defined = [s.auc for s in scores if s.auc_defined]
    return EvalResult(
        f1_fixed=math.fsum(s.f1_fixed for s in scores) / n,
        f1_optimal=math.fsum(s.f1_optimal for s in scores) / n,
        auc=math.fsum(defined) / len(defined) if defined else 0.5,
        f1_pooled=f1_from_counts(counts[0], counts[1], counts[2]),
        pixel_counts=counts,
        per_image=list(scores),
        auc_images=len(defined),
    )


def evaluate(model, dataset, attack=None, seed: int = 0) -> EvalResult:
    """Predict every sample (optionally attacked) and score against the clean mask.

    An attacked image is fed at its attacked size; the prediction is resized
    back to the original mask resolution before scoring.
    """
    from .data import apply_attack
    from .model import predict

    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    scores = []
    for sample in dataset:
        attacked = apply_attack(sample, attack, seed=seed)
        prob = predict(model, attacked.image)
        h, w = sample.mask.shape
        if prob.shape != (h, w):
            prob = cv2.resize(prob, (w, h), interpolation=cv2.INTER_LINEAR)
        scores.append(score_image(sample.id, prob, sample.mask))
    return aggregate(scores)


def write_per_image_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "f1_fixed", "f1_optimal", "auc", "auc_defined", "tp", "fp", "fn", "tn"])
        for s in result.per_image:
            w.writerow([s.id, f"{s.f1_fixed:.6f}", f"{s.f1_optimal:.6f}", f"{s.auc:.6f}",
                        int(s.auc_defined), s.tp, s.fp, s.fn, s.tn])
