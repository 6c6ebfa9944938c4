"""Held-out evaluation: ROC-AUC, PR-AUC, Youden-optimal thresholding, and
report emission.

Conventions (fixed so independent implementations agree to 1e-9):
  * ROC is the exact step curve over distinct-score blocks; tied blocks
    contribute diagonal segments and the area is trapezoidal. This equals the
    pairwise statistic P(s+ > s-) + 0.5 * P(s+ = s-).
  * PR-AUC is average precision: sum over distinct thresholds (descending) of
    (recall_t - recall_prev) * precision_t. No interpolation.
  * Youden's threshold maximizes TPR - FPR over candidate thresholds = the
    distinct scores plus +infinity, predicting anomalous when score >= t;
    ties in J break to the larger threshold (fewer predicted positives).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "EvalReport",
    "roc_auc",
    "pr_auc",
    "roc_curve",
    "pr_curve",
    "youden_threshold",
    "evaluate",
    "write_report",
    "aggregate",
]


def _check_binary(labels: np.ndarray) -> None:
    if labels.size == 0:
        raise DataError("no samples to evaluate")
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("labels must be 0 or 1")


def _require_both_classes(labels: np.ndarray) -> None:
    if labels.min() == labels.max():
        raise DataError("single-class input: skip thresholded metrics")


def _block_counts(scores: np.ndarray, labels: np.ndarray):
    """Distinct scores (descending) with cumulative TP/FP at >= threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    distinct, idx = np.unique(-s, return_index=True)
    thresholds = -distinct                      # descending
    block_edges = np.append(idx[1:], s.size)    # cumulative counts at block ends
    tp = np.cumsum(y)[block_edges - 1].astype(np.float64)
    fp = (block_edges - np.cumsum(y)[block_edges - 1]).astype(np.float64)
    return thresholds, tp, fp


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) of the exact step ROC, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    _require_both_classes(labels)
    thresholds, tp, fp = _block_counts(scores, labels)
    n_pos = float(labels.sum())
    n_neg = float(labels.size - labels.sum())
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thr = np.concatenate([[math.inf], thresholds])
    return fpr, tpr, thr


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the step ROC (Mann-Whitney with tie credit)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def pr_curve(scores, labels):
    """(recall, precision, thresholds) at distinct descending thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    if labels.sum() == 0:
        raise DataError("pr curve needs at least one positive")
    thresholds, tp, fp = _block_counts(scores, labels)
    recall = tp / float(labels.sum())
    precision = tp / (tp + fp)
    return recall, precision, thresholds


def pr_auc(scores, labels) -> float:
    """Average precision over distinct-threshold blocks."""
    recall, precision, _ = pr_curve(scores, labels)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def youden_threshold(scores, labels):
    """Maximize J = TPR - FPR; returns (t_star, metrics dict at t_star).

    Predictions at the optimum use ``score >= t_star``. Precision (and F1)
    are defined as 0 when nothing is predicted positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    _require_both_classes(labels)
    n_pos = float(labels.sum())
    n_neg = float(labels.size - n_pos)

    thresholds, tp, fp = _block_counts(scores, labels)
    j_values = tp / n_pos - fp / n_neg
    candidates = np.concatenate([[math.inf], thresholds])  # descending
    j_all = np.concatenate([[0.0], j_values])
    best = int(np.argmax(j_all))  # first max in descending order = largest threshold
    t_star = float(candidates[best])

    pred = scores >= t_star
    tp_c = int(np.sum(pred & (labels == 1)))
    fp_c = int(np.sum(pred & (labels == 0)))
    fn_c = int(np.sum(~pred & (labels == 1)))
    tn_c = int(np.sum(~pred & (labels == 0)))
    precision = tp_c / (tp_c + fp_c) if tp_c + fp_c > 0 else 0.0
    recall = tp_c / (tp_c + fn_c) if tp_c + fn_c > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    metrics = {
        "acc": (tp_c + tn_c) / float(labels.size),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tn": tn_c, "fp": fp_c, "fn": fn_c, "tp": tp_c,
        "j": float(j_all[best]),
    }
    return t_star, metrics


@dataclass
class EvalReport:
    roc_auc: float | None
    pr_auc: float | None
    youden_threshold: float | None
    acc: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    confusion: dict | None
    roc_points: list
    pr_points: list
    n_samples: int
    skipped: str | None = None

    def to_dict(self) -> dict:
        return {
            "roc_auc": self.roc_auc,
            "pr_auc": self.pr_auc,
            "youden_threshold": self.youden_threshold,
            "acc": self.acc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion,
            "roc_points": self.roc_points,
            "pr_points": self.pr_points,
            "n_samples": self.n_samples,
            "skipped": self.skipped,
        }


def evaluate(scores: Sequence[float], labels: Sequence[int]) -> EvalReport:
    """Full held-out report; single-class inputs produce a skip report
    instead of NaNs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    if labels.min() == labels.max():
        return EvalReport(
            roc_auc=None, pr_auc=None, youden_threshold=None, acc=None,
            precision=None, recall=None, f1=None, confusion=None,
            roc_points=[], pr_points=[], n_samples=int(labels.size),
            skipped="single-class test set: thresholded metrics skipped",
        )
    fpr, tpr, roc_thr = roc_curve(scores, labels)
    recall_pts, precision_pts, pr_thr = pr_curve(scores, labels)
    t_star, m = youden_threshold(scores, labels)
    return EvalReport(
        roc_auc=float(np.trapezoid(tpr, fpr)),
        pr_auc=pr_auc(scores, labels),
        youden_threshold=t_star,
        acc=m["acc"], precision=m["precision"], recall=m["recall"], f1=m["f1"],
        confusion={"tn": m["tn"], "fp": m["fp"], "fn": m["fn"], "tp": m["tp"]},
        roc_points=[[float(f), float(t), float(th)] for f, t, th in zip(fpr, tpr, roc_thr)],
        pr_points=[[float(r), float(p), float(th)] for r, p, th in zip(recall_pts, precision_pts, pr_thr)],
        n_samples=int(labels.size),
    )


def write_report(report: EvalReport, out_dir) -> None:
    """Emit eval.json plus roc.csv / pr.csv point lists for external plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "roc.csv", "w") as fh:
        fh.write("fpr,tpr,threshold\n")
        for f, t, th in report.roc_points:
            fh.write(f"{f!r},{t!r},{th!r}\n")
    with open(out / "pr.csv", "w") as fh:
        fh.write("recall,precision,threshold\n")
        for r, p, th in report.pr_points:
            fh.write(f"{r!r},{p!r},{th!r}\n")


AGGREGATE_FIELDS = ("roc_auc", "pr_auc", "acc", "precision", "recall", "f1")


def aggregate(report_dicts: Sequence[dict]) -> dict:
    """Mean and normal-approximation 95% CI over several eval reports."""
    if not report_dicts:
        raise DataError("nothing to aggregate")
    out = {"n_runs": len(report_dicts)}
    for name in AGGREGATE_FIELDS:
        values = [d[name] for d in report_dicts if d.get(name) is not None]
        if not values:
            continue
        arr = np.asarray(values, dtype=np.float64)
        sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[name] = {
            "mean": float(arr.mean()),
            "ci95": 1.96 * sd / math.sqrt(arr.size),
            "n": int(arr.size),
        }
    return out
