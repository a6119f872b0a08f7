"""Confusion matrix, per-class metrics, one-vs-rest ROC/AUC, and report emission.

Per-class "accuracy" is defined as recall, the one-vs-rest reading under
which support-weighted accuracy equals overall accuracy. AUC uses the
Mann-Whitney statistic with ties counted one half, computed from average
ranks in O(n log n).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .classes import CLASS_CODES, NUM_CLASSES

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # 7x7 ints, rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class ClassRow:
    precision: float
    recall: float
    f1: float
    accuracy: float          # == recall by definition
    auc: float | None
    support: int


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class AggregateMetrics:
    macro: dict[str, float]
    weighted: dict[str, float]
    overall_accuracy: float
    micro_auc: float | None


# ---------------------------------------------------------------------------

def confusion_matrix(preds: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labels.shape} labels")
    if len(preds) and (
        preds.min() < 0 or preds.max() >= NUM_CLASSES
        or labels.min() < 0 or labels.max() >= NUM_CLASSES
    ):
        raise ValueError(f"class indices must lie in [0,{NUM_CLASSES})")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC via average ranks: ties between groups count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _roc_points(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) at every distinct score, from (0,0) to (1,1)."""
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positive[order].astype(np.int64)
    distinct = np.where(np.diff(sorted_scores))[0]
    cut = np.r_[distinct, len(sorted_scores) - 1]
    tps = np.cumsum(sorted_pos)[cut]
    fps = (cut + 1) - tps
    n_pos = sorted_pos.sum()
    n_neg = len(sorted_pos) - n_pos
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, sorted_scores[cut]]
    return fpr, tpr, thresholds


def roc_auc_ovr(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[dict[str, RocCurve | None], float]:
    """One-vs-rest ROC per class plus the pooled micro-average AUC.

    Classes without positives get None (excluded from macro averages); the
    micro AUC pools all N*7 (score, is-positive) pairs into one binary task,
    whose full curve is stored under the extra key "micro".
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != NUM_CLASSES:
        raise ValueError(f"scores must be Nx{NUM_CLASSES}, got {scores.shape}")
    if len(labels) != len(scores):
        raise ValueError("scores and labels disagree on sample count")
    if len(labels) < 2:
        raise ValueError("need at least two samples for ROC analysis")
    curves: dict[str, RocCurve | None] = {}
    onehot = np.zeros_like(scores, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    for k, code in enumerate(CLASS_CODES):
        positive = onehot[:, k]
        if positive.sum() == 0 or positive.sum() == len(positive):
            curves[code] = None
            continue
        fpr, tpr, thr = _roc_points(scores[:, k], positive)
        curves[code] = RocCurve(fpr=fpr, tpr=tpr, thresholds=thr,
                                auc=binary_auc(scores[:, k], positive))
    fpr, tpr, thr = _roc_points(scores.ravel(), onehot.ravel())
    micro_auc = binary_auc(scores.ravel(), onehot.ravel())
    curves["micro"] = RocCurve(fpr=fpr, tpr=tpr, thresholds=thr, auc=micro_auc)
    return curves, micro_auc


def per_class_metrics(
    cm: ConfusionMatrix,
    scores: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> dict[str, ClassRow]:
    """Precision/recall/F1 (+ per-class OVR AUC when scores and labels are given)."""
    counts = cm.counts
    aucs: dict[str, float | None] = {code: None for code in CLASS_CODES}
    if scores is not None:
        if labels is None:
            raise ValueError("per-class AUC needs the sample labels alongside scores")
        curves, _ = roc_auc_ovr(scores, labels)
        aucs = {
            code: (curves[code].auc if curves[code] is not None else None)
            for code in CLASS_CODES
        }
    rows: dict[str, ClassRow] = {}
    for k, code in enumerate(CLASS_CODES):
        tp = float(counts[k, k])
        fp = float(counts[:, k].sum() - tp)
        fn = float(counts[k, :].sum() - tp)
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        rows[code] = ClassRow(
            precision=precision,
            recall=recall,
            f1=f1,
            accuracy=recall,
            auc=aucs[code],
            support=int(counts[k, :].sum()),
        )
    return rows


def aggregate(
    per_class: dict[str, ClassRow],
    cm: ConfusionMatrix | None = None,
    micro_auc: float | None = None,
) -> AggregateMetrics:
    """Macro (plain mean) and weighted (support-weighted mean) of every metric."""
    supports = np.array([per_class[c].support for c in CLASS_CODES], dtype=np.float64)
    total = supports.sum()
    if total <= 0:
        raise ValueError("aggregate needs at least one evaluated sample")
    macro: dict[str, float] = {}
    weighted: dict[str, float] = {}
    for name in ("precision", "recall", "f1", "accuracy"):
        vals = np.array([getattr(per_class[c], name) for c in CLASS_CODES])
        macro[name] = float(vals.mean())
        weighted[name] = float((vals * supports).sum() / total)
    defined = [(per_class[c].auc, per_class[c].support) for c in CLASS_CODES
               if per_class[c].auc is not None]
    if defined:
        auc_vals = np.array([d[0] for d in defined])
        auc_sup = np.array([d[1] for d in defined], dtype=np.float64)
        macro["auc"] = float(auc_vals.mean())
        weighted["auc"] = float((auc_vals * auc_sup).sum() / auc_sup.sum())
    if cm is not None:
        overall = float(np.trace(cm.counts) / cm.total)
    else:
        overall = weighted["recall"]
    return AggregateMetrics(
        macro=macro, weighted=weighted, overall_accuracy=overall, micro_auc=micro_auc
    )


# ---------------------------------------------------------------------------
# report emission

def metrics_to_dict(
    per_class: dict[str, ClassRow], agg: AggregateMetrics
) -> dict:
    return {
        "per_class": {
            code: {
                "precision": row.precision,
                "recall": row.recall,
                "f1": row.f1,
                "accuracy": row.accuracy,
                "auc": row.auc,
                "support": row.support,
            }
            for code, row in per_class.items()
        },
        "macro": agg.macro,
        "weighted": agg.weighted,
        "overall_accuracy": agg.overall_accuracy,
        "micro_auc": agg.micro_auc,
    }


def emit_report(
    per_class: dict[str, ClassRow],
    agg: AggregateMetrics,
    cm: ConfusionMatrix,
    out_dir: Path | str,
    curves: dict[str, RocCurve | None] | None = None,
) -> dict[str, Path]:
    """Write metrics.json, confusion.csv/.png, and ROC curve image + points CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w") as fh:
        json.dump(metrics_to_dict(per_class, agg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written["metrics"] = metrics_path

    confusion_path = out_dir / "confusion.csv"
    with open(confusion_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred", *CLASS_CODES])
        for k, code in enumerate(CLASS_CODES):
            writer.writerow([code, *cm.counts[k].tolist()])
    written["confusion_csv"] = confusion_path

    written["confusion_png"] = _plot_confusion(cm, out_dir / "confusion.png")
    if curves is not None:
        defined = {c: rc for c, rc in curves.items() if rc is not None}
        if defined:
            written["roc_png"] = _plot_roc(defined, out_dir / "roc.png")
            roc_csv = out_dir / "roc_points.csv"
            with open(roc_csv, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["class", "threshold", "fpr", "tpr"])
                for code, rc in defined.items():
                    for thr, fpr, tpr in zip(rc.thresholds, rc.fpr, rc.tpr):
                        writer.writerow([code, thr, fpr, tpr])
            written["roc_csv"] = roc_csv
        else:
            log.warning("no defined ROC curves; skipping ROC plot emission")
    return written


def _plot_confusion(cm: ConfusionMatrix, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(NUM_CLASSES), CLASS_CODES, rotation=45)
    ax.set_yticks(range(NUM_CLASSES), CLASS_CODES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(NUM_CLASSES):
        for j in range(NUM_CLASSES):
            ax.text(j, i, str(cm.counts[i, j]), ha="center", va="center", fontsize=8)
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_roc(curves: dict[str, RocCurve], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for code, rc in curves.items():
        style = {"lw": 2.0, "ls": ":"} if code == "micro" else {}
        ax.plot(rc.fpr, rc.tpr, label=f"{code} (AUC {rc.auc:.4f})", **style)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
