"""Classification metrics: per-class recall, MCA, one-vs-rest AUC.

MCA (mean class accuracy) is the unweighted mean of per-class recalls,
so every class counts equally however many samples it has. AUC is
computed per class against the rest and averaged; classes without both a
positive and a negative sample are excluded from the mean with a warning
rather than imputed.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

__all__ = [
    "PredictionSet",
    "MetricsReport",
    "compute_recalls",
    "one_vs_rest_auc",
    "confusion_matrix",
    "build_report",
    "render_report",
]


@dataclass
class PredictionSet:
    """Per-sample score vectors and true labels.

    Predicted label is the argmax of the scores, ties to the lowest index.
    """

    scores: np.ndarray
    true_labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.scores.ndim != 2 or len(self.scores) != len(self.true_labels):
            raise ValueError("scores must be (N, C) with matching true_labels")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


@dataclass
class MetricsReport:
    per_class_recall: np.ndarray
    mca: float
    auc_per_class: np.ndarray  # NaN where undefined
    mean_auc: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    minority_recall: float
    minority_class: int
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        return {
            "per_class_recall": [float(r) for r in self.per_class_recall],
            "mca": self.mca,
            "auc_per_class": [None if np.isnan(a) else float(a) for a in self.auc_per_class],
            "mean_auc": self.mean_auc,
            "confusion": self.confusion.tolist(),
            "minority_recall": self.minority_recall,
            "minority_class": self.minority_class,
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class_recall=np.asarray(d["per_class_recall"], dtype=np.float64),
            mca=d["mca"],
            auc_per_class=np.asarray(
                [np.nan if a is None else a for a in d["auc_per_class"]], dtype=np.float64
            ),
            mean_auc=d["mean_auc"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            minority_recall=d["minority_recall"],
            minority_class=d["minority_class"],
            class_names=d["class_names"],
        )


def compute_recalls(preds: PredictionSet) -> tuple[np.ndarray, float]:
    """Per-class recall (correct_c / total_c) and their unweighted mean."""
    c = preds.num_classes
    predicted = preds.predicted
    recalls = np.zeros(c, dtype=np.float64)
    for k in range(c):
        mask = preds.true_labels == k
        total = int(mask.sum())
        if total == 0:
            raise ValueError(f"class {k} absent from ground truth; recall undefined")
        recalls[k] = float((predicted[mask] == k).sum()) / total
    return recalls, float(recalls.mean())


def one_vs_rest_auc(preds: PredictionSet) -> tuple[np.ndarray, float]:
    """Per-class ROC AUC against the rest, plus the mean over defined classes.

    Uses the rank statistic with midranks for ties (equivalent to counting
    all positive/negative pairs, ties worth 1/2). A class missing either
    positives or negatives gets NaN and is excluded from the mean.
    """
    c = preds.num_classes
    aucs = np.full(c, np.nan, dtype=np.float64)
    for k in range(c):
        positive = preds.true_labels == k
        n_pos = int(positive.sum())
        n_neg = len(preds.true_labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            logger.warning("class %d has no %s samples; AUC undefined, excluded from mean",
                           k, "positive" if n_pos == 0 else "negative")
            continue
        ranks = rankdata(preds.scores[:, k], method="average")
        rank_sum = ranks[positive].sum()
        aucs[k] = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    defined = aucs[~np.isnan(aucs)]
    mean_auc = float(defined.mean()) if len(defined) else float("nan")
    return aucs, mean_auc


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    c = preds.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(preds.true_labels, preds.predicted):
        confusion[t, p] += 1
    return confusion


def build_report(
    preds: PredictionSet,
    minority_class: int,
    class_names: list[str] | None = None,
) -> MetricsReport:
    if not 0 <= minority_class < preds.num_classes:
        raise ValueError(f"minority_class {minority_class} out of range for {preds.num_classes} classes")
    recalls, mca = compute_recalls(preds)
    aucs, mean_auc = one_vs_rest_auc(preds)
    return MetricsReport(
        per_class_recall=recalls,
        mca=mca,
        auc_per_class=aucs,
        mean_auc=mean_auc,
        confusion=confusion_matrix(preds),
        minority_recall=float(recalls[minority_class]),
        minority_class=minority_class,
        class_names=class_names,
    )


def render_report(report: MetricsReport, out_dir: str | Path) -> None:
    """Write report.json, per_class.csv and a per-class recall bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")

    names = report.class_names or [str(i) for i in range(len(report.per_class_recall))]
    with open(out_dir / "per_class.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "recall", "auc"])
        for name, recall, auc in zip(names, report.per_class_recall, report.auc_per_class):
            writer.writerow([name, f"{recall:.6f}", "" if np.isnan(auc) else f"{auc:.6f}"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(names), 3.2))
    ax.bar(names, report.per_class_recall, color="#4878cf")
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("recall")
    ax.set_title(f"per-class recall (MCA {report.mca:.3f})")
    fig.tight_layout()
    fig.savefig(out_dir / "recall_bar.png", dpi=120)
    plt.close(fig)
