"""Classification quality metrics; "animal" is the positive class."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyClass, EmptyInput, LengthMismatch, SingleClass
from .imageio import ANIMAL, EMPTY


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def normalized(self) -> dict[str, float | None]:
        """Row-normalized matrix (each true class sums to 1)."""
        pos, neg = self.tp + self.fn, self.fp + self.tn
        return {
            "tp": _ratio(self.tp, pos), "fn": _ratio(self.fn, pos),
            "fp": _ratio(self.fp, neg), "tn": _ratio(self.tn, neg),
        }


def _ratio(num, den):
    return None if den == 0 else num / den


def confusion(preds, labels) -> ConfusionMatrix:
    preds = np.asarray(preds).astype(np.int64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if preds.size != labels.size:
        raise LengthMismatch(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise EmptyInput("no predictions to score")
    return ConfusionMatrix(
        tp=int(np.sum((preds == ANIMAL) & (labels == ANIMAL))),
        fp=int(np.sum((preds == ANIMAL) & (labels == EMPTY))),
        fn=int(np.sum((preds == EMPTY) & (labels == ANIMAL))),
        tn=int(np.sum((preds == EMPTY) & (labels == EMPTY))),
    )


@dataclass(frozen=True)
class Rates:
    acc: float
    fn_rate: float | None
    fp_rate: float | None
    precision: float | None
    recall: float | None
    f1: float | None


def rates(cm: ConfusionMatrix) -> Rates:
    """Rates over true-class totals; a zero denominator yields None, never 0."""
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None if precision is None or recall is None else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Rates(
        acc=(cm.tp + cm.tn) / cm.total,
        fn_rate=_ratio(cm.fn, cm.fn + cm.tp),
        fp_rate=_ratio(cm.fp, cm.fp + cm.tn),
        precision=precision,
        recall=recall,
        f1=f1,
    )


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float]]]:
    """ROC curve over distinct score thresholds and its trapezoidal area.

    Tied scores move as one step, which makes the area equal to the
    Mann-Whitney probability P(s_pos > s_neg) + P(s_pos = s_neg) / 2.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if s.size != y.size:
        raise LengthMismatch(f"{s.size} scores for {y.size} labels")
    n_pos = int(np.sum(y == ANIMAL))
    n_neg = int(np.sum(y == EMPTY))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y == ANIMAL)[ends]
    fp = np.cumsum(y == EMPTY)[ends]
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def diff_metrics(stats_animal: dict, stats_empty: dict) -> tuple[float, float, float]:
    """Absolute gaps between the class means of whole-image MSE, MAE and SSIM."""
    out = []
    for key in ("mse", "mae", "ssim"):
        a = np.asarray(stats_animal[key], dtype=np.float64)
        e = np.asarray(stats_empty[key], dtype=np.float64)
        if a.size == 0 or e.size == 0:
            raise EmptyClass(f"no {key} values for one of the classes")
        out.append(float(abs(a.mean() - e.mean())))
    return tuple(out)


@dataclass
class MetricsReport:
    auc: float
    acc: float
    fn_rate: float | None
    fp_rate: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    threshold: float
    confusion: ConfusionMatrix
    roc_points: list[tuple[float, float]] = field(repr=False, default_factory=list)
    split: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        d["confusion_normalized"] = self.confusion.normalized()
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir, stem: str = "metrics") -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        write_roc_csv(out / f"{stem}_roc.csv", self.roc_points)


def write_roc_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            wr.writerow([repr(float(fpr)), repr(float(tpr))])


def evaluate(scores, labels, threshold: float = 0.5, split: str = "") -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    preds = (scores >= threshold).astype(np.int64)
    cm = confusion(preds, labels)
    r = rates(cm)
    auc, pts = roc_auc(scores, labels)
    return MetricsReport(auc=auc, acc=r.acc, fn_rate=r.fn_rate, fp_rate=r.fp_rate,
                         precision=r.precision, recall=r.recall, f1=r.f1, threshold=float(threshold),
                         confusion=cm, roc_points=pts, split=split)


def tune_threshold(scores, labels, fn_target: float = 0.05) -> float:
    """Largest threshold whose false-negative rate stays within ``fn_target``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos = scores[labels == ANIMAL]
    if pos.size == 0:
        raise SingleClass("threshold tuning needs animal examples")
    best = 0.0
    for t in np.unique(np.r_[scores, 0.0]):
        fn_rate = np.mean(pos < t)
        if fn_rate <= fn_target:
            best = max(best, float(t))
    return best
