"""Per-class DSC / sensitivity from confusion counts, with fold aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

CSV_COLUMNS = ["dataset", "fold", "class", "dsc", "sensitivity", "tp", "fn", "fp"]
AGGREGATE_FOLD = "mean±std"


@dataclass
class ClassCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0

    @property
    def intersection(self) -> int:
        return self.tp

    @property
    def pred(self) -> int:
        return self.tp + self.fp

    @property
    def true(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp)

    def dsc(self) -> Optional[float]:
        denom = self.pred + self.true
        return None if denom == 0 else 2.0 * self.intersection / denom

    def sensitivity(self) -> Optional[float]:
        return None if self.true == 0 else self.tp / self.true


def confusion_counts(pred: np.ndarray, true: np.ndarray, cls: int) -> ClassCounts:
    p = np.asarray(pred) == cls
    t = np.asarray(true) == cls
    tp = int(np.count_nonzero(p & t))
    return ClassCounts(tp, int(np.count_nonzero(t)) - tp, int(np.count_nonzero(p)) - tp)


@dataclass
class ImageResult:
    sample_id: str
    fold: int
    cls: int
    counts: ClassCounts


@dataclass
class FoldClassRow:
    dataset: str
    fold: int
    cls: int
    dsc: Optional[float]
    sensitivity: Optional[float]
    counts: ClassCounts
    n_dsc: int
    n_sensitivity: int


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


@dataclass
class MetricsReport:
    """Confusion counts per (dataset, fold, class) with derived ratios.

    By default DSC and sensitivity are averaged per image; an image where a
    class is absent from both prediction and truth is excluded from that
    class's mean (its DSC is 0/0). With ``pooled=True`` the ratios are
    computed once from counts summed over the fold.
    """

    dataset: str
    num_classes: int
    images: List[ImageResult] = field(default_factory=list)
    pooled: bool = False
    flags: List[str] = field(default_factory=list)

    def add_image(self, sample_id: str, fold: int, pred: np.ndarray, true: np.ndarray) -> None:
        for c in range(1, self.num_classes):
            self.images.append(ImageResult(sample_id, fold, c, confusion_counts(pred, true, c)))

    @property
    def folds(self) -> List[int]:
        return sorted({r.fold for r in self.images})

    def rows(self) -> List[FoldClassRow]:
        out = []
        for f in self.folds:
            for c in range(1, self.num_classes):
                items = [r for r in self.images if r.fold == f and r.cls == c]
                total = ClassCounts()
                for r in items:
                    total = total + r.counts
                dscs = [d for d in (r.counts.dsc() for r in items) if d is not None]
                sens = [s for s in (r.counts.sensitivity() for r in items) if s is not None]
                if self.pooled:
                    dsc, sen = total.dsc(), total.sensitivity()
                else:
                    dsc, sen = _mean(dscs), _mean(sens)
                out.append(FoldClassRow(self.dataset, f, c, dsc, sen, total, len(dscs), len(sens)))
        return out

    def aggregate(self) -> Dict[int, dict]:
        """Per class: mean and sample std (ddof=1) of the fold-level ratios."""
        rows = self.rows()
        out = {}
        for c in range(1, self.num_classes):
            crow = [r for r in rows if r.cls == c]
            entry = {"counts": ClassCounts()}
            for r in crow:
                entry["counts"] = entry["counts"] + r.counts
            for key in ("dsc", "sensitivity"):
                vals = [getattr(r, key) for r in crow if getattr(r, key) is not None]
                mean = float(np.mean(vals)) if vals else None
                # the sample std of a single fold is undefined
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
                entry[key] = (mean, std)
            out[c] = entry
        return out

    def mean_foreground_dsc(self, fold: Optional[int] = None) -> float:
        vals = [r.dsc for r in self.rows() if r.dsc is not None and (fold is None or r.fold == fold)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows():
            w.writerow([r.dataset, r.fold, r.cls, _fmt(r.dsc), _fmt(r.sensitivity), r.counts.tp, r.counts.fn, r.counts.fp])
        for c, entry in self.aggregate().items():
            cnt = entry["counts"]
            w.writerow(
                [self.dataset, AGGREGATE_FOLD, c, _fmt_pm(entry["dsc"]), _fmt_pm(entry["sensitivity"]), cnt.tp, cnt.fn, cnt.fp]
            )
        return buf.getvalue()

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge reports with different class counts")
        return MetricsReport(
            self.dataset, self.num_classes, self.images + other.images, self.pooled, self.flags + other.flags
        )


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else repr(float(v))


def _fmt_pm(pair) -> str:
    mean, std = pair
    if mean is None:
        return "n/a"
    return f"{mean!r}±{'n/a' if std is None else repr(std)}"


def parse_metrics_csv(text: str) -> List[dict]:
    return list(csv.DictReader(io.StringIO(text)))
