"""Accuracy and macro one-vs-rest AUC, plus the per-pattern report table."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


def binary_auc(scores, positive) -> float:
    """Mann-Whitney rank statistic; ties get averaged ranks (count as half-ordered)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(probs, labels, n_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class one-vs-rest AUCs over classes present in ``labels``.

    Classes with no positive (or no negative) sample are left out of the mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    C = probs.shape[1] if n_classes is None else n_classes
    aucs = []
    for c in range(C):
        pos = labels == c
        if pos.all() or not pos.any():
            log.warning("class %d is degenerate in this split; omitted from macro AUC", c)
            continue
        aucs.append(binary_auc(probs[:, c], pos))
    if not aucs:
        return float("nan")
    return float(np.mean(aucs))


def accuracy(probs, labels) -> float:
    probs = np.asarray(probs)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def avg_acc(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def avg_auc(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def by_pattern(self) -> dict[str, tuple[float, float]]:
        return {p: (a, u) for p, a, u in self.rows}

    def to_csv(self, path: Optional[str | Path] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pattern", "ACC", "AUC"])
        for p, a, u in self.rows:
            w.writerow([p, repr(float(a)), repr(float(u))])
        w.writerow(["AVG", repr(self.avg_acc), repr(self.avg_auc)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        for rec in reader:
            if rec["pattern"] == "AVG":
                continue
            rows.append((rec["pattern"], float(rec["ACC"]), float(rec["AUC"])))
        return cls(rows)
