"""Calibration and discrimination metrics: ECE, Brier, AUROC, reliability bins."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import SchemaError

DEFAULT_BINS = 10


def _arrays(preds, labels):
    p = np.asarray(preds, dtype=np.float64).ravel()
    c = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != c.shape:
        raise SchemaError(f"{p.size} predictions vs {c.size} labels")
    if p.size == 0:
        raise SchemaError("no predictions")
    return p, c


def bin_index(preds, n_bins: int) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    return np.clip(np.floor(p * n_bins).astype(np.int64), 0, n_bins - 1)


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    conf: float
    acc: float


def reliability_bins(preds, labels, n_bins: int = DEFAULT_BINS) -> list:
    """Equal-width bins over [0, 1]; p = 1.0 lands in the top bin.

    Empty bins are emitted with count 0 and conf/acc 0.
    """
    if n_bins < 1:
        raise SchemaError("need at least one bin")
    p, c = _arrays(preds, labels)
    idx = bin_index(p, n_bins)
    out = []
    for b in range(n_bins):
        sel = idx == b
        k = int(sel.sum())
        conf = float(p[sel].mean()) if k else 0.0
        acc = float(c[sel].mean()) if k else 0.0
        out.append(ReliabilityBin(b / n_bins, (b + 1) / n_bins, k, conf, acc))
    return out


def ece_from_bins(bins) -> float:
    n = sum(b.count for b in bins)
    return float(sum(b.count / n * abs(b.acc - b.conf) for b in bins if b.count))


def ece(preds, labels, n_bins: int = DEFAULT_BINS) -> float:
    return ece_from_bins(reliability_bins(preds, labels, n_bins))


def brier(preds, labels) -> float:
    p, c = _arrays(preds, labels)
    return float(np.mean((p - c) ** 2))


def auroc(preds, labels) -> Optional[float]:
    """Mann-Whitney AUROC with ties counted as 1/2; None if a class is absent."""
    p, c = _arrays(preds, labels)
    pos = c == 1
    n_pos = int(pos.sum())
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def nll(preds, labels, eps: float = 1e-12) -> float:
    p, c = _arrays(preds, labels)
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(c * np.log(p) + (1 - c) * np.log(1 - p)))


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    auroc: Optional[float]
    bins: list
    n: int
    n_bins: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "ece": self.ece,
            "brier": self.brier,
            "auroc": self.auroc,
            "bins": [{"lo": b.lo, "hi": b.hi, "count": b.count, "conf": b.conf, "acc": b.acc} for b in self.bins],
            "n": self.n,
            "n_bins": self.n_bins,
        }
        d.update(self.extra)
        return d


def report(preds, labels, n_bins: int = DEFAULT_BINS) -> CalibrationReport:
    bins = reliability_bins(preds, labels, n_bins)
    return CalibrationReport(ece_from_bins(bins), brier(preds, labels), auroc(preds, labels), bins, len(preds), n_bins)


def write_bins_csv(bins, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        for b in bins:
            w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.conf), repr(b.acc)])
