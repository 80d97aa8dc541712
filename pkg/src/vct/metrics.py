"""Confusion counts and change-detection metrics (changed = positive class)."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

METRIC_KEYS = ("precision", "recall", "f1", "iou", "oa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def accumulate(pred_mask, gt_mask, acc: ConfusionCounts | None = None) -> ConfusionCounts:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    new = ConfusionCounts(tp, tn, fp, fn)
    return new if acc is None else acc + new


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_lines(self) -> str:
        """Machine-readable ``key=value`` lines, percentages to 2 decimals."""
        lines = [f"{k}={100 * getattr(self, k):.2f}" for k in METRIC_KEYS]
        if self.degenerate:
            lines.append("degenerate=1")
        return "\n".join(lines) + "\n"

    def to_text(self, title: str = "") -> str:
        header = " ".join(f"{name:>9}" for name in ("Pre.", "Rec.", "F1", "IoU", "OA"))
        row = " ".join(f"{100 * getattr(self, k):9.2f}" for k in METRIC_KEYS)
        out = (f"{title}\n" if title else "") + header + "\n" + row + "\n"
        if self.degenerate:
            out += "(degenerate: undefined ratios reported as 0)\n"
        return out


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (0.0, True) if den == 0 else (num / den, False)


def compute(acc: ConfusionCounts) -> MetricReport:
    if acc.total == 0:
        raise ValueError("cannot compute metrics from an empty accumulator")
    precision, d1 = _ratio(acc.tp, acc.tp + acc.fp)
    recall, d2 = _ratio(acc.tp, acc.tp + acc.fn)
    iou, d3 = _ratio(acc.tp, acc.tp + acc.fn + acc.fp)
    f1, d4 = _ratio(2 * acc.tp, 2 * acc.tp + acc.fp + acc.fn)
    oa = (acc.tp + acc.tn) / acc.total
    return MetricReport(precision, recall, f1, iou, oa, d1 or d2 or d3 or d4)


def parse_lines(text: str) -> MetricReport:
    vals = {}
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or "=" not in ln:
            continue
        key, val = ln.split("=", 1)
        vals[key.strip()] = float(val)
    missing = [k for k in METRIC_KEYS if k not in vals]
    if missing:
        raise ValueError(f"report is missing {missing}")
    return MetricReport(*(vals[k] / 100 for k in METRIC_KEYS), degenerate=bool(vals.get("degenerate", 0)))
