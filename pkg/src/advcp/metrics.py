"""Pixel-level evaluation as an accumulating confusion matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accumulate(pred, gt) -> ConfusionCounts:
    """Confusion counts of binary prediction against binary ground truth."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ConfigError("prediction and ground truth must share a shape")
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def summarize(counts: ConfusionCounts) -> dict:
    """Precision, recall, F1, IoU and overall accuracy with every 0/0
    defined as 0.0.  F1 >= IoU holds identically and is asserted."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    oa = (tp + tn) / counts.total if counts.total else 0.0
    assert f1 >= iou - 1e-12
    return {"precision": precision, "recall": recall, "f1": f1, "iou": iou, "oa": oa}


def region_false_positives(pred, gt, region) -> int:
    """False-positive pixels falling inside a region mask (for example the
    distractor annotation), i.e. predicted change outside ground truth."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    r = np.asarray(region).astype(bool)
    if not p.shape == g.shape == r.shape:
        raise ConfigError("prediction, ground truth and region must share a shape")
    return int(np.count_nonzero(p & ~g & r))


def write_metrics_json(counts: ConfusionCounts, path) -> dict:
    summary = summarize(counts)
    payload = dict(summary)
    payload.update({"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn})
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def format_summary(summary: dict) -> str:
    """Console line with metric percentages at two decimals."""
    parts = [f"{k}={summary[k] * 100.0:.2f}%" for k in ("precision", "recall", "f1", "iou", "oa")]
    return "  ".join(parts)
