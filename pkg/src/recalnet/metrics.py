"""Overlap metrics and table-style reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THRESHOLD = 0.5


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) > threshold


def _counts(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    return inter, int(np.count_nonzero(pred)), int(np.count_nonzero(truth))


def iou(pred, truth) -> float:
    """|P & T| / |P | T|; two empty masks score 1."""
    inter, p, t = _counts(pred, truth)
    union = p + t - inter
    return 1.0 if union == 0 else inter / union


def dice(pred, truth) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1."""
    inter, p, t = _counts(pred, truth)
    return 1.0 if p + t == 0 else 2.0 * inter / (p + t)


def per_sample_scores(prob: np.ndarray, truth: np.ndarray) -> tuple[list[float], list[float]]:
    """IoU and Dice for every sample of an (N, 1, H, W) probability batch."""
    pred = binarize(prob)
    truth = np.asarray(truth) > 0.5
    ious = [iou(p, t) for p, t in zip(pred, truth)]
    dices = [dice(p, t) for p, t in zip(pred, truth)]
    return ious, dices


@dataclass
class ClassScores:
    ids: list[str] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)

    def add(self, ids, ious, dices) -> None:
        self.ids.extend(ids)
        self.iou.extend(ious)
        self.dice.extend(dices)

    # population standard deviation over samples, as the tables report
    def summary(self) -> dict[str, float]:
        ious, dices = np.asarray(self.iou), np.asarray(self.dice)
        return {"iou_mean": float(ious.mean()), "iou_std": float(ious.std()),
                "dice_mean": float(dices.mean()), "dice_std": float(dices.std())}


@dataclass
class MetricsReport:
    classes: dict[str, ClassScores] = field(default_factory=dict)

    def add(self, cls: str, ids, ious, dices) -> None:
        self.classes.setdefault(cls, ClassScores()).add(ids, ious, dices)

    def rows(self) -> list[dict]:
        """One row per class plus an 'overall' row averaging the class means and stds."""
        rows = [{"class": c, **s.summary()} for c, s in self.classes.items()]
        if rows:
            keys = ("iou_mean", "iou_std", "dice_mean", "dice_std")
            rows.append({"class": "overall", **{k: float(np.mean([r[k] for r in rows])) for k in keys}})
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou_mean", "iou_std", "dice_mean", "dice_std", "iou", "dice"])
            for r in self.rows():
                writer.writerow([r["class"]] + [f"{100 * r[k]:.2f}" for k in
                                                ("iou_mean", "iou_std", "dice_mean", "dice_std")]
                                + [format_cell(r["iou_mean"], r["iou_std"]),
                                   format_cell(r["dice_mean"], r["dice_std"])])

    def write_samples_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "id", "iou", "dice"])
            for c, s in self.classes.items():
                for sid, i, d in zip(s.ids, s.iou, s.dice):
                    writer.writerow([c, sid, repr(i), repr(d)])


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def read_report_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
