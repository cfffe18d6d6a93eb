"""Dataset-level IoU / accuracy over the five foreground classes.

Counts are accumulated over the whole split before dividing. Accuracy is
per-class recall, TP / (TP + FN). Classes with no ground-truth pixels in the
split are reported as undefined and left out of the means.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .cods import FinalMasks
from .datamodel import CLASS_NAMES, ClassId

SCORED_CLASSES = (1, 2, 3, 4, 5)


@dataclass
class ClassScore:
    cls: int
    iou: float  # nan when undefined
    acc: float
    support: int
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def name(self) -> str:
        return CLASS_NAMES[ClassId(self.cls)]

    @property
    def defined(self) -> bool:
        return self.support > 0


@dataclass
class EvalReport:
    classes: list[ClassScore]
    miou: float
    macc: float
    n_images: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def num(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "miou": num(self.miou),
            "macc": num(self.macc),
            "n_images": self.n_images,
            "config_hash": self.config_hash,
            "classes": [
                {"class": c.name, "id": c.cls, "iou": num(c.iou), "acc": num(c.acc),
                 "support": c.support, "tp": c.tp, "fp": c.fp, "fn": c.fn}
                for c in self.classes
            ],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'class':<16}{'IoU':>8}{'Acc':>8}{'support':>10}"]
        for c in self.classes:
            iou = "   n/a" if not c.defined else f"{100 * c.iou:6.2f}"
            acc = "   n/a" if not c.defined else f"{100 * c.acc:6.2f}"
            lines.append(f"{c.name:<16}{iou:>8}{acc:>8}{c.support:>10}")
        lines.append(f"{'mean':<16}{100 * self.miou:8.2f}{100 * self.macc:8.2f}{self.n_images:>10} images")
        return "\n".join(lines)


class ConfusionCounter:
    """Per-class TP / FP / FN accumulator; merge() makes it a parallel reduction."""

    def __init__(self):
        self.tp = np.zeros(6, np.int64)
        self.fp = np.zeros(6, np.int64)
        self.fn = np.zeros(6, np.int64)
        self.n_images = 0

    def update(self, pred: FinalMasks | dict[int, np.ndarray], gt: np.ndarray) -> None:
        masks = pred.class_masks() if isinstance(pred, FinalMasks) else pred
        gt = np.asarray(gt)
        for cls in SCORED_CLASSES:
            p = np.asarray(masks[cls], bool)
            if p.shape != gt.shape:
                raise ValueError(f"prediction {p.shape} and ground truth {gt.shape} shapes differ")
            g = gt == cls
            self.tp[cls] += np.count_nonzero(p & g)
            self.fp[cls] += np.count_nonzero(p & ~g)
            self.fn[cls] += np.count_nonzero(~p & g)
        self.n_images += 1

    def merge(self, other: "ConfusionCounter") -> "ConfusionCounter":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.n_images += other.n_images
        return self

    def report(self, config_hash: str = "") -> EvalReport:
        classes = []
        for cls in SCORED_CLASSES:
            tp, fp, fn = (int(a[cls]) for a in (self.tp, self.fp, self.fn))
            support = tp + fn
            if support:
                iou, acc = tp / (tp + fp + fn), tp / support
            else:
                iou = acc = float("nan")
            classes.append(ClassScore(cls, iou, acc, support, tp, fp, fn))
        defined = [c for c in classes if c.defined]
        miou = float(np.mean([c.iou for c in defined])) if defined else float("nan")
        macc = float(np.mean([c.acc for c in defined])) if defined else float("nan")
        return EvalReport(classes, miou, macc, self.n_images, config_hash)


def score(preds: Iterable, gts: Iterable[np.ndarray], config_hash: str = "") -> EvalReport:
    """Score a stream of predictions (FinalMasks or class->mask dicts) against label rasters."""
    counter = ConfusionCounter()
    sentinel = object()
    pi, gi = iter(preds), iter(gts)
    while True:
        p, g = next(pi, sentinel), next(gi, sentinel)
        if p is sentinel and g is sentinel:
            break
        if p is sentinel or g is sentinel:
            raise ValueError("prediction and ground-truth streams have different lengths")
        counter.update(p, g)
    return counter.report(config_hash)
