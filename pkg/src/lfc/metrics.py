"""Dice and average symmetric surface distance for class-index masks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

CLASS_NAMES = {0: "background", 1: "disc", 2: "cup"}


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ConfigurationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks count as perfect agreement."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check(pred, gt)
    p, g = pred == cls, gt == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Coordinates (k, 2) of mask pixels with a 4-neighbour outside the mask.

    Pixels on the image border always count as boundary.
    """
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return np.argwhere(core & ~interior)


def _min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(d2.min(axis=1).astype(np.float64))


def asd(pred: np.ndarray, gt: np.ndarray, cls: int) -> float | None:
    """Average symmetric surface distance in pixels, or None if a boundary is empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check(pred, gt)
    bp, bg = boundary(pred == cls), boundary(gt == cls)
    if len(bp) == 0 or len(bg) == 0:
        return None
    terms = np.concatenate([_min_distances(bp, bg), _min_distances(bg, bp)])
    return math.fsum(terms.tolist()) / (len(bp) + len(bg))


@dataclass
class MetricReport:
    classes: list[int]
    dice: dict[int, list[float]] = field(default_factory=dict)
    asd: dict[int, list[float | None]] = field(default_factory=dict)

    def values(self, metric: str, cls: int) -> list[float]:
        vals = self.dice[cls] if metric == "dice" else self.asd[cls]
        return [v for v in vals if v is not None]

    def excluded(self, metric: str, cls: int) -> int:
        vals = self.dice[cls] if metric == "dice" else self.asd[cls]
        return sum(v is None for v in vals)

    def mean_std(self, metric: str, cls: int) -> tuple[float, float]:
        vals = self.values(metric, cls)
        if not vals:
            return float("nan"), float("nan")
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def mean_dice(self) -> float:
        """Mean over classes of the per-class mean Dice."""
        return float(np.mean([self.mean_std("dice", c)[0] for c in self.classes]))

    def formatted(self, metric: str, cls: int) -> str:
        """Table-style ``mean±std``; Dice in percent, ASD in pixels."""
        m, s = self.mean_std(metric, cls)
        scale = 100.0 if metric == "dice" else 1.0
        return f"{m * scale:.2f}±{s * scale:.2f}"

    def rows(self) -> list[dict]:
        out = []
        for c in self.classes:
            for metric in ("dice", "asd"):
                m, s = self.mean_std(metric, c)
                out.append(dict(
                    {"class": CLASS_NAMES.get(c, str(c)), "metric": metric},
                    mean=f"{m:.6f}", std=f"{s:.6f}",
                    n=len(self.values(metric, c)), excluded=self.excluded(metric, c),
                ))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["class", "metric", "mean", "std", "n", "excluded"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


def report(samples, classes=(1, 2)) -> MetricReport:
    """Per-class Dice/ASD over (pred, gt) pairs with population std."""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("report needs at least one sample")
    rep = MetricReport(classes=list(classes))
    for c in rep.classes:
        rep.dice[c] = [dice(p, g, c) for p, g in samples]
        rep.asd[c] = [asd(p, g, c) for p, g in samples]
    return rep
