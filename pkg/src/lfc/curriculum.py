"""Easy-to-hard curriculum: difficulty scores, batch re-weighting, focus schedule."""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence

import numpy as np

from .core import LOG_EPS, softmax_channels
from .errors import ConfigurationError, DegenerateInputError, ValidationError
from .model import ModelBranch, predict_logits

NORMALIZATION_TOL = 1e-6
R_MAX = 5
DELTA = 1.5


def _check_prob_map(p: np.ndarray, what: str) -> None:
    if np.any(np.abs(p.sum(axis=0) - 1.0) > NORMALIZATION_TOL) or np.any(p < 0):
        raise ValidationError(f"{what} is not a per-pixel probability map (channel sums must be 1)")


def kl_divergence(p_source: np.ndarray, p_target: np.ndarray, check: bool = True) -> float:
    """Pixel-averaged KL(p_source || p_target) for one (C, H, W) sample, in nats.

    The per-pixel divergence sums over classes; the target probability is
    clamped at 1e-8 inside the log ratio and 0·log 0 is taken as 0.
    """
    ps, pt = np.asarray(p_source, dtype=np.float64), np.asarray(p_target, dtype=np.float64)
    if ps.shape != pt.shape or ps.ndim != 3:
        raise ConfigurationError(f"kl_divergence needs equal (C, H, W) maps, got {ps.shape} and {pt.shape}")
    if check:
        _check_prob_map(ps, "p_source")
        _check_prob_map(pt, "p_target")
    pos = ps > 0
    terms = np.zeros_like(ps)
    terms[pos] = ps[pos] * (np.log(ps[pos]) - np.log(np.maximum(pt[pos], LOG_EPS)))
    d = terms.sum() / (ps.shape[1] * ps.shape[2])
    # clamping can push a numerically-equal pair a hair below zero
    return max(float(d), 0.0)


def batch_kl(p_source: np.ndarray, p_target: np.ndarray) -> np.ndarray:
    """kl_divergence for every sample of (B, C, H, W) stacks."""
    return np.array([kl_divergence(a, b) for a, b in zip(p_source, p_target)])


def alpha(R: int, R_max: int = R_MAX) -> float:
    """Weight on the source pseudo-label loss at epoch ``R``: 1 - sigmoid(R / R_max)."""
    if R < 0 or R_max < 1:
        raise ConfigurationError(f"alpha needs R >= 0 and R_max >= 1, got R={R}, R_max={R_max}")
    return 1.0 - 1.0 / (1.0 + math.exp(-R / R_max))


def batch_weights(d: Sequence[float], alpha_: float, delta: float = DELTA) -> np.ndarray:
    """Per-sample weights alpha*(delta - d_b/sum d) + (1 - alpha).

    A batch whose total difficulty is below 1e-12 uses the uniform ratio 1/B.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or len(d) < 1:
        raise ConfigurationError("batch_weights needs a non-empty 1-d list of difficulties")
    if not np.all(np.isfinite(d)):
        raise ValidationError("difficulty scores must be finite")
    total = d.sum()
    ratio = np.full(len(d), 1.0 / len(d)) if total < 1e-12 else d / total
    return alpha_ * (delta - ratio) + (1.0 - alpha_)


def expected_weight_sum(B: int, alpha_: float, delta: float = DELTA) -> float:
    return alpha_ * (B * delta - 1.0) + (1.0 - alpha_) * B


def probabilities(branch: ModelBranch, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return softmax_channels(predict_logits(branch, images, batch_size)).data


def score_dataset(p_source: np.ndarray, target: ModelBranch, images: np.ndarray) -> np.ndarray:
    """Difficulty of every image against cached source probabilities."""
    return batch_kl(p_source, probabilities(target, images))


def rank_dataset(source: ModelBranch, target: ModelBranch, dataset) -> list[tuple[int, float]]:
    """(sample_id, difficulty) sorted easy-first; ties keep sample-id order."""
    if len(dataset) == 0:
        raise DegenerateInputError("rank_dataset needs a non-empty dataset")
    d = batch_kl(probabilities(source, dataset.images), probabilities(target, dataset.images))
    ids = np.asarray(dataset.ids)
    order = np.lexsort((ids, d))
    return [(int(ids[i]), float(d[i])) for i in order]


def ranking_csv(ranking: list[tuple[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "difficulty"])
    for sid, d in ranking:
        w.writerow([sid, repr(d)])
    return buf.getvalue()
