"""Supervised training of the source model and segmentation inference."""

from __future__ import annotations

import logging

import numpy as np

from .core import adam_step, backward, cross_entropy_soft, softmax_channels
from .errors import DivergenceError
from .metrics import MetricReport, report
from .model import ModelBranch, SegNetConfig, build, forward, predict_logits
from .synth import Dataset

log = logging.getLogger(__name__)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(n, h, w) class indices -> (n, C, h, w) float one-hot."""
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(np.float64)


def predict_masks(branch: ModelBranch, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax class map; ties resolve to the lowest class index."""
    return predict_logits(branch, images, batch_size).argmax(axis=1)


def evaluate(branch: ModelBranch, data: Dataset, classes=(1, 2)) -> MetricReport:
    preds = predict_masks(branch, data.images)
    return report(zip(preds, data.labels), classes)


def split_train_val(data: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """Deterministic hold-out: the last ``val_fraction`` of samples by id."""
    order = np.argsort(data.ids, kind="stable")
    n_val = max(1, int(round(len(order) * val_fraction))) if val_fraction > 0 else 0
    if n_val >= len(order):
        n_val = len(order) - 1
    return data.subset(order[: len(order) - n_val]), data.subset(order[len(order) - n_val:])


def train_source(data: Dataset, config: SegNetConfig, seed: int, epochs: int, batch_size: int, lr: float,
                 on_epoch=None) -> ModelBranch:
    """Cross-entropy training on labelled source images; returns a frozen branch."""
    model = build(config, seed, role="target")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    targets = one_hot(data.labels, config.num_classes)
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start:start + batch_size])
            probs = softmax_channels(forward(model, data.images[idx], "train"))
            loss = cross_entropy_soft(probs, targets[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"source training diverged at epoch {epoch}", {"epoch": epoch, "batch_start": start})
            backward(loss)
            adam_step(model.parameters, lr=lr)
            losses.append(loss.item())
        log.info("source epoch %d loss %.5f", epoch, float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, model, float(np.mean(losses)))
    model.role = "source"
    model.trainable = False
    return model
