"""Invertible spatial augmentations: flips and sub-window crops.

A crop is inverted by pasting the window back at its origin; pixels outside
the window have no prediction, which the returned validity mask records.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

KINDS = ("hflip", "vflip", "crop")
CROP_FRACTION = 0.75


@dataclass(frozen=True)
class TransformOp:
    kind: str
    height: int
    width: int
    top: int = 0
    left: int = 0
    crop_h: int = 0
    crop_w: int = 0

    def __post_init__(self):
        if self.kind not in KINDS + ("identity",):
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        if self.kind == "crop":
            if self.crop_h < 1 or self.crop_w < 1:
                raise ConfigurationError(f"empty crop window {self}")
            if self.top < 0 or self.left < 0 or self.top + self.crop_h > self.height or self.left + self.crop_w > self.width:
                raise ConfigurationError(f"crop window out of bounds for {self.height}x{self.width}: {self}")


def crop_size(n: int, multiple: int) -> int:
    """75% of ``n`` rounded down to a multiple of ``multiple`` (at least one multiple)."""
    return max(multiple, (int(n * CROP_FRACTION) // multiple) * multiple)


def sample_transform(rng: np.random.Generator, height: int = 64, width: int = 64, multiple: int = 8) -> TransformOp:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind != "crop":
        return TransformOp(kind, height, width)
    ch, cw = crop_size(height, multiple), crop_size(width, multiple)
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    return TransformOp("crop", height, width, top, left, ch, cw)


def _check_size(T: TransformOp, x: np.ndarray) -> None:
    if x.shape[-2:] != (T.height, T.width):
        raise ConfigurationError(f"transform built for {T.height}x{T.width}, got input {x.shape}")


def apply(T: TransformOp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    _check_size(T, x)
    if T.kind == "hflip":
        return x[..., :, ::-1].copy()
    if T.kind == "vflip":
        return x[..., ::-1, :].copy()
    if T.kind == "crop":
        return x[..., T.top:T.top + T.crop_h, T.left:T.left + T.crop_w].copy()
    return x.copy()


def invert(T: TransformOp, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map ``y`` back to the original frame; returns (values, validity mask).

    The mask has shape ``y.shape[:-3] + (1, H, W)`` for rank >= 3 input.
    """
    y = np.asarray(y)
    lead = y.shape[:-3] + (1,) if y.ndim >= 3 else ()
    if T.kind == "crop":
        if y.shape[-2:] != (T.crop_h, T.crop_w):
            raise ConfigurationError(f"expected a {T.crop_h}x{T.crop_w} window, got {y.shape}")
        out = np.zeros(y.shape[:-2] + (T.height, T.width), dtype=y.dtype)
        out[..., T.top:T.top + T.crop_h, T.left:T.left + T.crop_w] = y
        mask = np.zeros(lead + (T.height, T.width))
        mask[..., T.top:T.top + T.crop_h, T.left:T.left + T.crop_w] = 1.0
        return out, mask
    _check_size(T, y)
    mask = np.ones(lead + (T.height, T.width))
    if T.kind == "hflip":
        return y[..., :, ::-1].copy(), mask
    if T.kind == "vflip":
        return y[..., ::-1, :].copy(), mask
    return y.copy(), mask
