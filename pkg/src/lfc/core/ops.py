"""Differentiable layers on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, DegenerateInputError
from .tensor import DTYPE, Parameter, Tensor, as_tensor, make_node

LOG_EPS = 1e-8


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Channel-major patch matrix of shape (c*k*k, n*oh*ow)."""
    n, c, hp, wp = xp.shape
    oh, ow = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = np.empty((c, k, k, n, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * oh * ow), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, lowered to one matrix product (im2col)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in or kh != kw:
        raise ConfigurationError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(f"kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")

    xp = _pad(x.data, padding)
    cols, oh, ow = _im2col(xp, k, stride)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, n * oh * ow)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # input gradient of a stride-1 correlation is a full correlation with the flipped kernel
            gc, _, _ = _im2col(_pad(g, k - 1 - padding), k, 1)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wflip @ gc).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, bw)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer.

    ``mode`` is one of ``train``, ``eval`` or ``recalibrate``. Recalibration
    accumulates an exact (equal-weight) mean of the pixel statistics over all
    batches seen since :meth:`begin_recalibration`.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"
    _acc_count: int = field(default=0, repr=False)
    _acc_sum: np.ndarray | None = field(default=None, repr=False)
    _acc_sumsq: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, channels: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.1) -> BatchNormState:
        return cls(
            gamma=Parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def begin_recalibration(self) -> None:
        self._acc_count = 0
        self._acc_sum = np.zeros(self.channels, dtype=DTYPE)
        self._acc_sumsq = np.zeros(self.channels, dtype=DTYPE)

    def _accumulate(self, x: np.ndarray) -> None:
        if self._acc_sum is None:
            self.begin_recalibration()
        self._acc_count += x.shape[0] * x.shape[2] * x.shape[3]
        self._acc_sum += x.sum(axis=(0, 2, 3))
        self._acc_sumsq += np.einsum("nchw,nchw->c", x, x)
        mean = self._acc_sum / self._acc_count
        var = np.maximum(self._acc_sumsq / self._acc_count - mean * mean, 0.0)
        self.running_mean = mean
        self.running_var = np.maximum(var, np.finfo(DTYPE).tiny)


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ConfigurationError(f"batchnorm input {x.shape} does not match {state.channels} channels")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise DegenerateInputError("batchnorm received zero batch pixels")
    gamma, beta = state.gamma, state.beta
    shape = (1, -1, 1, 1)

    if state.mode == "recalibrate":
        state._accumulate(x.data)
    elif state.mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv.reshape(shape)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def bw(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(shape)
                gx = (inv.reshape(shape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3)).reshape(shape)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                )
            return gx, gg, gb

        return make_node(out, (x, gamma, beta), bw)
    elif state.mode != "eval":
        raise ConfigurationError(f"unknown batchnorm mode {state.mode!r}")

    # eval / recalibrate: fixed affine map from running statistics
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    scale = gamma.data * inv
    shift = beta.data - state.running_mean * scale
    mean = state.running_mean
    out = x.data * scale.reshape(shape) + shift.reshape(shape)

    def bw_eval(g):
        gx = g * scale.reshape(shape)
        xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_node(out, (x, gamma, beta), bw_eval)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), bw)


def max_pool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2x2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return make_node(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 with max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ConfigurationError(f"softmax_channels needs (n, c>=2, h, w), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (logits,), bw)


def _mask_array(pixel_mask, like: np.ndarray) -> np.ndarray:
    if pixel_mask is None:
        return np.ones((like.shape[0], 1) + like.shape[2:], dtype=DTYPE)
    m = np.asarray(pixel_mask.data if isinstance(pixel_mask, Tensor) else pixel_mask, dtype=DTYPE)
    if m.ndim == 3:
        m = m[:, None]
    if m.shape[0] != like.shape[0] or m.shape[2:] != like.shape[2:] or m.shape[1] not in (1, like.shape[1]):
        raise ConfigurationError(f"pixel mask {m.shape} incompatible with prediction {like.shape}")
    return m[:, :1]


def cross_entropy_soft(pred_prob: Tensor, target_prob, pixel_mask=None, per_sample: bool = False) -> Tensor:
    """Masked mean of -sum_c target * ln(max(pred, 1e-8)).

    With ``per_sample=True`` the mean is taken per batch element and a tensor
    of shape ``(n,)`` is returned; otherwise a scalar over all masked pixels.
    """
    pred_prob = as_tensor(pred_prob)
    t = np.asarray(target_prob.data if isinstance(target_prob, Tensor) else target_prob, dtype=DTYPE)
    if t.shape != pred_prob.shape:
        raise ConfigurationError(f"target {t.shape} and prediction {pred_prob.shape} differ")
    m = _mask_array(pixel_mask, pred_prob.data)
    p = pred_prob.data
    clamped = np.maximum(p, LOG_EPS)
    pix = -(t * np.log(clamped)).sum(axis=1, keepdims=True) * m
    if per_sample:
        counts = m.sum(axis=(1, 2, 3))
        if np.any(counts == 0):
            raise DegenerateInputError("cross_entropy_soft: a sample has an empty pixel mask")
        out = pix.sum(axis=(1, 2, 3)) / counts
        denom = counts.reshape(-1, 1, 1, 1)
    else:
        count = m.sum()
        if count == 0:
            raise DegenerateInputError("cross_entropy_soft: empty pixel mask")
        out = np.asarray(pix.sum() / count)
        denom = count

    def bw(g):
        gg = np.asarray(g).reshape(-1, 1, 1, 1) if per_sample else g
        gp = -(t / clamped) * (p > LOG_EPS) * m * (gg / denom)
        return (gp,)

    return make_node(out, (pred_prob,), bw)
