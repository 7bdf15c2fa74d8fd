"""Compact U-Net used for the source, target and momentum branches.

Each resolution level is two (3x3 conv, batch norm, ReLU) stages; the
encoder halves resolution with 2x2 max pooling, the decoder doubles it with
nearest-neighbour upsampling followed by skip concatenation, and a 1x1 conv
maps to class logits.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    max_pool2x2,
    no_grad,
    relu,
    upsample_nearest2x,
)
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigurationError,
    DegenerateInputError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

ROLES = ("source", "target", "momentum")
MAGIC = b"LFC1"


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1:
            raise ConfigurationError(f"invalid network config {self}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")

    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ConfigurationError(f"expected images of shape (n, {self.in_channels}, h, w), got {shape}")
        q = 2 ** self.depth
        if shape[2] % q or shape[3] % q:
            raise ConfigurationError(f"spatial dims {shape[2:]} must be divisible by 2**depth = {q}")

    def conv_shapes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        """Ordered (name, weight shape) of every 3x3 conv; each is followed by a BN."""
        w = self.base_width
        shapes = []
        c_in = self.in_channels
        for lvl in range(self.depth):
            c = w * 2 ** lvl
            shapes += [(f"enc{lvl}.conv1", (c, c_in, 3, 3)), (f"enc{lvl}.conv2", (c, c, 3, 3))]
            c_in = c
        c = w * 2 ** self.depth
        shapes += [("mid.conv1", (c, c_in, 3, 3)), ("mid.conv2", (c, c, 3, 3))]
        for lvl in reversed(range(self.depth)):
            c_skip = w * 2 ** lvl
            shapes += [(f"dec{lvl}.conv1", (c_skip, c + c_skip, 3, 3)), (f"dec{lvl}.conv2", (c_skip, c_skip, 3, 3))]
            c = c_skip
        return shapes


class ModelBranch:
    """One network of the source/target/momentum triplet."""

    def __init__(self, config: SegNetConfig, params: dict[str, Parameter], bns: dict[str, BatchNormState], role: str = "target"):
        if role not in ROLES:
            raise ConfigurationError(f"unknown branch role {role!r}")
        self.config = config
        self.params = params
        self.bns = bns
        self.role = role
        self.trainable = role == "target"

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        for p in self.parameters:
            p.trainable = self._trainable

    @property
    def parameters(self) -> list[Parameter]:
        """Every trainable-capable tensor: conv weights, head bias, BN affine."""
        out = list(self.params.values())
        for bn in self.bns.values():
            out += [bn.gamma, bn.beta]
        return out

    @property
    def bn_states(self) -> list[BatchNormState]:
        return list(self.bns.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named views of every numeric array (parameters then BN statistics)."""
        out = {name: p.data for name, p in self.params.items()}
        for name, bn in self.bns.items():
            out[f"{name}.gamma"] = bn.gamma.data
            out[f"{name}.beta"] = bn.beta.data
        for name, bn in self.bns.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def copy(self, role: str | None = None) -> ModelBranch:
        """Deep copy of values and statistics with fresh optimizer state."""
        params = {k: Parameter(p.data, name=p.name) for k, p in self.params.items()}
        bns = {}
        for k, bn in self.bns.items():
            new = BatchNormState.create(bn.channels, name=k, eps=bn.eps, momentum=bn.momentum)
            new.gamma.data[...] = bn.gamma.data
            new.beta.data[...] = bn.beta.data
            new.running_mean = bn.running_mean.copy()
            new.running_var = bn.running_var.copy()
            bns[k] = new
        return ModelBranch(self.config, params, bns, role=role or self.role)

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def __call__(self, images, bn_mode: str = "eval") -> Tensor:
        return forward(self, images, bn_mode)


def build(config: SegNetConfig, seed: int, role: str = "target") -> ModelBranch:
    """He-normal initialisation; deterministic in (config, seed)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    bns: dict[str, BatchNormState] = {}
    for name, shape in config.conv_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        params[f"{name}.weight"] = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), name=f"{name}.weight")
        bns[f"{name}.bn"] = BatchNormState.create(shape[0], name=f"{name}.bn")
    w = config.base_width
    params["head.weight"] = Parameter(rng.normal(0.0, np.sqrt(2.0 / w), size=(config.num_classes, w, 1, 1)), name="head.weight")
    params["head.bias"] = Parameter(np.zeros(config.num_classes), name="head.bias")
    return ModelBranch(config, params, bns, role=role)


def _stage(branch: ModelBranch, x: Tensor, name: str) -> Tensor:
    x = conv2d(x, branch.params[f"{name}.weight"], None, stride=1, padding=1)
    return relu(batchnorm(x, branch.bns[f"{name}.bn"]))


def forward(branch: ModelBranch, images, bn_mode: str = "eval") -> Tensor:
    """Logits of shape (n, num_classes, h, w).

    Source and momentum branches always run with frozen statistics and without
    recording a trace.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    cfg = branch.config
    cfg.check_input(images.shape)
    if branch.role != "target":
        bn_mode = "eval"
    if bn_mode not in ("train", "eval", "recalibrate"):
        raise ConfigurationError(f"unknown bn_mode {bn_mode!r}")
    for bn in branch.bns.values():
        bn.mode = bn_mode
    if branch.role != "target":
        with no_grad():
            return _unet(branch, images)
    return _unet(branch, images)


def _unet(branch: ModelBranch, x: Tensor) -> Tensor:
    depth = branch.config.depth
    skips = []
    for lvl in range(depth):
        x = _stage(branch, x, f"enc{lvl}.conv1")
        x = _stage(branch, x, f"enc{lvl}.conv2")
        skips.append(x)
        x = max_pool2x2(x)
    x = _stage(branch, x, "mid.conv1")
    x = _stage(branch, x, "mid.conv2")
    for lvl in reversed(range(depth)):
        x = concat_channels(upsample_nearest2x(x), skips[lvl])
        x = _stage(branch, x, f"dec{lvl}.conv1")
        x = _stage(branch, x, f"dec{lvl}.conv2")
    return conv2d(x, branch.params["head.weight"], branch.params["head.bias"])


def iter_batches(images: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(images), batch_size):
        yield images[start:start + batch_size]


def predict_logits(branch: ModelBranch, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode logits for a whole image stack, without a trace."""
    with no_grad():
        return np.concatenate([forward(branch, b, "eval").data for b in iter_batches(images, batch_size)])


def adabn_init(source: ModelBranch, target_images: Iterable[np.ndarray] | np.ndarray, batch_size: int = 8) -> ModelBranch:
    """Trainable copy of ``source`` with BN statistics re-estimated on target data.

    One pass over the target set in ``recalibrate`` mode; running statistics
    become the exact mean / (biased) variance of each BN input over every
    pixel of every image seen.
    """
    target = source.copy(role="target")
    if isinstance(target_images, np.ndarray):
        batches = list(iter_batches(target_images, batch_size))
    else:
        batches = [np.asarray(b) for b in target_images]
    if not batches or sum(len(b) for b in batches) == 0:
        raise DegenerateInputError("adabn_init needs a non-empty target set")
    for bn in target.bns.values():
        bn.begin_recalibration()
    with no_grad():
        for b in batches:
            if len(b):
                forward(target, b, "recalibrate")
    for bn in target.bns.values():
        bn.mode = "eval"
    return target


def clone_into_momentum(target: ModelBranch) -> ModelBranch:
    return target.copy(role="momentum")


# ---------------------------------------------------------------- checkpoint I/O


def _config_block(branch: ModelBranch) -> bytes:
    fields = dict(asdict(branch.config), role=branch.role)
    bn = next(iter(branch.bns.values()))
    fields.update(bn_eps=repr(bn.eps), bn_momentum=repr(bn.momentum))
    return "".join(f"{k}={v}\n" for k, v in fields.items()).encode()


def to_bytes(branch: ModelBranch) -> bytes:
    buf = io.BytesIO()
    cfg = _config_block(branch)
    arrays = branch.state_arrays()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save(branch: ModelBranch, path) -> None:
    Path(path).write_bytes(to_bytes(branch))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> ModelBranch:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {data[:4]!r}")
    r.pos = 4
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        fields = dict(line.split("=", 1) for line in r.take(cfg_len, "config").decode().splitlines() if line)
        config = SegNetConfig(
            in_channels=int(fields["in_channels"]),
            num_classes=int(fields["num_classes"]),
            base_width=int(fields["base_width"]),
            depth=int(fields["depth"]),
        )
        role = fields["role"]
        eps, momentum = float(fields["bn_eps"]), float(fields["bn_momentum"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed config block: {exc}") from exc

    branch = build(config, seed=0, role=role)
    for bn in branch.bns.values():
        bn.eps, bn.momentum = eps, momentum
    template = branch.state_arrays()
    (count,) = r.unpack("<I", "array count")
    if count != len(template):
        raise ShapeMismatchError(f"checkpoint holds {count} arrays, architecture needs {len(template)}")
    loaded = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "array name").decode()
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        if name not in template:
            raise ShapeMismatchError(f"unexpected array {name!r} in checkpoint")
        if tuple(shape) != template[name].shape:
            raise ShapeMismatchError(f"shape mismatch for {name}: header {tuple(shape)}, architecture {template[name].shape}")
        n = int(np.prod(shape))
        loaded[name] = np.frombuffer(r.take(8 * n, f"{name} payload"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise ShapeMismatchError(f"{len(data) - r.pos} trailing bytes after last array")

    for name, p in branch.params.items():
        p.data[...] = loaded[name]
    for name, bn in branch.bns.items():
        bn.gamma.data[...] = loaded[f"{name}.gamma"]
        bn.beta.data[...] = loaded[f"{name}.beta"]
        bn.running_mean = loaded[f"{name}.running_mean"].copy()
        bn.running_var = loaded[f"{name}.running_var"].copy()
    return branch


def load(path) -> ModelBranch:
    return from_bytes(Path(path).read_bytes())


def assert_same_architecture(a: ModelBranch, b: ModelBranch) -> None:
    if a.config != b.config:
        raise ConfigurationError(f"architecture mismatch: {a.config} vs {b.config}")
