"""Synthetic fundus-like disc/cup benchmark with two photometric domains.

Every sample draws its geometry from a generator seeded by
``(split_seed, sample_id)``, so a sample does not depend on how many others
are generated alongside it. Labels are rendered from the clean geometry;
the image then goes through gamma, noise, box blur and vignetting.
"""

from __future__ import annotations

import os
import re
import shutil
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MalformedHeaderError, SizeMismatchError, WrongMaxvalError

SIZE = 64
BACKGROUND, DISC, CUP = 0, 1, 2
SPLIT_ID_OFFSET = {("source", "train"): 0, ("target", "train"): 100_000, ("target", "test"): 200_000}
DEFAULT_SIZES = {"source_train": 400, "target_train": 99, "target_test": 60}


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background_level: float
    disc_level: float
    cup_level: float
    contrast_gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0
    vignette_strength: float = 0.0

    def __post_init__(self):
        for lvl in ("background_level", "disc_level", "cup_level"):
            if not 0.0 <= getattr(self, lvl) <= 1.0:
                raise ConfigurationError(f"{lvl} must lie in [0, 1]")
        if self.contrast_gamma <= 0 or self.noise_sigma < 0 or self.blur_radius < 0 or self.vignette_strength < 0:
            raise ConfigurationError(f"invalid photometric parameters in {self}")

    def photometric(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "name")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> DomainSpec:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"bad domain spec line {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown domain spec keys {sorted(unknown)}")
        try:
            typed = {k: (v if k == "name" else int(v) if k == "blur_radius" else float(v)) for k, v in kv.items()}
            return cls(**typed)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid domain spec: {exc}") from exc


# Frozen after calibration: a source model reaching about 0.99 validation Dice
# scores about 0.59 mean Dice on target test images with this pair.
SOURCE_SPEC = DomainSpec(
    name="source",
    background_level=0.25,
    disc_level=0.6,
    cup_level=0.85,
    contrast_gamma=1.0,
    noise_sigma=0.03,
    blur_radius=0,
    vignette_strength=0.1,
)
TARGET_SPEC = DomainSpec(
    name="target",
    background_level=0.45,
    disc_level=0.65,
    cup_level=0.8,
    contrast_gamma=1.6,
    noise_sigma=0.06,
    blur_radius=1,
    vignette_strength=0.4,
)


@dataclass
class Sample:
    image: np.ndarray  # (h, w) float64 in [0, 1]
    label: np.ndarray  # (h, w) uint8 in {0, 1, 2}
    sample_id: int


@dataclass
class Dataset:
    """A stack of samples ready for the network: images are (n, 1, h, w)."""

    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> Dataset:
        return cls(
            ids=np.array([s.sample_id for s in samples], dtype=np.int64),
            images=np.stack([s.image for s in samples])[:, None].astype(np.float64),
            labels=np.stack([s.label for s in samples]).astype(np.int64),
        )

    def subset(self, index) -> Dataset:
        return Dataset(self.ids[index], self.images[index], None if self.labels is None else self.labels[index])


def _sample_rng(split_seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([split_seed, sample_id]))


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _box_blur(img: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return img
    k = 2 * r + 1
    p = np.pad(img, r, mode="reflect")
    c = np.cumsum(np.cumsum(np.pad(p, ((1, 0), (1, 0))), axis=0), axis=1)
    return (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]) / (k * k)


def render_geometry(rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """Label map of a randomly placed disc with a nested cup."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 64.0
    cy, cx = rng.uniform(24, 40, size=2) * s
    r_disc = rng.uniform(10, 16) * s
    ecc = rng.uniform(0.8, 1.2)
    theta = rng.uniform(0, np.pi)
    ratio = rng.uniform(0.35, 0.65)
    off = rng.uniform(-0.15, 0.15, size=2) * r_disc
    ry, rx = r_disc * ecc, r_disc / ecc
    disc = _ellipse(yy, xx, cy, cx, ry, rx, theta)
    cup = _ellipse(yy, xx, cy + off[0], cx + off[1], ry * ratio, rx * ratio, theta) & disc
    label = np.zeros((size, size), dtype=np.uint8)
    label[disc] = DISC
    label[cup] = CUP
    return label


def render_image(label: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    levels = np.array([spec.background_level, spec.disc_level, spec.cup_level])
    img = levels[label]
    img = img ** spec.contrast_gamma
    if spec.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, spec.noise_sigma, size=img.shape), 0.0, 1.0)
    img = _box_blur(img, spec.blur_radius)
    if spec.vignette_strength > 0:
        h, w = img.shape
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (((h - 1) / 2) ** 2 + ((w - 1) / 2) ** 2)
        img = img * np.clip(1.0 - spec.vignette_strength * r2, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def generate(spec: DomainSpec, n: int, split_seed: int, id_offset: int = 0) -> list[Sample]:
    if n < 1:
        raise ConfigurationError(f"need n >= 1 samples, got {n}")
    out = []
    for sid in range(id_offset, id_offset + n):
        rng = _sample_rng(split_seed, sid)
        label = render_geometry(rng)
        out.append(Sample(image=render_image(label, spec, rng), label=label, sample_id=sid))
    return out


# ---------------------------------------------------------------- PGM I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(data: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise MalformedHeaderError("PGM header ends early")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise MalformedHeaderError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric PGM header field: {exc}") from exc
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after PGM maxval")
    return w, h, maxval, pos + 1


def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    h, w = array.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_pgm(path, expect_maxval: int) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, start = _parse_header(data)
    if maxval != expect_maxval:
        raise WrongMaxvalError(f"{path}: maxval {maxval}, expected {expect_maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    if len(data) - start != nbytes:
        raise SizeMismatchError(f"{path}: payload is {len(data) - start} bytes, header implies {nbytes}")
    return np.frombuffer(data, dtype=dtype, offset=start).reshape(h, w)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def image_path(directory, sample_id: int) -> Path:
    return Path(directory) / f"img_{sample_id:06d}.pgm"


def label_path(directory, sample_id: int) -> Path:
    return Path(directory) / f"lbl_{sample_id:06d}.pgm"


def write_sample(s: Sample, directory) -> tuple[Path, Path]:
    os.makedirs(directory, exist_ok=True)
    ip, lp = image_path(directory, s.sample_id), label_path(directory, s.sample_id)
    write_pgm(ip, quantize(s.image), 65535)
    write_pgm(lp, s.label.astype(np.uint8), 255)
    return ip, lp


def read_sample(directory, sample_id: int) -> Sample:
    img = read_pgm(image_path(directory, sample_id), 65535).astype(np.float64) / 65535.0
    lbl = read_pgm(label_path(directory, sample_id), 255).astype(np.uint8)
    if img.shape != lbl.shape:
        raise SizeMismatchError(f"image {img.shape} and label {lbl.shape} of sample {sample_id} differ")
    return Sample(image=img, label=lbl, sample_id=sample_id)


# ---------------------------------------------------------------- manifests / benchmark


def write_manifest(split_dir, spec: DomainSpec, split: str, seed: int, entries: list[tuple[int, Path, Path]]) -> Path:
    split_dir = Path(split_dir)
    lines = [f"domain={spec.name}", f"split={split}", f"seed={seed}", f"count={len(entries)}"]
    lines += [f"spec.{line}" for line in spec.to_text().splitlines()]
    for sid, ip, lp in entries:
        lines.append(f"{sid}\t{Path(ip).relative_to(split_dir)}\t{Path(lp).relative_to(split_dir)}")
    path = split_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> tuple[dict[str, str], list[tuple[int, Path, Path]]]:
    path = Path(path)
    header: dict[str, str] = {}
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if "\t" in line:
            sid, ip, lp = line.split("\t")
            entries.append((int(sid), path.parent / ip, path.parent / lp))
        else:
            k, v = line.split("=", 1)
            header[k] = v
    if int(header.get("count", -1)) != len(entries):
        raise ConfigurationError(f"{path}: header count {header.get('count')} but {len(entries)} entries")
    return header, entries


def manifest_spec(header: dict[str, str]) -> DomainSpec:
    text = "".join(f"{k[5:]}={v}\n" for k, v in header.items() if k.startswith("spec."))
    return DomainSpec.from_text(text)


def load_split(root, domain: str, split: str, limit: int | None = None) -> Dataset:
    split_dir = Path(root) / domain / split
    _, entries = read_manifest(split_dir / "manifest.txt")
    if limit is not None:
        entries = entries[:limit]
    samples = []
    for sid, ip, lp in entries:
        if not ip.exists() or not lp.exists():
            raise FileNotFoundError(f"manifest entry {sid} points to missing files")
        img = read_pgm(ip, 65535).astype(np.float64) / 65535.0
        lbl = read_pgm(lp, 255).astype(np.uint8)
        samples.append(Sample(img, lbl, sid))
    return Dataset.from_samples(samples)


def benchmark(out_dir, source_spec: DomainSpec = SOURCE_SPEC, target_spec: DomainSpec = TARGET_SPEC,
              sizes: dict[str, int] | None = None, seed: int = 0, force: bool = False) -> dict[str, Path]:
    """Write source/train, target/train and target/test splits with manifests."""
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    if any(v < 1 for v in sizes.values()):
        raise ConfigurationError(f"all split sizes must be >= 1, got {sizes}")
    if source_spec.photometric() == target_spec.photometric():
        raise ConfigurationError("source and target specs are photometrically identical: no domain shift")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out_dir} is not empty")
        shutil.rmtree(out_dir)
    plan = [
        ("source", "train", source_spec, sizes["source_train"]),
        ("target", "train", target_spec, sizes["target_train"]),
        ("target", "test", target_spec, sizes["target_test"]),
    ]
    manifests = {}
    for domain, split, spec, n in plan:
        split_dir = out_dir / domain / split
        split_dir.mkdir(parents=True, exist_ok=True)
        samples = generate(spec, n, seed, id_offset=SPLIT_ID_OFFSET[(domain, split)])
        entries = [(s.sample_id, *write_sample(s, split_dir)) for s in samples]
        manifests[f"{domain}_{split}"] = write_manifest(split_dir, spec, split, seed, entries)
    return manifests
