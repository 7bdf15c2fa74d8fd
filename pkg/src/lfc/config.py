"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError


@dataclass(frozen=True)
class RunConfig:
    # adaptation
    seed: int = 0
    epochs: int = 10
    batch_size: int = 2
    lr: float = 0.001
    tau: float = 0.99
    r_max: int = 5
    delta: float = 1.5
    ablation: str = "full"
    bn_mode: str = "train"
    adabn_batch_size: int = 8
    # source training
    source_seed: int = 1
    source_epochs: int = 6
    source_batch_size: int = 8
    source_lr: float = 0.001
    val_fraction: float = 0.1
    # network
    base_width: int = 8
    depth: int = 3
    # paths
    data: str = ""
    source_model: str = ""
    out: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> RunConfig:
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"{origin}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigurationError(f"{origin}:{lineno}: duplicate key {key!r}")
            values[key] = _convert(key, value, types[key], f"{origin}:{lineno}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        return cls.parse(path.read_text(), str(path))

    def with_overrides(self, **kwargs) -> RunConfig:
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in self.keys())


def _convert(key: str, value: str, typ, where: str):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"{where}: bad value for {key}: {value!r}") from exc
    return value


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)
