"""Training configuration and its ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Unknown keys are an error so a
typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .segnet import ArchConfig


@dataclass(frozen=True)
class TrainConfig:
    # data / architecture
    size: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    latent: int = 128
    squeeze: int = 8
    df_scale: float = 16.0
    grid: str = "2x2"
    # schedule
    seg_epochs: int = 30
    reg_epochs: int = 30
    batch_size: int = 4
    lr_seg: float = 2e-3
    lr_reg: float = 1e-3
    lr_seg_phase2: float = 2e-4
    lr_step: int = 40
    lr_gamma: float = 0.1
    warmup_steps: int = 50
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    # losses
    lam1: float = 0.03
    lam2: float = 1.0
    # run
    seed: int = 0
    dtype: str = "float32"
    threshold: float = 0.5
    seg_decoder: bool = True
    cache_atlas: bool = False

    def __post_init__(self):
        for name in ("seg_epochs", "reg_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for name in ("lr_seg", "lr_reg", "lr_seg_phase2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(self.size, tuple(self.channels), self.latent, self.squeeze, self.df_scale)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        return cls().with_overrides(**dict(d))


# Full-resolution settings (224 px, M=9); not exercised by tests.
PAPER_SCALE = TrainConfig(
    size=224,
    channels=(16, 32, 64),
    latent=1024,
    grid="3x3",
    seg_epochs=60,
    reg_epochs=60,
    batch_size=6,
    lr_seg=1e-5,
    lr_seg_phase2=1e-5,
    lr_reg=1e-4,
)


def _coerce(key: str, value):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if key not in types:
        raise KeyError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    t = types[key]
    value = value.strip()
    if t == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t.startswith("tuple"):
        return tuple(int(x) for x in value.split(","))
    return value


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    return (base or TrainConfig()).with_overrides(**kv)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
