"""Plain-text key/value configuration.

Schema: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines are ignored.  Nested dataclass fields use dotted keys
(``model.backbone.widths = 48, 96, 192, 384``).  Tuples are comma
separated; booleans are ``true``/``false``.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..eg_loss import LossConfig
from ..shift_mlp import BackboneConfig
from ..sparse_fpn import FpnConfig


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn: FpnConfig = field(default_factory=FpnConfig)
    image_size: int = 64
    roi_res: int = 7
    coarse_hidden: int = 64
    point_hidden: int = 64
    train_points: int = 64
    oversample: float = 3.0
    importance_frac: float = 0.75
    infer_points: int = 16
    contour_points: int = 32
    level0: int = 3
    negatives_per_image: int = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.1
    milestone_frac: float = 2.0 / 3.0
    batch_size: int = 2
    steps: int = 1000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.milestone < self.steps or self.steps < 2:
            raise ValueError(f"milestone {self.milestone} must lie strictly inside (0, {self.steps})")

    @property
    def milestone(self) -> int:
        return int(round(self.steps * self.milestone_frac))

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.milestone else self.lr * self.lr_decay


def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigFileError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in text.split(",") if v.strip())
    return type(default)(text)


def parse_kv(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build(cls, values: dict, prefix: str = ""):
    """Instantiate dataclass ``cls`` from dotted-key strings, recursing into fields."""
    base = cls()
    kwargs = {}
    known = set()
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = getattr(base, f.name)
        if dataclasses.is_dataclass(default):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            known |= sub.keys()
            kwargs[f.name] = build(type(default), sub, key + ".")
        elif key in values:
            known.add(key)
            try:
                kwargs[f.name] = _coerce(values[key], default)
            except ValueError as exc:
                raise ConfigFileError(f"{key}: {exc}") from None
    unknown = set(values) - known
    if unknown:
        raise ConfigFileError(f"unknown keys: {', '.join(sorted(unknown))}")
    return cls(**kwargs)


def load(path, cls, overrides: dict | None = None):
    values = parse_kv(Path(path).read_text())
    values.update(overrides or {})
    return build(cls, values)


def dump(obj, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            lines.append(dump(v, prefix + f.name + "."))
        elif isinstance(v, tuple):
            lines.append(f"{prefix}{f.name} = {', '.join(map(repr, v))}")
        elif isinstance(v, bool):
            lines.append(f"{prefix}{f.name} = {str(v).lower()}")
        else:
            lines.append(f"{prefix}{f.name} = {v!r}")
    return "\n".join(line for line in lines if line)
