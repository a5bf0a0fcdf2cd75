"""Run configuration: a frozen dataclass plus a flat key=value text parser.

Unspecified keys fall back to the unified defaults (same constants for
every dataset); unknown keys warn instead of failing so config files may
carry forward-compatible extras.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

from .errors import ValidationError

SOLVERS = ("svd", "newton_schulz")


@dataclass(frozen=True)
class PipelineConfig:
    tau_s: float = 0.5        # class-similarity softmax temperature
    beta: float = 10.0        # diagonal boost of the class graph
    epsilon: float = 1e-6     # confidence floor
    kappa: float = 5.0        # image-gradient edge decay
    lam: float = 1.0          # text-gate strength on edges ("lambda" in config files)
    tau: float = 1.0          # smoothness weight of the propagation solve
    grid_h: int = 80          # propagation grid (224 for Cityscapes-style inputs)
    grid_w: int = 80
    cg_iters: int = 25
    ns_iters: int = 8
    solver: str = "newton_schulz"
    use_key_key: bool = True
    zero_cls_weight: bool = True
    window: int = 224         # sliding-window crop size
    stride: int = 112
    short_side: int = 336     # 560 for Cityscapes-style inputs

    def __post_init__(self):
        _require("tau_s", self.tau_s > 0)
        _require("beta", self.beta >= 0)
        _require("epsilon", self.epsilon > 0)
        _require("kappa", self.kappa > 0)
        _require("lambda", self.lam >= 0)
        _require("tau", self.tau >= 0)
        _require("grid_h", self.grid_h >= 1)
        _require("grid_w", self.grid_w >= 1)
        _require("cg_iters", self.cg_iters >= 1)
        _require("ns_iters", self.ns_iters >= 1)
        _require("window", self.window >= 1)
        _require("stride", 1 <= self.stride <= self.window, "must be in [1, window]")
        _require("short_side", self.short_side >= 1)
        if self.solver not in SOLVERS:
            raise ValidationError(f"solver must be one of {SOLVERS}, got {self.solver!r}")


def _require(key: str, ok: bool, detail: str = "is out of range") -> None:
    if not ok:
        raise ValidationError(f"config key {key!r} {detail}")


# config-file key -> dataclass field (identity except the reserved word)
_KEY_ALIASES = {"lambda": "lam"}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def load_config(text: str) -> PipelineConfig:
    """Parse a flat key=value document (whitespace separated, # comments)."""
    field_types = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise ValidationError(f"expected key=value, got {token!r}")
            key, _, raw = token.partition("=")
            name = _KEY_ALIASES.get(key, key)
            if name not in field_types:
                warnings.warn(f"unknown config key {key!r} ignored", stacklevel=2)
                continue
            values[name] = _coerce(key, name, raw)
    return PipelineConfig(**values)


def _coerce(key: str, name: str, raw: str):
    kind = {f.name: f.type for f in fields(PipelineConfig)}[name]
    if kind == "bool":
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise ValidationError(f"config key {key!r} expects a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    if kind == "int":
        try:
            return int(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key!r} expects an integer, got {raw!r}") from exc
    if kind == "float":
        try:
            return float(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key!r} expects a number, got {raw!r}") from exc
    return raw


def dump_config(config: PipelineConfig) -> str:
    """Inverse of load_config, one key per line."""
    lines = []
    for f in fields(PipelineConfig):
        key = "lambda" if f.name == "lam" else f.name
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
