"""Search configuration shared by network construction, search and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

DEFAULT_OPS = ("dwsep3", "dwsep5", "dwsep7", "conv3", "conv5", "conv7")


class ConfigError(ValueError):
    """Raised when a configuration cannot describe a buildable search."""


@dataclass
class SearchConfig:
    seed: int = 0
    M: int = 3
    N: int = 4
    K: int = 4
    C0: int = 16
    op_set: tuple = DEFAULT_OPS
    classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    batch_size: int = 64
    total_steps: int = 1000
    lr_w: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 5.0  # global L2 norm over w and gamma grads; 0 disables
    lr_alpha: float = 0.006
    val_size: int = 5000
    augment: bool = False
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})

    def __post_init__(self):
        self.op_set = tuple(self.op_set)

    def validate(self) -> "SearchConfig":
        from .supergraph import parse_op

        for name in ("M", "N", "K", "C0", "classes", "in_channels", "image_size", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.total_steps < 0 or self.val_size < 0:
            raise ConfigError("total_steps and val_size must be non-negative")
        if not self.op_set:
            raise ConfigError("op_set must contain at least one operation")
        for op in self.op_set:
            parse_op(op)
        for d in range(self.M + 1):
            ch = self.C0 * 2**d
            if ch % self.K:
                raise ConfigError(f"K={self.K} does not divide the channel count {ch} (C0={self.C0}, stage {d})")
        if self.image_size < 2**self.M:
            raise ConfigError(f"image_size={self.image_size} underflows after M={self.M} halvings")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["op_set"] = list(self.op_set)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SearchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)
