"""Training configuration and the JSON run-config schema."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 16
    channels: int = 1
    patch: int = 4
    hidden: int = 48
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    value_dim: int = 32
    key_dim: int = 64
    classes: int = 4

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def validate(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")


# ViT-T/16 backbone, 128-d memory tokens, ViT-B/16 key width
FULL_DIMS = ModelDims(image_size=224, channels=3, patch=16, hidden=192, depth=12, heads=3,
                       value_dim=128, key_dim=768, classes=10)


@dataclass(frozen=True)
class TrainConfig:
    p_i: float = 0.1  # P(image pathway nulled)
    p_t: float = 0.1  # P(token pathway nulled)
    p_r: float = 0.2  # P(retrieval branch)
    k_min: int = 2
    k_max: int = 16
    tau: float = 0.07
    k_infer: int = 4
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.05
    eps: float = 1e-8
    seed: int = 0
    probe_size: int = 256
    dims: ModelDims = field(default_factory=ModelDims)

    def validate(self) -> "TrainConfig":
        for name in ("p_i", "p_t"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name}={v} must lie in [0, 1)")
        if self.p_i + self.p_t > 1.0:
            raise ConfigError(f"p_i + p_t = {self.p_i + self.p_t} exceeds 1")
        if not 0.0 <= self.p_r <= 1.0:
            raise ConfigError(f"p_r={self.p_r} must lie in [0, 1]")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ConfigError(f"empty neighbour range {{{self.k_min}..{self.k_max}}}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.k_infer < 1:
            raise ConfigError("k_infer must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        self.dims.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        dims = d.pop("dims", {}) or {}
        _reject_unknown(d, cls, "train config")
        _reject_unknown(dims, ModelDims, "dims")
        return cls(dims=ModelDims(**dims), **d).validate()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _reject_unknown(d: dict, klass, where: str):
    known = {f.name for f in dataclasses.fields(klass)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown {where} keys: {', '.join(extra)}")


RUN_KEYS = {"train", "dataset", "data_dir", "forget_rate", "stratified", "strategy", "k",
            "epoch_log", "forget_ids_out"}


def load_run_config(path) -> dict:
    """Parse a run-config JSON file.

    Top-level keys: ``train`` (TrainConfig fields), either ``dataset``
    (synthetic spec) or ``data_dir``, plus optional ``forget_rate``,
    ``stratified``, ``strategy``, ``k``, ``epoch_log``, ``forget_ids_out``.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    extra = sorted(set(raw) - RUN_KEYS)
    if extra:
        raise ConfigError(f"unknown run config keys: {', '.join(extra)}")
    out = {
        "train": TrainConfig.from_dict(raw.get("train", {})),
        "dataset": raw.get("dataset"),
        "data_dir": raw.get("data_dir"),
        "forget_rate": float(raw.get("forget_rate", 0.1)),
        "stratified": bool(raw.get("stratified", True)),
        "strategy": raw.get("strategy", "ensemble"),
        "k": int(raw.get("k", 4)),
        "epoch_log": raw.get("epoch_log"),
        "forget_ids_out": raw.get("forget_ids_out"),
    }
    if out["dataset"] is None and out["data_dir"] is None:
        out["dataset"] = {}
    return out
