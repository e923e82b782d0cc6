"""Nearest-neighbour inference over the current memory bank.

Three late-fusion strategies:

* ``ensemble`` - one forward pass per neighbour, logits mixed with softmax
  weights over key similarities;
* ``softmax_token`` - neighbour values mixed with the same weights, one pass;
* ``rank_token`` - values mixed with linear rank weights, one pass.

:func:`predict` evaluates each query on its own, so a prediction depends only
on the query, the parameters and the live memory.  :func:`batch_logits` is
the vectorised path for metrics; it agrees with :func:`predict` up to float
rounding but its low bits may depend on how queries are chunked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone
from .backbone import BOTH
from .errors import ConfigError
from .membank import aggregate, rank_weights, retrieve, retrieve_many, softmax_weights
from .model import MunkeyModel
from .nncore import Tensor, no_grad

STRATEGIES = ("ensemble", "softmax_token", "rank_token")
_ALIASES = {"softmax": "softmax_token", "rank": "rank_token"}


@dataclass(frozen=True)
class FusionStrategy:
    kind: str = "ensemble"
    K: int = 4
    tau: float = 0.07

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass
class Prediction:
    logits: np.ndarray
    label: int
    neighbor_ids: np.ndarray
    weights: np.ndarray
    member_logits: np.ndarray | None = None  # per-neighbour logits (ensemble only)


def neighbor_weights(sims: np.ndarray, strategy: FusionStrategy) -> np.ndarray:
    if strategy.kind == "rank_token":
        return rank_weights(len(sims))
    return softmax_weights(sims, strategy.tau)


def logits_for_values(model: MunkeyModel, image, values: np.ndarray) -> np.ndarray:
    """Forward one query image once per value row (mask (1, 1)) -> (k, C)."""
    dims = model.dims
    values = np.atleast_2d(values)
    k = len(values)
    with no_grad():
        z = backbone.embed_patches(model.params, np.asarray(image)[None], dims)
        z = Tensor(np.repeat(z.data, k, axis=0))
        ex = backbone.adapter(model.params, Tensor(values.astype(z.dtype)))
        seq = backbone.assemble_input(model.params, z, ex, BOTH)
        return backbone.forward(model.params, seq, dims).data


def argmax_first(logits: np.ndarray) -> int:
    return int(np.argmax(logits))  # np.argmax returns the first maximal index


def predict(image, model: MunkeyModel, strategy: FusionStrategy) -> Prediction:
    key = model.encoder.encode(image)
    nb = retrieve(model.memory, key, strategy.K)
    w = neighbor_weights(nb.sims, strategy)
    vals = model.memory.values[model.memory.rows(nb.ids)]
    if strategy.kind == "ensemble":
        member = logits_for_values(model, image, vals).astype(np.float64)
        logits = w @ member
    else:
        mixed = aggregate(vals, w)
        member = None
        logits = logits_for_values(model, image, mixed[None])[0].astype(np.float64)
    return Prediction(logits, argmax_first(logits), nb.ids, w, member)


def predict_batch(images, model: MunkeyModel, strategy: FusionStrategy) -> list[Prediction]:
    return [predict(img, model, strategy) for img in images]


def logits_matrix(preds) -> np.ndarray:
    return np.stack([p.logits for p in preds])


def labels_of(preds) -> np.ndarray:
    return np.array([p.label for p in preds], dtype=np.int64)


def batch_logits(images, model: MunkeyModel, strategy: FusionStrategy, chunk: int = 512) -> np.ndarray:
    """Fused logits for many queries at once, (Q, C) float64."""
    images = np.asarray(images)
    dims, mem = model.dims, model.memory
    sets = retrieve_many(mem, model.encoder.encode_many(images), strategy.K)
    K = min(strategy.K, mem.live_count)
    rows = np.stack([mem.rows(s.ids) for s in sets])  # (Q, K)
    w = np.stack([neighbor_weights(s.sims, strategy) for s in sets])  # (Q, K)
    if strategy.kind == "ensemble":
        img_idx = np.repeat(np.arange(len(images)), K)
        vals = mem.values[rows.reshape(-1)]
    else:
        img_idx = np.arange(len(images))
        vals = np.einsum("qk,qkm->qm", w, mem.values[rows].astype(np.float64))
    out = []
    with no_grad():
        for s in range(0, len(img_idx), chunk):
            sel = img_idx[s:s + chunk]
            z = backbone.embed_patches(model.params, images[sel], dims)
            ex = backbone.adapter(model.params, Tensor(vals[s:s + chunk].astype(z.dtype)))
            seq = backbone.assemble_input(model.params, z, ex, BOTH)
            out.append(backbone.forward(model.params, seq, dims).data)
    logits = np.concatenate(out).astype(np.float64)
    if strategy.kind == "ensemble":
        logits = np.einsum("qk,qkc->qc", w, logits.reshape(len(images), K, -1))
    return logits
