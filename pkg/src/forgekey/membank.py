"""Exemplar memory bank: frozen keys, learnable values, tombstone deletion.

Retrieval is an exact cosine scan over live entries.  Similarities are
computed in float64 and ordered by (similarity descending, id ascending), so
the ranking is a pure function of the stored keys and the query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BuildError,
    ConfigError,
    DegenerateKeyError,
    EmptyInputError,
    EmptyMemoryError,
    ShapeError,
    UnknownIdError,
)

VALUE_INIT_STD = 0.02


@dataclass(frozen=True)
class KeyEncoder:
    """Seeded random orthonormal projection of per-channel standardized pixels."""

    proj: np.ndarray  # (d_in, d), orthonormal columns
    mean: np.ndarray  # (channels,)
    std: np.ndarray  # (channels,)
    seed: int

    @classmethod
    def fit(cls, images: np.ndarray, d: int, seed: int) -> "KeyEncoder":
        """Build from pixel statistics of ``images`` (N, H, W) or (N, C, H, W)."""
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[:, None]
        if imgs.ndim != 4 or imgs.shape[0] == 0:
            raise ShapeError(f"KeyEncoder.fit: expected a non-empty image stack, got {images.shape}")
        mean = imgs.mean(axis=(0, 2, 3))
        std = imgs.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        d_in = int(np.prod(imgs.shape[1:]))
        if d > d_in:
            raise ConfigError(f"key dim {d} exceeds input dim {d_in}")
        gauss = np.random.default_rng(seed).standard_normal((d_in, d))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # unique QR: positive diagonal
        proj = q.astype(np.float32)
        proj.setflags(write=False)
        return cls(proj, mean.astype(np.float32), std.astype(np.float32), int(seed))

    @property
    def d_in(self) -> int:
        return self.proj.shape[0]

    @property
    def dim(self) -> int:
        return self.proj.shape[1]

    def _standardize(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        channels = len(self.mean)
        per = self.d_in // channels
        flat = x.reshape(x.shape[0], channels, per)
        flat = (flat - self.mean[None, :, None]) / self.std[None, :, None]
        return flat.reshape(x.shape[0], self.d_in)

    def encode_many(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        n = images.shape[0]
        if images[0].size != self.d_in:
            raise ShapeError(f"encode: image size {images[0].size} != encoder input {self.d_in}")
        z = self._standardize(images) @ self.proj.astype(np.float64)
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < 1e-12):
            bad = int(np.argmax(norms < 1e-12))
            raise DegenerateKeyError(f"projected key {bad} of {n} has near-zero norm")
        return (z / norms[:, None]).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.encode_many(np.asarray(image)[None])[0]


@dataclass(frozen=True)
class NeighborSet:
    ids: np.ndarray  # int64, ordered best-first
    sims: np.ndarray  # float64, non-increasing

    def __len__(self):
        return len(self.ids)

    def pairs(self):
        return list(zip(self.ids.tolist(), self.sims.tolist()))


class ExemplarMemory:
    """Rows of (id, unit key, learnable value) with per-row live flags."""

    def __init__(self, ids, keys, values, live=None):
        ids = np.asarray(ids, dtype=np.int64)
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if ids.ndim != 1 or keys.shape[0] != len(ids) or values.shape[0] != len(ids):
            raise ShapeError("memory: ids/keys/values row counts differ")
        if np.any(ids < 0):
            raise BuildError("memory ids must be non-negative")
        if len(np.unique(ids)) != len(ids):
            raise BuildError("duplicate ids in memory")
        self.ids = ids
        self.keys = keys
        self.values = values
        self.live = np.ones(len(ids), dtype=bool) if live is None else np.asarray(live, dtype=bool).copy()
        self._row = {int(i): r for r, i in enumerate(ids.tolist())}

    def __len__(self):
        return len(self.ids)

    @property
    def live_count(self) -> int:
        return int(self.live.sum())

    @property
    def key_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def value_dim(self) -> int:
        return self.values.shape[1]

    def has(self, sample_id: int) -> bool:
        return int(sample_id) in self._row

    def is_live(self, sample_id: int) -> bool:
        r = self._row.get(int(sample_id))
        return r is not None and bool(self.live[r])

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)
        except KeyError as exc:
            raise UnknownIdError(f"id {exc.args[0]} is not in the memory bank") from None

    def copy(self) -> "ExemplarMemory":
        return ExemplarMemory(self.ids.copy(), self.keys.copy(), self.values.copy(), self.live)

    def live_ids(self) -> np.ndarray:
        return self.ids[self.live]

    def compact(self) -> "ExemplarMemory":
        """New bank holding only live rows (explicit maintenance, never implicit)."""
        keep = self.live
        return ExemplarMemory(self.ids[keep], self.keys[keep], self.values[keep])


def build(ids, images, encoder: KeyEncoder, m: int, seed: int) -> ExemplarMemory:
    """One live entry per training instance; values drawn from N(0, 0.02^2)."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise BuildError("cannot build a memory bank from an empty dataset")
    if len(np.unique(ids)) != len(ids):
        raise BuildError("duplicate ids in dataset")
    keys = encoder.encode_many(images)
    values = np.random.default_rng(seed).normal(0.0, VALUE_INIT_STD, (len(ids), m)).astype(np.float32)
    return ExemplarMemory(ids, keys, values)


def retrieve_many(memory: ExemplarMemory, queries: np.ndarray, K: int,
                  exclude_ids=None) -> list[NeighborSet]:
    """Exact top-K over live rows for each query row (see :func:`retrieve`)."""
    if K < 1:
        raise ConfigError("retrieve: K must be >= 1")
    live_rows = np.flatnonzero(memory.live)
    if len(live_rows) == 0:
        raise EmptyMemoryError("memory bank has no live entries")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != memory.key_dim:
        raise ShapeError(f"retrieve: query dim {q.shape[1]} != key dim {memory.key_dim}")
    live_ids = memory.ids[live_rows]
    sims = q @ memory.keys[live_rows].astype(np.float64).T
    excl = [None] * len(q) if exclude_ids is None else list(exclude_ids)
    out = []
    for i in range(len(q)):
        row = sims[i]
        keep = None
        if excl[i] is not None:
            keep = live_ids != int(excl[i])
            row = row[keep]
        cand_ids = live_ids if keep is None else live_ids[keep]
        if len(cand_ids) == 0:
            raise EmptyMemoryError("no live entries left after exclusion")
        if K < len(row):
            # everything tied with the K-th best stays in, so the tie-break is exact
            kth = np.partition(row, len(row) - K)[len(row) - K]
            pool = np.flatnonzero(row >= kth)
        else:
            pool = np.arange(len(row))
        order = pool[np.lexsort((cand_ids[pool], -row[pool]))[:K]]
        out.append(NeighborSet(cand_ids[order], row[order]))
    return out


def retrieve(memory: ExemplarMemory, query_key: np.ndarray, K: int, exclude_id=None) -> NeighborSet:
    """Top-K live entries by cosine similarity, ties broken by ascending id."""
    return retrieve_many(memory, np.asarray(query_key)[None], K,
                         None if exclude_id is None else [exclude_id])[0]


def delete(memory: ExemplarMemory, forget_ids) -> int:
    """Tombstone ``forget_ids``; returns how many live entries were removed.

    Unknown ids abort the whole call before anything is flagged.  Already
    dead ids are skipped, so repeating a deletion is a no-op.
    """
    ids = list(forget_ids)
    if not ids:
        return 0
    rows = memory.rows(ids)  # raises UnknownIdError before any mutation
    rows = np.unique(rows)
    removed = int(memory.live[rows].sum())
    memory.live[rows] = False
    return removed


def softmax_weights(similarities, tau: float) -> np.ndarray:
    s = np.asarray(similarities, dtype=np.float64)
    if s.size == 0:
        raise EmptyInputError("softmax_weights: empty similarity list")
    if tau <= 0:
        raise ConfigError("softmax_weights: tau must be positive")
    z = (s - s.max()) / tau
    e = np.exp(z)
    return e / e.sum()


def rank_weights(K: int) -> np.ndarray:
    """Linearly decreasing rank weights (K, K-1, ..., 1) / (K(K+1)/2)."""
    if K < 1:
        raise ConfigError("rank_weights: K must be >= 1")
    r = np.arange(1, K + 1, dtype=np.float64)
    return (K - r + 1) / (K * (K + 1) / 2)


def aggregate(values, weights) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.ndim != 2 or w.ndim != 1 or len(v) != len(w):
        raise ShapeError(f"aggregate: {len(w)} weights for {len(v)} values")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ShapeError(f"aggregate: weights sum to {w.sum()}, not 1")
    return w @ v
