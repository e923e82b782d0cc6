"""Seeded synthetic image datasets and stratified forget-set sampling.

Each image is a class prototype plus a smooth per-instance pattern plus white
noise.  The instance pattern gives every training sample something of its
own to memorize, which is what makes membership inference measurable.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

SPLITS = ("train", "val", "test")
_IMG_MAGIC = b"FKIM"


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    samples_per_class: int = 625
    image_size: int = 16
    prototype_amp: float = 0.45
    instance_amp: float = 1.0
    noise_std: float = 1.0
    smooth: int = 4  # instance patterns are upsampled from a smooth x smooth grid
    split_fractions: tuple = (0.7, 0.1, 0.2)
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.classes < 1 or self.samples_per_class < 1 or self.image_size < 1 or self.smooth < 1:
            raise ConfigError("synthetic spec counts must be positive")
        if min(self.prototype_amp, self.instance_amp, self.noise_std) < 0:
            raise ConfigError("amplitudes and noise std must be non-negative")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {self.split_fractions} must be 3 values summing to 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown dataset spec keys: {', '.join(extra)}")
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class Dataset:
    ids: np.ndarray  # int64
    images: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # int64
    splits: np.ndarray  # str: train / val / test
    classes: int = field(default=0)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits).astype(str)
        n = len(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.splits) == n):
            raise ShapeError("dataset arrays have different lengths")
        if len(np.unique(self.ids)) != n:
            raise DataError("dataset ids are not unique")
        if not self.classes:
            self.classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError("label outside [0, classes)")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")
        self._index = {int(i): r for r, i in enumerate(self.ids.tolist())}

    def __len__(self):
        return len(self.ids)

    def split(self, name: str) -> "Dataset":
        return self.subset(self.splits == name)

    def subset(self, mask_or_rows) -> "Dataset":
        sel = np.asarray(mask_or_rows)
        return Dataset(self.ids[sel], self.images[sel], self.labels[sel], self.splits[sel], self.classes)

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]} not in dataset") from None

    def by_ids(self, ids) -> "Dataset":
        return self.subset(self.rows(ids))

    def without(self, ids) -> "Dataset":
        drop = set(int(i) for i in ids)
        return self.subset(np.array([int(i) not in drop for i in self.ids], dtype=bool))


# 2000 / 400 / 800 balanced train / val / test; the end-to-end benchmark setting
TOY_SPEC = SyntheticSpec(samples_per_class=800, split_fractions=(0.625, 0.125, 0.25))


def largest_remainder(total: int, weights) -> np.ndarray:
    """Split ``total`` into integer parts proportional to ``weights``.

    Remainders are handed out largest first, ties to the lowest index.
    """
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    frac = exact - base
    order = np.lexsort((np.arange(len(w)), -frac))
    base[order[:short]] += 1
    return base


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsampling of (..., g, g) grids to (..., size, size)."""
    g = grid.shape[-1]
    pos = (np.arange(size) + 0.5) * g / size - 0.5
    pos = np.clip(pos, 0, g - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    t = pos - lo
    rows = grid[..., lo, :] * (1 - t)[:, None] + grid[..., hi, :] * t[:, None]
    return rows[..., lo] * (1 - t) + rows[..., hi] * t


def generate(spec: SyntheticSpec, seed: int | None = None) -> Dataset:
    spec.validate()
    seed = spec.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    proto_ss, inst_ss, noise_ss, split_ss = root.spawn(4)
    C, per, S = spec.classes, spec.samples_per_class, spec.image_size

    protos = np.random.default_rng(proto_ss).standard_normal((C, S, S))
    protos /= protos.std(axis=(1, 2), keepdims=True)

    N = C * per
    labels = np.repeat(np.arange(C), per)
    inst_grid = np.random.default_rng(inst_ss).standard_normal((N, spec.smooth, spec.smooth))
    inst = _upsample(inst_grid, S)
    inst /= inst.std(axis=(1, 2), keepdims=True) + 1e-12
    noise = np.random.default_rng(noise_ss).standard_normal((N, S, S))
    images = (spec.prototype_amp * protos[labels] + spec.instance_amp * inst
              + spec.noise_std * noise).astype(np.float32)

    splits = np.empty(N, dtype=object)
    counts = {}
    class_sizes = np.full(C, per)
    # per-split totals first, then each split over what every class has left,
    # which keeps per-class counts non-negative and the test split balanced
    totals = largest_remainder(N, spec.split_fractions)
    remaining = class_sizes.copy()
    for name, total in zip(SPLITS[:2], totals[:2]):
        counts[name] = largest_remainder(int(total), remaining) if total else np.zeros(C, np.int64)
        remaining -= counts[name]
    counts["test"] = remaining
    rng = np.random.default_rng(split_ss)
    for c in range(C):
        members = rng.permutation(np.flatnonzero(labels == c))
        a = counts["train"][c]
        b = a + counts["val"][c]
        splits[members[:a]] = "train"
        splits[members[a:b]] = "val"
        splits[members[b:]] = "test"
    return Dataset(np.arange(N, dtype=np.int64), images, labels, splits.astype(str), C)


def sample_forget(dataset: Dataset, rate: float, stratified: bool = True, seed: int = 0) -> np.ndarray:
    """Draw ``floor(rate * |train|)`` train ids, sorted ascending.

    Stratified mode apportions the count across classes by largest remainder.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"forget rate {rate} must lie in (0, 1)")
    train = dataset.split("train")
    n = int(np.floor(rate * len(train) + 1e-9))
    if n == 0:
        raise ConfigError(f"forget rate {rate} on {len(train)} train samples selects nothing")
    rng = np.random.default_rng(seed)
    if not stratified:
        return np.sort(rng.choice(train.ids, size=n, replace=False))
    classes = np.arange(dataset.classes)
    sizes = np.array([(train.labels == c).sum() for c in classes])
    quota = largest_remainder(n, sizes)
    picked = []
    for c, q in zip(classes, quota):
        pool = train.ids[train.labels == c]
        if q:
            picked.append(rng.choice(pool, size=int(q), replace=False))
    return np.sort(np.concatenate(picked))


# --- on-disk format: images.bin + labels.csv ---------------------------------------


def save_dataset(dataset: Dataset, directory) -> None:
    """Write ``images.bin`` (magic, u32 count, u32 rank, u32 dims, f32 LE payload)
    and ``labels.csv`` (id,label,split)."""
    os.makedirs(directory, exist_ok=True)
    imgs = np.ascontiguousarray(dataset.images, dtype="<f4")
    with open(os.path.join(directory, "images.bin"), "wb") as fh:
        fh.write(_IMG_MAGIC)
        dims = imgs.shape[1:]
        fh.write(struct.pack("<II", imgs.shape[0], len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(imgs.tobytes())
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "split"])
        for i, y, s in zip(dataset.ids.tolist(), dataset.labels.tolist(), dataset.splits.tolist()):
            w.writerow([i, y, s])


def load_dataset(directory, classes: int | None = None) -> Dataset:
    path = os.path.join(directory, "images.bin")
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DataError(f"{path} not found") from None
    if blob[:4] != _IMG_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    count, rank = struct.unpack_from("<II", blob, 4)
    off = 12 + 4 * rank
    if len(blob) < off:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    size = count * int(np.prod(dims)) * 4
    if len(blob) != off + size:
        raise FormatError(f"{path}: payload is {len(blob) - off} bytes, expected {size}")
    images = np.frombuffer(blob, dtype="<f4", offset=off).reshape((count,) + tuple(dims)).astype(np.float32)
    ids, labels, splits = [], [], []
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
            splits.append(row["split"])
    if len(ids) != count:
        raise DataError(f"labels.csv has {len(ids)} rows for {count} images")
    return Dataset(np.array(ids), images, np.array(labels), np.array(splits), classes or 0)
