"""Forgetting and utility metrics, membership inference, model selection."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone
from .backbone import BOTH, IMAGE_ONLY, TOKEN_ONLY
from .config import TrainConfig
from .datagen import Dataset
from .errors import (
    DegenerateFeaturesError,
    EmptyInputError,
    NoViableCandidateError,
    ShapeError,
    StaleSampleError,
    UnknownIdError,
)
from .inference import FusionStrategy, argmax_first, batch_logits
from .membank import ExemplarMemory, delete, retrieve
from .model import MunkeyModel
from .nncore import Tensor, no_grad

# xi: health-check threshold; comparable-gap tolerance in accuracy points
DEFAULT_XI = 0.3
DEFAULT_GAP_TOLERANCE = 0.1
PS_EPS = 1e-8


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if len(predicted) == 0:
        raise EmptyInputError("accuracy of an empty set")
    if predicted.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    return 100.0 * float(np.mean(predicted == labels))


def mia_features(logits, label) -> tuple[float, float, float, float]:
    """(cross-entropy loss, softmax entropy in nats, max prob, top1 - top2 prob)."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < len(z):
        raise IndexError(f"label {label} outside [0, {len(z)})")
    z = z - z.max()
    logp = z - np.log(np.exp(z).sum())
    p = np.exp(logp)
    loss = -logp[int(label)]
    entropy = -float(np.sum(p * logp))
    top = np.sort(p)[::-1]
    margin = top[0] - top[1] if len(top) > 1 else top[0]
    return float(loss), entropy, float(top[0]), float(margin)


def features_matrix(logits: np.ndarray, labels) -> np.ndarray:
    return np.array([mia_features(z, y) for z, y in zip(logits, labels)], dtype=np.float64)


@dataclass
class MiaAttacker:
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: float
    iterations: int = 500
    step: float = 0.1
    l2: float = 1e-4

    def decision(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return x @ self.weights + self.bias

    def scores(self, features) -> np.ndarray:
        """Member probability per row."""
        return 1.0 / (1.0 + np.exp(-self.decision(features)))


def fit_attacker(members, nonmembers, seed: int = 0, iterations: int = 500, step: float = 0.1,
                 l2: float = 1e-4) -> MiaAttacker:
    """Standardized logistic regression, full-batch gradient descent from zero.

    Rows are shuffled with ``seed`` before fitting; the fit itself is
    deterministic, so the seed only fixes summation order.
    """
    X1 = np.atleast_2d(np.asarray(members, dtype=np.float64))
    X0 = np.atleast_2d(np.asarray(nonmembers, dtype=np.float64))
    if X1.size == 0 or X0.size == 0:
        raise EmptyInputError("attacker needs both member and non-member features")
    X = np.vstack([X1, X0])
    y = np.concatenate([np.ones(len(X1)), np.zeros(len(X0))])
    perm = np.random.default_rng(seed).permutation(len(X))
    X, y = X[perm], y[perm]
    if np.all(X == X[0]):
        raise DegenerateFeaturesError("all attack features are identical")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    w = np.zeros(X.shape[1])
    b = 0.0
    n = len(X)
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(Xs @ w + b)))
        err = p - y
        w -= step * (Xs.T @ err / n + l2 * w)
        b -= step * float(err.mean())
    return MiaAttacker(mean, std, w, b, iterations, step, l2)


def auroc(scores_a, scores_b) -> float:
    """P(score_a > score_b) + 0.5 P(tie), as a percentage (Mann-Whitney)."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyInputError("AUROC needs two non-empty score sets")
    b_sorted = np.sort(b)
    below = np.searchsorted(b_sorted, a, side="left")
    upto = np.searchsorted(b_sorted, a, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return 100.0 * float(wins) / (a.size * b.size)


def mia_auroc(attacker: MiaAttacker, features_a, features_b) -> float:
    return auroc(attacker.scores(features_a), attacker.scores(features_b))


def avg_gap(method, oracle) -> float:
    """Mean absolute difference over (TA, RA, FA, MIA)."""
    m = np.asarray(method, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    if m.shape != (4,) or o.shape != (4,):
        raise ShapeError("avg_gap takes two 4-tuples (ta, ra, fa, mia)")
    return float(np.mean(np.abs(m - o)))


def sensitivity_score(a_img: float, a_tok: float, a_both: float, eps: float = PS_EPS) -> float:
    return abs(a_img - a_tok) / (a_both + eps)


def measure_pathway_accuracies(model: MunkeyModel, data: Dataset, batch: int = 256):
    """Accuracies (fractions) with masks (1,0), (0,1) and (1,1), each sample
    paired with its own memory value."""
    mem = model.memory
    for i in data.ids:
        if not mem.is_live(i):
            raise StaleSampleError(f"sample {int(i)} has no live memory entry")
    if len(data) == 0:
        raise EmptyInputError("pathway accuracies of an empty set")
    correct = np.zeros(3)
    dims = model.dims
    with no_grad():
        for s in range(0, len(data), batch):
            part = slice(s, s + batch)
            rows = mem.rows(data.ids[part])
            z = backbone.embed_patches(model.params, data.images[part], dims)
            ex = backbone.adapter(model.params, Tensor(mem.values[rows]))
            for j, mask in enumerate((IMAGE_ONLY, TOKEN_ONLY, BOTH)):
                seq = backbone.assemble_input(model.params, z, ex, mask)
                logits = backbone.forward(model.params, seq, dims).data
                correct[j] += np.sum(logits.argmax(axis=1) == data.labels[part])
    a_img, a_tok, a_both = correct / len(data)
    return float(a_img), float(a_tok), float(a_both)


@dataclass(frozen=True)
class CandidateRecord:
    config_id: int
    p_s: float
    gap: float  # |val_acc - forget_acc|
    checkpoint: str = ""

    def __post_init__(self):
        if self.gap < 0:
            raise ValueError("utility gap must be non-negative")


def select_model(candidates, xi: float = DEFAULT_XI, gap_tolerance: float = DEFAULT_GAP_TOLERANCE) -> int:
    """Health filter (p_s < xi), then keep gaps within ``gap_tolerance`` of the
    best gap, then lowest p_s; remaining ties go to the lowest config id."""
    cands = list(candidates)
    if not cands:
        raise NoViableCandidateError("no candidates supplied")
    healthy = [c for c in cands if c.p_s < xi]
    if not healthy:
        raise NoViableCandidateError(f"every candidate has p_s >= {xi}")
    best_gap = min(c.gap for c in healthy)
    close = [c for c in healthy if c.gap <= best_gap + gap_tolerance]
    return min(close, key=lambda c: (c.p_s, c.config_id)).config_id


def knn_baseline(query_key, memory: ExemplarMemory, labels_by_id, K: int, classes: int) -> np.ndarray:
    """Class frequencies among the K nearest live keys."""
    nb = retrieve(memory, query_key, K)
    counts = np.zeros(classes)
    for i in nb.ids:
        counts[labels_by_id[int(i)]] += 1
    return counts / len(nb)


def knn_accuracy(memory: ExemplarMemory, encoder, data: Dataset, labels_by_id, K: int) -> float:
    keys = encoder.encode_many(data.images)
    pred = [argmax_first(knn_baseline(k, memory, labels_by_id, K, data.classes)) for k in keys]
    return accuracy(pred, data.labels)


def retrain_oracle(config: TrainConfig, dataset: Dataset, forget_ids, epoch_callback=None) -> MunkeyModel:
    """Train from scratch on the dataset minus ``forget_ids``."""
    from .trainer import train

    forget_ids = [int(i) for i in forget_ids]
    train_ids = set(dataset.split("train").ids.tolist())
    unknown = [i for i in forget_ids if i not in train_ids]
    if unknown:
        raise UnknownIdError(f"forget ids not in the train split: {unknown[:5]}")
    return train(config, dataset.without(forget_ids) if forget_ids else dataset, epoch_callback)


@dataclass
class MetricsReport:
    ta: float
    ra: float
    fa: float
    mia_auroc: float
    avg_gap: float | None = None
    p_s: float = 0.0
    unlearn_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def quad(self):
        return (self.ta, self.ra, self.fa, self.mia_auroc)

    def to_json(self) -> str:
        def f(x):
            return "null" if x is None else f"{x:.4f}"

        parts = [f'"{k}": {f(getattr(self, k))}' for k in
                 ("ta", "ra", "fa", "mia_auroc", "avg_gap", "p_s", "unlearn_seconds")]
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["ta"], d["ra"], d["fa"], d["mia_auroc"], d.get("avg_gap"), d["p_s"],
                   d["unlearn_seconds"])


@dataclass
class Splits:
    retain: Dataset
    forget: Dataset
    test: Dataset
    test_fit: Dataset  # non-members the attacker trains on
    test_probe: Dataset  # held-out non-members compared against the forget set

    @classmethod
    def make(cls, dataset: Dataset, forget_ids, seed: int = 0) -> "Splits":
        train = dataset.split("train")
        forget_set = set(int(i) for i in forget_ids)
        in_forget = np.array([int(i) in forget_set for i in train.ids], dtype=bool)
        test = dataset.split("test")
        perm = np.random.default_rng(seed).permutation(len(test))
        half = len(test) // 2
        return cls(train.subset(~in_forget), train.subset(in_forget), test,
                   test.subset(np.sort(perm[:half])), test.subset(np.sort(perm[half:])))


def evaluate_state(model: MunkeyModel, splits: Splits, strategy: FusionStrategy, seed: int = 0) -> dict:
    """TA/RA/FA and forget-vs-test MIA AUROC against the model's current memory."""

    def run(data):
        logits = batch_logits(data.images, model, strategy)
        return logits, logits.argmax(axis=1)

    out = {}
    feats = {}
    for name in ("test", "retain", "forget"):
        data = getattr(splits, name)
        logits, pred = run(data)
        out[name] = accuracy(pred, data.labels) if len(data) else float("nan")
        feats[name] = features_matrix(logits, data.labels)
    # test halves are rows of the test split
    row = {int(i): r for r, i in enumerate(splits.test.ids.tolist())}
    fit_rows = [row[int(i)] for i in splits.test_fit.ids]
    probe_rows = [row[int(i)] for i in splits.test_probe.ids]
    attacker = fit_attacker(feats["retain"], feats["test"][fit_rows], seed)
    mia = mia_auroc(attacker, feats["forget"], feats["test"][probe_rows])
    return {"ta": out["test"], "ra": out["retain"], "fa": out["forget"], "mia_auroc": mia,
            "attacker": attacker}


def evaluate_unlearning(model: MunkeyModel, oracle: MunkeyModel | MetricsReport | None, dataset: Dataset,
                        forget_ids, seed: int = 0, strategy: FusionStrategy | None = None,
                        ps_samples: int = 512) -> MetricsReport:
    """Delete ``forget_ids`` from a copy of ``model`` (timed), then report metrics.

    Ids the bank never held (e.g. when ``model`` is itself a retrain oracle)
    are skipped.  ``oracle`` may be a model, a precomputed report, or None.
    """
    strategy = strategy or FusionStrategy("ensemble", model.config.k_infer, model.config.tau)
    splits = Splits.make(dataset, forget_ids, seed)
    work = model.copy()
    present = [int(i) for i in forget_ids if work.memory.has(i)]
    t0 = time.perf_counter()
    delete(work.memory, present)
    elapsed = time.perf_counter() - t0
    st = evaluate_state(work, splits, strategy, seed)
    probe = splits.retain.subset(np.argsort(splits.retain.ids)[:ps_samples])
    p_s = sensitivity_score(*measure_pathway_accuracies(work, probe))
    report = MetricsReport(st["ta"], st["ra"], st["fa"], st["mia_auroc"], None, p_s, elapsed)
    if oracle is not None:
        if isinstance(oracle, MunkeyModel):
            oracle = evaluate_unlearning(oracle, None, dataset, forget_ids, seed, strategy, ps_samples)
        report.avg_gap = avg_gap(report.quad(), oracle.quad())
        report.extra["oracle"] = oracle
    return report
