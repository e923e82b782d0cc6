"""Joint training of backbone, adapter, null tokens and memory values.

Per sample the trainer draws, in this order from one Philox stream:
the pathway mask, the retrieval indicator r, and (only when r = 1) the
neighbour count K'.  With r = 0 the exemplar slot holds the sample's own
value; with r = 1 it holds a softmax-weighted mix of K' neighbour values
(self excluded) that sits behind a gradient stop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import backbone
from .config import TrainConfig
from .datagen import Dataset
from .errors import ConfigError, StaleSampleError
from .inference import FusionStrategy, batch_logits
from .membank import ExemplarMemory, KeyEncoder, build, retrieve_many, softmax_weights
from .model import MunkeyModel
from .nncore import (
    OptimState,
    RowOptimState,
    Tensor,
    adamw_rows,
    adamw_step,
    add,
    backward,
    cosine_lr,
    mul,
    softmax_cross_entropy,
    stop_gradient,
    tsum,
)
from .backbone import PathwayMask

log = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_mask(p_i: float, p_t: float, rng: np.random.Generator) -> PathwayMask:
    """Categorical draw: (0,1) w.p. p_i, (1,0) w.p. p_t, else (1,1)."""
    if p_i < 0 or p_t < 0 or p_i + p_t > 1.0:
        raise ConfigError(f"invalid dropout probabilities p_i={p_i}, p_t={p_t}")
    u = rng.random()
    if u < p_i:
        return PathwayMask(0, 1)
    if u < p_i + p_t:
        return PathwayMask(1, 0)
    return PathwayMask(1, 1)


def sample_retrieval(p_r: float, k_range, rng: np.random.Generator):
    """Returns (r, K') with K' uniform over ``k_range`` when r = 1, else (0, None)."""
    if not 0.0 <= p_r <= 1.0:
        raise ConfigError(f"p_r={p_r} outside [0, 1]")
    if rng.random() < p_r:
        lo, hi = k_range
        return 1, int(rng.integers(lo, hi + 1))
    return 0, None


@dataclass
class Draws:
    gamma_img: np.ndarray
    gamma_tok: np.ndarray
    r: np.ndarray
    k: np.ndarray  # 0 where r == 0

    @classmethod
    def sample(cls, config: TrainConfig, rng, batch: int) -> "Draws":
        gi = np.empty(batch, np.int64)
        gt = np.empty(batch, np.int64)
        r = np.zeros(batch, np.int64)
        k = np.zeros(batch, np.int64)
        for j in range(batch):
            m = sample_mask(config.p_i, config.p_t, rng)
            gi[j], gt[j] = m.gamma_img, m.gamma_tok
            rj, kj = sample_retrieval(config.p_r, (config.k_min, config.k_max), rng)
            r[j] = rj
            k[j] = kj or 0
        return cls(gi, gt, r, k)

    @classmethod
    def fixed(cls, batch: int, gamma_img=1, gamma_tok=1, r=0, k=0) -> "Draws":
        full = lambda v: np.full(batch, v, np.int64)  # noqa: E731
        return cls(full(gamma_img), full(gamma_tok), full(r), full(k))


@dataclass
class StepGrads:
    loss: float
    value_grads: np.ndarray  # (N, m) gradient w.r.t. every memory value row
    touched_rows: np.ndarray  # rows whose own value entered the graph (r = 0)
    own: Tensor  # leaf for the batch's own value rows
    neighbors: Tensor | None  # leaf for retrieved neighbour values (B, Kmax, m)
    neighbor_rows: np.ndarray  # (B, Kmax), -1 padding


class NeighborTable:
    """Top-``k_max`` neighbours of every training entry, self excluded.

    Keys never change and nothing is deleted during training, so one exact
    scan up front serves every retrieval-branch draw.
    """

    def __init__(self, memory: ExemplarMemory, k_max: int):
        live = memory.live_ids()
        sets = retrieve_many(memory, memory.keys[memory.rows(live)], k_max, exclude_ids=live)
        self.by_id = {int(i): s for i, s in zip(live.tolist(), sets)}

    def get(self, sample_id: int, k: int):
        s = self.by_id[int(sample_id)]
        return s.ids[:k], s.sims[:k]


def batch_loss(model: MunkeyModel, images, ids, labels, draws: Draws, table: NeighborTable):
    """Mean cross-entropy over the batch; returns (loss, own_leaf, nb_leaf, nb_rows, nb_weights)."""
    mem, params, cfg = model.memory, model.params, model.config
    ids = np.asarray(ids, np.int64)
    rows = mem.rows(ids)
    if not np.all(mem.live[rows]):
        dead = ids[~mem.live[rows]]
        raise StaleSampleError(f"batch contains deleted ids {dead[:5].tolist()}")
    B = len(ids)
    dt = params["model.patch.w"].dtype
    own = Tensor(mem.values[rows].astype(dt), requires_grad=True)

    kmax = int(draws.k.max()) if B else 0
    nb_rows = np.full((B, max(kmax, 1)), -1, np.int64)
    nb_w = np.zeros((B, max(kmax, 1)), dt)
    for j in range(B):
        if draws.r[j]:
            nid, sims = table.get(ids[j], int(draws.k[j]))
            nb_rows[j, :len(nid)] = mem.rows(nid)
            nb_w[j, :len(nid)] = softmax_weights(sims, cfg.tau)
    nb = None
    exemplar_v = mul(own, (1 - draws.r).astype(dt)[:, None])
    if kmax:
        nb_vals = np.where(nb_rows[..., None] >= 0, mem.values[np.maximum(nb_rows, 0)], 0.0).astype(dt)
        nb = Tensor(nb_vals, requires_grad=True)
        agg = tsum(mul(stop_gradient(nb), nb_w[..., None]), axis=1)
        exemplar_v = add(exemplar_v, agg)

    z = backbone.embed_patches(params, images, cfg.dims)
    ex = backbone.adapter(params, exemplar_v)
    seq = backbone.assemble_input(params, z, ex, (draws.gamma_img, draws.gamma_tok))
    logits = backbone.forward(params, seq, cfg.dims)
    loss = softmax_cross_entropy(logits, labels)
    return loss, own, nb, nb_rows, nb_w


def compute_gradients(model: MunkeyModel, images, ids, labels, draws: Draws,
                      table: NeighborTable) -> StepGrads:
    model.params.zero_grad()
    loss, own, nb, nb_rows, _ = batch_loss(model, images, ids, labels, draws, table)
    backward(loss)
    mem = model.memory
    rows = mem.rows(ids)
    value_grads = np.zeros_like(mem.values)
    touched = draws.r == 0
    np.add.at(value_grads, rows[touched], own.grad[touched])
    if nb is not None:
        valid = nb_rows >= 0
        np.add.at(value_grads, nb_rows[valid], nb.grad[valid])
    return StepGrads(float(loss.item()), value_grads, rows[touched], own, nb, nb_rows)


@dataclass
class TrainState:
    optim: OptimState
    rows: RowOptimState
    step: int = 0


def training_step(model: MunkeyModel, images, ids, labels, draws: Draws, table: NeighborTable,
                  state: TrainState, lr: float) -> float:
    """One joint AdamW update of parameters and the touched memory rows."""
    cfg = model.config
    g = compute_gradients(model, images, ids, labels, draws, table)
    adamw_step(model.params, state.optim, lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps)
    rows = g.touched_rows
    adamw_rows(model.memory.values, rows, g.value_grads[rows], state.rows, lr,
               cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps)
    state.step += 1
    return g.loss


def init_model(config: TrainConfig, train: Dataset) -> MunkeyModel:
    """Seeded initialisation: encoder, memory values and parameters use
    independent child streams of the config seed."""
    config.validate()
    enc_ss, mem_ss, par_ss = np.random.SeedSequence(config.seed).spawn(3)
    enc_seed = int(enc_ss.generate_state(1)[0])
    encoder = KeyEncoder.fit(train.images, config.dims.key_dim, enc_seed)
    memory = build(train.ids, train.images, encoder, config.dims.value_dim,
                   int(mem_ss.generate_state(1)[0]))
    params = backbone.init_params(config.dims, int(par_ss.generate_state(1)[0]))
    return MunkeyModel(params, memory, encoder, config, [])


def total_steps(config: TrainConfig, n_train: int) -> int:
    per_epoch = -(-n_train // config.batch_size)
    return config.epochs * per_epoch


def train(config: TrainConfig, dataset: Dataset, epoch_callback=None) -> MunkeyModel:
    """Train for ``config.epochs`` epochs on the dataset's train split.

    Update ``t`` (1-based) uses ``cosine_lr(t, T)``, so the final update runs at
    zero learning rate.  Each epoch appends a history row with the mean
    training loss, validation accuracy, last learning rate and a pathway
    sensitivity probe on a fixed slice of training entries.
    """
    from .harness import accuracy, measure_pathway_accuracies, sensitivity_score

    config.validate()
    train_set = dataset.split("train")
    val_set = dataset.split("val")
    model = init_model(config, train_set)
    if config.epochs == 0:
        return model
    table = NeighborTable(model.memory, config.k_max)
    state = TrainState(OptimState(), RowOptimState.zeros_like(model.memory.values))
    rng = make_rng(config.seed)
    n = len(train_set)
    T = total_steps(config, n)
    probe = train_set.subset(np.argsort(train_set.ids)[:config.probe_size])
    strategy = FusionStrategy("ensemble", config.k_infer, config.tau)

    lr = config.lr0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            draws = Draws.sample(config, rng, len(sel))
            lr = cosine_lr(state.step + 1, T, config.lr0)
            losses.append(training_step(model, train_set.images[sel], train_set.ids[sel],
                                        train_set.labels[sel], draws, table, state, lr))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr}
        if len(val_set):
            logits = batch_logits(val_set.images, model, strategy)
            row["val_acc"] = accuracy(logits.argmax(axis=1), val_set.labels)
        else:
            row["val_acc"] = float("nan")
        a_img, a_tok, a_both = measure_pathway_accuracies(model, probe)
        row["p_s_probe"] = sensitivity_score(a_img, a_tok, a_both)
        model.history.append(row)
        log.info("epoch %d loss %.4f val_acc %.2f p_s %.3f", epoch, row["train_loss"],
                 row["val_acc"], row["p_s_probe"])
        if epoch_callback is not None:
            epoch_callback(row)
    return model
