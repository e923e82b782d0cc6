"""Patch-transformer classifier with an exemplar-token input slot.

Input sequence layout (length n + 2)::

    [CLS + pos_cls ; patch_1 + pos_1 ... patch_n + pos_n ; adapter(value)]

The exemplar slot carries no positional embedding.  Either pathway can be
swapped for a learned null token (image rows all become ``null_img``; the
exemplar slot becomes ``null_tok``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelDims
from .errors import ConfigError, ContractError, ShapeError
from .nncore import (
    ParamStore,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    mul,
    multi_head_attention,
    reshape,
    select,
)

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class PathwayMask:
    gamma_img: int
    gamma_tok: int

    def __post_init__(self):
        if self.gamma_img not in (0, 1) or self.gamma_tok not in (0, 1):
            raise ContractError(f"mask components must be 0/1, got {self}")
        if self.gamma_img == 0 and self.gamma_tok == 0:
            raise ContractError("mask (0, 0) would drop both pathways")


BOTH = PathwayMask(1, 1)
IMAGE_ONLY = PathwayMask(1, 0)
TOKEN_ONLY = PathwayMask(0, 1)


def init_params(dims: ModelDims, seed: int) -> ParamStore:
    """All backbone, adapter and null-token parameters under ``model.*``."""
    dims.validate()
    rng = np.random.default_rng(seed)
    h, p = dims.hidden, dims.patch_dim

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, np.float32)

    ps = ParamStore()
    ps.add("model.patch.w", normal(p, h))
    ps.add("model.patch.b", zeros(h), decay=False)
    ps.add("model.pos", normal(dims.n_patches, h))
    ps.add("model.pos_cls", normal(h))
    ps.add("model.cls", normal(h))
    hid = dims.mlp_ratio * h
    for i in range(dims.depth):
        pre = f"model.blocks.{i}."
        ps.add(pre + "ln1.g", np.ones(h, np.float32), decay=False)
        ps.add(pre + "ln1.b", zeros(h), decay=False)
        for name in ("q", "k", "v", "o"):
            ps.add(pre + f"attn.w{name}", normal(h, h))
            ps.add(pre + f"attn.b{name}", zeros(h), decay=False)
        ps.add(pre + "ln2.g", np.ones(h, np.float32), decay=False)
        ps.add(pre + "ln2.b", zeros(h), decay=False)
        ps.add(pre + "mlp.w1", normal(h, hid))
        ps.add(pre + "mlp.b1", zeros(hid), decay=False)
        ps.add(pre + "mlp.w2", normal(hid, h))
        ps.add(pre + "mlp.b2", zeros(h), decay=False)
    ps.add("model.norm.g", np.ones(h, np.float32), decay=False)
    ps.add("model.norm.b", zeros(h), decay=False)
    ps.add("model.head.w", normal(h, dims.classes))
    ps.add("model.head.b", zeros(dims.classes), decay=False)
    ps.add("model.adapter.w", normal(dims.value_dim, h))
    ps.add("model.adapter.b", zeros(h), decay=False)
    ps.add("model.null_img", normal(h), decay=False)
    ps.add("model.null_tok", normal(h), decay=False)
    return ps


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W) or (B, C, H, W) -> (B, n, C*patch*patch), row-major patch order."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[:, None]
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch {patch}")
    x = x.reshape(B, C, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // patch) * (W // patch), C * patch * patch)


def embed_patches(params: ParamStore, images, dims: ModelDims) -> Tensor:
    """Linear patch embedding plus positional embeddings -> (B, n, h).

    A single image (no batch axis) gives (n, h).
    """
    imgs = np.asarray(images, dtype=params["model.patch.w"].dtype)
    single = imgs.ndim == (2 if dims.channels == 1 else 3)
    if single:
        imgs = imgs[None]
    if dims.channels == 1 and imgs.ndim == 4 and imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    x = Tensor(patchify(imgs, dims.patch))
    z = add(linear(x, params["model.patch.w"], params["model.patch.b"]), params["model.pos"])
    return reshape(z, z.shape[1:]) if single else z


def adapter(params: ParamStore, v) -> Tensor:
    W = params["model.adapter.w"]
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=W.dtype))
    if v.shape[-1] != W.shape[0]:
        raise ShapeError(f"adapter: value dim {v.shape[-1]} != {W.shape[0]}")
    return linear(v, W, params["model.adapter.b"])


def _gammas(mask, batch: int):
    if isinstance(mask, PathwayMask):
        gi = np.full(batch, mask.gamma_img)
        gt = np.full(batch, mask.gamma_tok)
    else:
        gi, gt = (np.asarray(m).reshape(-1) for m in mask)
        if len(gi) != batch or len(gt) != batch:
            raise ShapeError("mask arrays must have one entry per sample")
        if np.any((gi == 0) & (gt == 0)):
            raise ContractError("mask (0, 0) would drop both pathways")
    return gi, gt


def assemble_input(params: ParamStore, patches: Tensor, exemplar: Tensor, mask) -> Tensor:
    """Build ``[CLS; P(patches, null_img, g_img); P(exemplar, null_tok, g_tok)]``.

    ``P(u, null, g) = g*u + (1-g)*null``.  ``mask`` is a :class:`PathwayMask`
    or a pair of per-sample 0/1 arrays for a batch.
    """
    single = patches.ndim == 2
    if single:
        patches = reshape(patches, (1,) + patches.shape)
        exemplar = reshape(exemplar, (1,) + exemplar.shape)
    B, n, h = patches.shape
    if exemplar.shape != (B, h):
        raise ShapeError(f"assemble_input: exemplar {exemplar.shape} vs patches {patches.shape}")
    gi, gt = _gammas(mask, B)
    dt = patches.dtype
    gi = gi.astype(dt)
    gt = gt.astype(dt)
    img = add(mul(patches, gi[:, None, None]),
              mul(reshape(params["model.null_img"], (1, 1, h)), (1 - gi)[:, None, None]))
    tok = add(mul(exemplar, gt[:, None]),
              mul(reshape(params["model.null_tok"], (1, h)), (1 - gt)[:, None]))
    cls = add(params["model.cls"], params["model.pos_cls"])
    cls = add(np.zeros((B, 1, h), dt), reshape(cls, (1, 1, h)))
    seq = concat([cls, img, reshape(tok, (B, 1, h))], axis=1)
    return reshape(seq, (n + 2, h)) if single else seq


def encode_sequence(params: ParamStore, seq: Tensor, dims: ModelDims) -> Tensor:
    """Pre-norm blocks + final norm; returns the class-token feature (B, h)."""
    x = seq
    for i in range(dims.depth):
        pre = f"model.blocks.{i}."
        a = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], LN_EPS)
        attn = {k: params[pre + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        x = add(x, multi_head_attention(a, attn, dims.heads))
        m = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], LN_EPS)
        m = linear(gelu(linear(m, params[pre + "mlp.w1"], params[pre + "mlp.b1"])),
                   params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        x = add(x, m)
    x = layer_norm(x, params["model.norm.g"], params["model.norm.b"], LN_EPS)
    return select(x, 0, axis=-2)


def forward(params: ParamStore, seq: Tensor, dims: ModelDims) -> Tensor:
    """Logits (C,) for one sequence or (B, C) for a batch."""
    single = seq.ndim == 2
    if single:
        seq = reshape(seq, (1,) + seq.shape)
    feat = encode_sequence(params, seq, dims)
    logits = linear(feat, params["model.head.w"], params["model.head.b"])
    return reshape(logits, logits.shape[1:]) if single else logits
