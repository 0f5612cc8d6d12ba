"""The full network: embedding, mLSTM encoder, masked-attention decoder, heads.

The encoder alternates forward and reversed mLSTM blocks over the
serialized token sequence.  The decoder rebuilds per-position signals from
the encoder output (or a learned mask token at hidden positions) plus the
positional embeddings, through pre-norm self-attention blocks constrained
by an additive content mask, and projects to the prediction-unit
dimension.  Encoder and decoder share no weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GeometryError
from .masking import AttnMask, MaskSelection
from .mlstm import MLSTMBlockParams, init_mlstm_block, mlstm_block_forward
from .serialize import ClusterPlan, build_cluster_plan
from .tensor import (Tensor, add, assert_finite, concat, gelu, index_select,
                     layer_norm, masked_softmax, mul, reshape, swapaxes)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and width of every component; validated before use."""

    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 128
    heads: int = 4
    enc_blocks: int = 6
    dec_blocks: int = 4
    dec_width: int = 128
    cluster_h: int = 2
    cluster_w: int = 2
    order: str = "row_forward"
    order_seed: int | None = None
    classes: int = 3
    seg_classes: int = 4
    forget_gate: str = "sigmoid"

    @property
    def grid_h(self) -> int:
        return self.image_size // self.patch

    @property
    def grid_w(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def cluster_size(self) -> int:
        return self.cluster_h * self.cluster_w

    @property
    def unit_dim(self) -> int:
        """Length of one prediction-unit pixel vector."""
        return self.cluster_size * self.patch_dim

    @property
    def num_clusters(self) -> int:
        return self.n_patches // self.cluster_size

    def build_plan(self) -> ClusterPlan:
        return build_cluster_plan(self.grid_h, self.grid_w, self.cluster_h,
                                  self.cluster_w, self.order, self.order_seed)

    def fingerprint_text(self) -> str:
        fields = dict(
            image_size=self.image_size, channels=self.channels,
            patch=self.patch, dim=self.dim, heads=self.heads,
            enc_blocks=self.enc_blocks, dec_blocks=self.dec_blocks,
            dec_width=self.dec_width, cluster_h=self.cluster_h,
            cluster_w=self.cluster_w, order=self.order,
            order_seed=self.order_seed, classes=self.classes,
            seg_classes=self.seg_classes, forget_gate=self.forget_gate)
        return "\n".join(f"{k}={fields[k]}" for k in sorted(fields))


@dataclass
class EncoderParams:
    blocks: list[MLSTMBlockParams]
    forget: str = "sigmoid"

    def named(self, prefix: str = "enc"):
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.{i}")


@dataclass
class DecoderBlockParams:
    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for f in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b",
                  "w1", "b1", "w2", "b2"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class DecoderParams:
    mask_token: Tensor
    blocks: list[DecoderBlockParams]
    pred_w: Tensor
    pred_b: Tensor
    in_w: Tensor | None = None  # present only when dec_width != encoder dim
    in_b: Tensor | None = None

    def named(self, prefix: str = "dec"):
        yield f"{prefix}.mask_token", self.mask_token
        if self.in_w is not None:
            yield f"{prefix}.in_w", self.in_w
            yield f"{prefix}.in_b", self.in_b
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.{i}")
        yield f"{prefix}.pred_w", self.pred_w
        yield f"{prefix}.pred_b", self.pred_b


@dataclass
class HeadParams:
    cls_w: Tensor
    cls_b: Tensor
    depth_w: Tensor
    depth_b: Tensor
    seg_w: Tensor
    seg_b: Tensor

    def named(self, prefix: str = "head"):
        for f in ("cls_w", "cls_b", "depth_w", "depth_b", "seg_w", "seg_b"):
            yield f"{prefix}.{f}", getattr(self, f)


@dataclass
class ModelParams:
    config: ModelConfig
    embed_w: Tensor
    pos: Tensor
    encoder: EncoderParams
    decoder: DecoderParams
    heads: HeadParams
    plan: ClusterPlan = field(default=None)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.pos": self.pos}
        out.update(self.encoder.named())
        out.update(self.decoder.named())
        out.update(self.heads.named())
        return out

    def subset(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items()
                if name.startswith(prefixes)}


def _fan_in_std(fan_in: int) -> float:
    return math.sqrt(1.0 / fan_in)


def init_decoder_block(rng: np.random.Generator, width: int, heads: int,
                       dtype=np.float32) -> DecoderBlockParams:
    if width % heads:
        raise DimensionError(f"decoder width {width} not divisible by heads {heads}")
    hidden = 4 * width
    std = _fan_in_std(width)

    def t(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    return DecoderBlockParams(
        heads=heads,
        ln1_g=t(np.ones(width)), ln1_b=t(np.zeros(width)),
        wq=t(rng.normal(0.0, std, (width, width))),
        wk=t(rng.normal(0.0, std, (width, width))),
        wv=t(rng.normal(0.0, std, (width, width))),
        wo=t(rng.normal(0.0, std, (width, width))),
        ln2_g=t(np.ones(width)), ln2_b=t(np.zeros(width)),
        w1=t(rng.normal(0.0, std, (hidden, width))), b1=t(np.zeros(hidden)),
        w2=t(rng.normal(0.0, _fan_in_std(hidden), (width, hidden))),
        b2=t(np.zeros(width)),
    )


def init_model(cfg: ModelConfig, rng: np.random.Generator,
               dtype=np.float32) -> ModelParams:
    if cfg.image_size % cfg.patch:
        raise GeometryError(
            f"image size {cfg.image_size} not divisible by patch {cfg.patch}")
    if cfg.dim % cfg.heads:
        raise DimensionError(f"dim {cfg.dim} not divisible by heads {cfg.heads}")

    def t(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    n = cfg.n_patches
    enc = EncoderParams(
        blocks=[init_mlstm_block(rng, cfg.dim, cfg.heads, cfg.enc_blocks, dtype)
                for _ in range(cfg.enc_blocks)],
        forget=cfg.forget_gate)
    in_w = in_b = None
    if cfg.dec_width != cfg.dim:
        in_w = t(rng.normal(0.0, _fan_in_std(cfg.dim),
                            (cfg.dec_width, cfg.dim)))
        in_b = t(np.zeros(cfg.dec_width))
    dec = DecoderParams(
        mask_token=t(rng.normal(0.0, 0.02, (cfg.dim,))),
        blocks=[init_decoder_block(rng, cfg.dec_width, cfg.heads, dtype)
                for _ in range(cfg.dec_blocks)],
        pred_w=t(rng.normal(0.0, _fan_in_std(cfg.dec_width),
                            (cfg.unit_dim, cfg.dec_width))),
        pred_b=t(np.zeros(cfg.unit_dim)),
        in_w=in_w, in_b=in_b)
    heads = HeadParams(
        cls_w=t(rng.normal(0.0, 0.01, (cfg.classes, 2 * cfg.dim))),
        cls_b=t(np.zeros(cfg.classes)),
        depth_w=t(rng.normal(0.0, _fan_in_std(cfg.dec_width),
                             (cfg.patch * cfg.patch, cfg.dec_width))),
        depth_b=t(np.zeros(cfg.patch * cfg.patch)),
        seg_w=t(rng.normal(0.0, _fan_in_std(cfg.dec_width),
                           (cfg.patch * cfg.patch * cfg.seg_classes,
                            cfg.dec_width))),
        seg_b=t(np.zeros(cfg.patch * cfg.patch * cfg.seg_classes)),
    )
    return ModelParams(
        config=cfg,
        embed_w=t(rng.normal(0.0, _fan_in_std(cfg.patch_dim),
                             (cfg.dim, cfg.patch_dim))),
        pos=t(rng.normal(0.0, 0.02, (n, cfg.dim))),
        encoder=enc, decoder=dec, heads=heads,
        plan=cfg.build_plan())


# -- forward passes -----------------------------------------------------------


def serialized_positions(model: ModelParams) -> Tensor:
    """Positional embeddings reordered to serialized positions (N, D)."""
    return index_select(model.pos, 0, model.plan.perm)


def embed_tokens(model: ModelParams, patches: np.ndarray,
                 visible: np.ndarray | None = None) -> Tensor:
    """Embed a (B, N, P*P*C) batch of raster-order patches.

    Patch content is projected and reordered to serialized positions;
    positional embeddings are indexed by raster location.  When
    ``visible`` is given, hidden positions contribute position only: the
    encoder never sees masked content.
    """
    cfg = model.config
    if patches.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise DimensionError(
            f"expected (B, {cfg.n_patches}, {cfg.patch_dim}) patches, "
            f"got {patches.shape}")
    serial = patches[:, model.plan.perm, :]
    if visible is not None:
        serial = serial * visible.astype(patches.dtype)[None, :, None]
    content = Tensor(serial.astype(model.embed_w.dtype)) @ swapaxes(model.embed_w, 0, 1)
    return add(content, serialized_positions(model))


def encoder_forward(tokens: Tensor, enc: EncoderParams) -> Tensor:
    """Apply the block stack; odd blocks scan forward, even blocks reversed."""
    x = tokens
    for i, blk in enumerate(enc.blocks):
        x = mlstm_block_forward(x, blk, reverse=(i % 2 == 1), forget=enc.forget)
    return x


def _attention(x: Tensor, blk: DecoderBlockParams, mask: AttnMask) -> Tensor:
    b, n, width = x.shape
    h = blk.heads
    dh = width // h

    def heads_view(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, (b, n, h, dh)), 1, 2)

    q = heads_view(x @ swapaxes(blk.wq, 0, 1))
    k = heads_view(x @ swapaxes(blk.wk, 0, 1))
    v = heads_view(x @ swapaxes(blk.wv, 0, 1))
    scores = mul(q @ swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    attn = masked_softmax(scores, mask.m)
    out = reshape(swapaxes(attn @ v, 1, 2), (b, n, width))
    return out @ swapaxes(blk.wo, 0, 1)


def _mlp(x: Tensor, blk: DecoderBlockParams) -> Tensor:
    hidden = gelu(add(x @ swapaxes(blk.w1, 0, 1), blk.b1))
    return add(hidden @ swapaxes(blk.w2, 0, 1), blk.b2)


def decoder_forward(enc_out: Tensor, pos_serial: Tensor, mask: AttnMask,
                    selection: MaskSelection, dec: DecoderParams
                    ) -> tuple[Tensor, Tensor]:
    """Masked-attention reconstruction pass.

    Input at visible positions is the encoder output plus the positional
    embedding; hidden positions get the learned mask token plus position.
    Returns ``(predictions, hidden)``: predictions are the per-position
    projections to the prediction-unit dimension, hidden is the last block
    state feeding the task heads.
    """
    b, n, dim = enc_out.shape
    if mask.n != n:
        raise DimensionError(
            f"mask size {mask.n} does not match sequence length {n}")
    if selection.masked.shape[0] != n:
        raise DimensionError("selection does not match sequence length")
    vis = selection.visible().astype(enc_out.dtype)[:, None]
    hidden_mix = add(mul(enc_out, Tensor(vis)),
                     mul(dec.mask_token, Tensor(1.0 - vis)))
    x = add(hidden_mix, pos_serial)
    if dec.in_w is not None:
        x = add(x @ swapaxes(dec.in_w, 0, 1), dec.in_b)
    for blk in dec.blocks:
        x = add(x, _attention(layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS), blk, mask))
        x = add(x, _mlp(layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS), blk))
    hidden = x
    preds = add(hidden @ swapaxes(dec.pred_w, 0, 1), dec.pred_b)
    assert_finite(preds, "decoder predictions")
    return preds, hidden


def classify_head(enc_out: Tensor, heads: HeadParams) -> Tensor:
    """Class logits from the first and last serialized tokens."""
    b, n, dim = enc_out.shape
    if n < 2:
        raise GeometryError("classification needs at least two tokens")
    first = enc_out[:, 0, :]
    last = enc_out[:, n - 1, :]
    feats = concat([first, last], axis=-1)
    return add(feats @ swapaxes(heads.cls_w, 0, 1), heads.cls_b)


def depth_head(dec_hidden: Tensor, heads: HeadParams) -> Tensor:
    """Per-token depth pixels (B, N, P*P), still in serialized order."""
    return add(dec_hidden @ swapaxes(heads.depth_w, 0, 1), heads.depth_b)


def seg_head(dec_hidden: Tensor, heads: HeadParams, seg_classes: int) -> Tensor:
    """Per-token, per-pixel segmentation logits (B, N, P*P, K_seg)."""
    b, n, _ = dec_hidden.shape
    flat = add(dec_hidden @ swapaxes(heads.seg_w, 0, 1), heads.seg_b)
    return reshape(flat, (b, n, flat.shape[-1] // seg_classes, seg_classes))
