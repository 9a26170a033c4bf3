"""Concept-attention classifier head.

A fixed set of concept slots binds to input features through competitive
attention (softmax across slots) refined by a GRU, then the input features
read the slots back through cross-attention to produce class logits. The
logits decompose exactly into per-concept relevance times per-concept class
scores, so the attention map is the explanation of the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

__all__ = [
    "VARIANTS",
    "PATHWAYS",
    "default_iters",
    "HeadConfig",
    "SlotAttentionParams",
    "CrossAttentionParams",
    "PathwayParams",
    "HeadParams",
    "HeadOutput",
    "init_slot_params",
    "init_cross_params",
    "init_head_params",
    "init_slots",
    "slot_attention",
    "gru_update",
    "refine_slots",
    "cross_attention",
    "relevance",
    "decomposed_logits",
    "multi_head_cross_attention",
    "dual_pathway_forward",
    "head_forward",
    "class_token",
]

VARIANTS = ("sa", "isa", "boqsa")
PATHWAYS = ("spatial", "global", "dual")


def default_iters(variant: str) -> int:
    """Refinement iterations: 1 for sampled-init slots, 3 for isa/boqsa."""
    return 1 if variant == "sa" else 3


@dataclass(frozen=True)
class HeadConfig:
    """Shapes and behavior switches for one head.

    identity_mode skips the input/slot layer norms and all q/k/v projections
    (requires input_dim == slot_dim); it exists so that hand-computed
    attention values are exact in tests.
    """

    concepts: int                  # C
    slot_dim: int                  # d
    input_dim: int                 # D
    n_inputs: int                  # L (rows per spatial sample)
    n_classes: int
    iters: int | None = None       # T; defaults per variant
    variant: str = "sa"
    heads: int = 1
    pathway: str = "spatial"
    identity_mode: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pathway not in PATHWAYS:
            raise ConfigError(f"unknown pathway {self.pathway!r}; expected one of {PATHWAYS}")
        if self.iters is None:
            object.__setattr__(self, "iters", default_iters(self.variant))
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if min(self.concepts, self.slot_dim, self.input_dim, self.n_inputs, self.n_classes) < 1:
            raise ConfigError("all head dimensions must be positive")
        if self.slot_dim % self.heads != 0:
            raise ConfigError(f"slot_dim {self.slot_dim} not divisible by heads {self.heads}")
        if self.identity_mode and self.input_dim != self.slot_dim:
            raise ConfigError("identity_mode requires input_dim == slot_dim")


@dataclass
class SlotAttentionParams:
    """Learnable state of the slot-binding stage."""

    wq: Tensor                 # (d, d) slot query projection
    wk: Tensor                 # (D, d) input key projection
    wv: Tensor                 # (D, d) input value projection
    mu: Tensor                 # (1, d) slot init mean
    log_sigma: Tensor          # (1, d) slot init scale, stored as log for positivity
    init_queries: Tensor | None  # (C, d), boqsa only
    wz: Tensor; uz: Tensor; bz: Tensor   # GRU update gate
    wr: Tensor; ur: Tensor; br: Tensor   # GRU reset gate
    wh: Tensor; uh: Tensor; bh: Tensor   # GRU candidate
    ln_input_gain: Tensor      # (1, D)
    ln_input_bias: Tensor      # (1, D)
    ln_slot_gain: Tensor       # (1, d)
    ln_slot_bias: Tensor       # (1, d)
    positions: Tensor          # (C, d) slot positional embeddings

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


@dataclass
class CrossAttentionParams:
    """Learnable state of the readback stage."""

    wq: Tensor   # (D, d) input query projection
    wk: Tensor   # (d, d) slot key projection
    wv: Tensor   # (d, d) slot value projection
    out: Tensor  # (d, n_classes) output matrix

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class PathwayParams:
    slot: SlotAttentionParams
    cross: CrossAttentionParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.slot.named():
            yield f"slot.{name}", t
        for name, t in self.cross.named():
            yield f"cross.{name}", t


@dataclass
class HeadParams:
    """Per-pathway parameter sets; only the configured pathways are present."""

    spatial: PathwayParams | None = None
    global_: PathwayParams | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        if self.spatial is not None:
            for name, t in self.spatial.named():
                yield f"spatial.{name}", t
        if self.global_ is not None:
            for name, t in self.global_.named():
                yield f"global.{name}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def reset_grads(self) -> None:
        for t in self.tensors():
            t.reset_grad()


@dataclass
class HeadOutput:
    """One forward pass: logits plus the attention maps used as explanations."""

    logits: Tensor                    # (n_classes,)
    attn_spatial: Tensor | None = None  # (L, C), head-averaged
    attn_global: Tensor | None = None   # (1, C), head-averaged

    def maps(self) -> list[Tensor]:
        return [a for a in (self.attn_spatial, self.attn_global) if a is not None]


def _param(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(rows, cols)), requires_grad=True)


def init_slot_params(cfg: HeadConfig, rng: np.random.Generator,
                     sigma: float = 1.0) -> SlotAttentionParams:
    if sigma <= 0.0:
        raise ConfigError(f"slot init scale must be positive, got {sigma}")
    c, d, dim_in = cfg.concepts, cfg.slot_dim, cfg.input_dim
    init_queries = None
    if cfg.variant == "boqsa":
        init_queries = Tensor(rng.normal(0.0, 1.0, size=(c, d)), requires_grad=True)
    return SlotAttentionParams(
        wq=_param(rng, d, d, d),
        wk=_param(rng, dim_in, d, dim_in),
        wv=_param(rng, dim_in, d, dim_in),
        mu=Tensor(rng.normal(0.0, 1.0, size=(1, d)), requires_grad=True),
        log_sigma=Tensor(np.full((1, d), np.log(sigma)), requires_grad=True),
        init_queries=init_queries,
        wz=_param(rng, d, d, d), uz=_param(rng, d, d, d),
        bz=Tensor(np.zeros((1, d)), requires_grad=True),
        wr=_param(rng, d, d, d), ur=_param(rng, d, d, d),
        br=Tensor(np.zeros((1, d)), requires_grad=True),
        wh=_param(rng, d, d, d), uh=_param(rng, d, d, d),
        bh=Tensor(np.zeros((1, d)), requires_grad=True),
        ln_input_gain=Tensor(np.ones((1, dim_in)), requires_grad=True),
        ln_input_bias=Tensor(np.zeros((1, dim_in)), requires_grad=True),
        ln_slot_gain=Tensor(np.ones((1, d)), requires_grad=True),
        ln_slot_bias=Tensor(np.zeros((1, d)), requires_grad=True),
        positions=Tensor(rng.normal(0.0, 1.0, size=(c, d)), requires_grad=True),
    )


def init_cross_params(cfg: HeadConfig, rng: np.random.Generator) -> CrossAttentionParams:
    d, dim_in = cfg.slot_dim, cfg.input_dim
    return CrossAttentionParams(
        wq=_param(rng, dim_in, d, dim_in),
        wk=_param(rng, d, d, d),
        wv=_param(rng, d, d, d),
        out=_param(rng, d, cfg.n_classes, d),
    )


def init_head_params(cfg: HeadConfig, rng: np.random.Generator) -> HeadParams:
    """Draw all parameters for the configured pathways, spatial first."""
    params = HeadParams()
    if cfg.pathway in ("spatial", "dual"):
        params.spatial = PathwayParams(init_slot_params(cfg, rng), init_cross_params(cfg, rng))
    if cfg.pathway in ("global", "dual"):
        params.global_ = PathwayParams(init_slot_params(cfg, rng), init_cross_params(cfg, rng))
    return params


def init_slots(p: SlotAttentionParams, cfg: HeadConfig, rng: np.random.Generator) -> Tensor:
    """Initial slot matrix (C, d): sampled mu + sigma*eps, or learned queries for boqsa."""
    if cfg.variant == "boqsa":
        if p.init_queries is None:
            raise ConfigError("boqsa variant requires init_queries")
        return p.init_queries
    if np.any(p.sigma <= 0.0):
        raise ConfigError("slot init scale must be positive")
    eps = Tensor(rng.standard_normal((cfg.concepts, cfg.slot_dim)))
    return ad.add(ad.mul(eps, ad.exp(p.log_sigma)), p.mu)


def slot_attention(inputs: Tensor, slots: Tensor, p: SlotAttentionParams,
                   cfg: HeadConfig) -> tuple[Tensor, Tensor]:
    """Competitive attention of slots over input features.

    inputs must already be layer-normalized (the caller owns that step);
    slots are the current, already-normalized slot matrix. Scores are
    softmaxed across slots so the slots compete per input column, then each
    slot row is renormalized over inputs to a weighted mean. Returns the
    renormalized attention (C, L) and the per-slot readout (C, d).
    """
    if cfg.identity_mode:
        q, k, v = slots, inputs, inputs
    else:
        q = ad.matmul(slots, p.wq)
        k = ad.matmul(inputs, p.wk)
        v = ad.matmul(inputs, p.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.slot_dim))  # (C, L)
    attn = ad.row_normalize(ad.softmax_axis(scores, axis=0))
    return attn, ad.matmul(attn, v)


def gru_update(slots: Tensor, readout: Tensor, p: SlotAttentionParams) -> Tensor:
    """One GRU step per slot row; readout is the input, slots the hidden state."""
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(readout, p.wz), ad.matmul(slots, p.uz)), p.bz))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(readout, p.wr), ad.matmul(slots, p.ur)), p.br))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(readout, p.wh),
                                 ad.matmul(ad.mul(r, slots), p.uh)), p.bh))
    # (1 - z) * slots + z * cand
    return ad.add(slots, ad.mul(z, ad.sub(cand, slots)))


def refine_slots(e_raw: Tensor, p: SlotAttentionParams, cfg: HeadConfig,
                 rng: np.random.Generator) -> Tensor:
    """Full slot-binding pass: init, iterate attention+GRU, add slot positions.

    The isa variant blocks gradient flow through the slot state right before
    the final iteration; forward values are identical to sa.
    """
    if cfg.iters < 1:
        raise ConfigError(f"iters must be >= 1, got {cfg.iters}")
    if e_raw.data.ndim != 2 or e_raw.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected inputs (*, {cfg.input_dim}), got {e_raw.shape}")
    if cfg.identity_mode:
        inputs = e_raw
    else:
        inputs = ad.layer_norm(e_raw, p.ln_input_gain, p.ln_input_bias)
    slots = init_slots(p, cfg, rng)
    for it in range(cfg.iters):
        if cfg.variant == "isa" and it == cfg.iters - 1:
            slots = ad.detach(slots)
        if not cfg.identity_mode:
            slots = ad.layer_norm(slots, p.ln_slot_gain, p.ln_slot_bias)
        _, readout = slot_attention(inputs, slots, p, cfg)
        slots = gru_update(slots, readout, p)
    return ad.add(slots, p.positions)


def cross_attention(e_raw: Tensor, slots: Tensor, p: CrossAttentionParams,
                    cfg: HeadConfig) -> tuple[Tensor, Tensor]:
    """Single-head readback: inputs query the refined slots.

    Attention is softmaxed across concepts per input row, so each row of the
    returned (L, C) map sums to 1. Logits average the per-row class scores
    over input rows.
    """
    if cfg.identity_mode:
        q, k, v = e_raw, slots, slots
    else:
        q = ad.matmul(e_raw, p.wq)
        k = ad.matmul(slots, p.wk)
        v = ad.matmul(slots, p.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.slot_dim))  # (L, C)
    attn = ad.softmax_axis(scores, axis=1)
    logits = ad.reduce_mean_axis(ad.matmul(ad.matmul(attn, v), p.out), axis=0)
    return attn, logits


def relevance(attn: Tensor) -> Tensor:
    """Per-concept relevance: column means of a row-stochastic (L, C) map."""
    return ad.reduce_mean_axis(attn, axis=0)


def decomposed_logits(slots: Tensor, p: CrossAttentionParams, rel: Tensor,
                      cfg: HeadConfig) -> Tensor:
    """Logits as relevance-weighted per-concept class scores.

    Equals the cross_attention logits up to floating rounding; that identity
    is what makes the relevance scores a faithful explanation.
    """
    v = slots if cfg.identity_mode else ad.matmul(slots, p.wv)
    beta = ad.matmul(v, p.out)  # (C, n_classes)
    return ad.vecmat(rel, beta)


def multi_head_cross_attention(e_raw: Tensor, slots: Tensor, p: CrossAttentionParams,
                               cfg: HeadConfig) -> tuple[Tensor, Tensor]:
    """Readback with cfg.heads parallel heads over contiguous d/h blocks.

    Per-head outputs are concatenated along features before the output
    matrix; the exported explanation map is the mean of the per-head maps.
    """
    h = cfg.heads
    if cfg.slot_dim % h != 0:
        raise ConfigError(f"slot_dim {cfg.slot_dim} not divisible by heads {h}")
    if cfg.identity_mode:
        q_full, k_full, v_full = e_raw, slots, slots
    else:
        q_full = ad.matmul(e_raw, p.wq)
        k_full = ad.matmul(slots, p.wk)
        v_full = ad.matmul(slots, p.wv)
    dh = cfg.slot_dim // h
    outs, attns = [], []
    for j in range(h):
        lo, hi = j * dh, (j + 1) * dh
        q = ad.slice_cols(q_full, lo, hi)
        k = ad.slice_cols(k_full, lo, hi)
        v = ad.slice_cols(v_full, lo, hi)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
        attn = ad.softmax_axis(scores, axis=1)
        attns.append(attn)
        outs.append(ad.matmul(attn, v))
    merged = outs[0] if h == 1 else ad.concat_cols(outs)
    logits = ad.reduce_mean_axis(ad.matmul(merged, p.out), axis=0)
    mean_attn = attns[0]
    for attn in attns[1:]:
        mean_attn = ad.add(mean_attn, attn)
    if h > 1:
        mean_attn = ad.scale(mean_attn, 1.0 / h)
    return mean_attn, logits


def class_token(e_raw: Tensor) -> Tensor:
    """Whole-input embedding for the global pathway: the mean feature row."""
    return Tensor(e_raw.data.mean(axis=0, keepdims=True))


def dual_pathway_forward(e_patches: Tensor, e_cls: Tensor, spatial: PathwayParams,
                         global_: PathwayParams, cfg: HeadConfig,
                         rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Run both pathways and average their logits.

    The spatial pathway consumes the (L, D) feature rows, the global pathway
    a single (1, D) embedding. Slot sampling draws spatial first, then
    global, from the one generator.
    """
    slots_s = refine_slots(e_patches, spatial.slot, cfg, rng)
    attn_s, logits_s = multi_head_cross_attention(e_patches, slots_s, spatial.cross, cfg)
    slots_g = refine_slots(e_cls, global_.slot, cfg, rng)
    attn_g, logits_g = multi_head_cross_attention(e_cls, slots_g, global_.cross, cfg)
    logits = ad.scale(ad.add(logits_s, logits_g), 0.5)
    return logits, attn_s, attn_g


def head_forward(e_raw: Tensor, params: HeadParams, cfg: HeadConfig,
                 rng: np.random.Generator) -> HeadOutput:
    """Forward one sample through the configured pathway(s)."""
    if cfg.pathway == "spatial":
        slots = refine_slots(e_raw, params.spatial.slot, cfg, rng)
        attn, logits = multi_head_cross_attention(e_raw, slots, params.spatial.cross, cfg)
        return HeadOutput(logits=logits, attn_spatial=attn)
    if cfg.pathway == "global":
        e_cls = class_token(e_raw)
        slots = refine_slots(e_cls, params.global_.slot, cfg, rng)
        attn, logits = multi_head_cross_attention(e_cls, slots, params.global_.cross, cfg)
        return HeadOutput(logits=logits, attn_global=attn)
    logits, attn_s, attn_g = dual_pathway_forward(
        e_raw, class_token(e_raw), params.spatial, params.global_, cfg, rng)
    return HeadOutput(logits=logits, attn_spatial=attn_s, attn_global=attn_g)
