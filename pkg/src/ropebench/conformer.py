"""Conformer encoder blocks built on the attention module.

Block layout (macaron style): x + FFN/2, + MHSA, + conv module, + FFN/2,
then a final layer norm.  The conv module is pointwise expand + GLU,
depthwise conv, layer norm (standing in for batch norm), swish, pointwise
project.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tc
from .attention import (
    AttentionMask,
    AttentionParams,
    PEScheme,
    SCHEMES,
    StageTimer,
    init_attention,
    mhsa,
    uniform_init,
)
from .errors import ConfigError, ShapeError
from .posemb import DEFAULT_BASE, build_rope_cache, relpos_table
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ConformerConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 31
    scheme: str = "rotary"
    theta_base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown positional scheme {self.scheme!r}")
        if self.scheme == "rotary" and self.head_dim % 2:
            raise ConfigError(f"rotary scheme needs an even head dimension, got {self.head_dim}")
        if self.scheme == "absolute" and self.d_model % 2:
            raise ConfigError(f"absolute scheme needs an even d_model, got {self.d_model}")
        if not self.theta_base > 0:
            raise ConfigError(f"theta base must be positive, got {self.theta_base}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class _Params:
    """Mixin yielding named leaf tensors, recursing into nested parameter groups."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            v = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(v, Tensor):
                yield name, v
            elif isinstance(v, _Params):
                yield from v.named_parameters(name + ".")
            elif isinstance(v, AttentionParams):
                for i, p in enumerate(v.parameters()):
                    yield f"{name}.{_ATTN_NAMES[i]}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


_ATTN_NAMES = ("w_q", "w_k", "w_v", "w_o", "u_bias", "v_bias", "pos_proj")


@dataclass(eq=False)
class FeedForwardParams(_Params):
    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(eq=False)
class ConvModuleParams(_Params):
    ln_gain: Tensor
    ln_bias: Tensor
    pw1: Tensor
    pw1_b: Tensor
    dw: Tensor
    dw_b: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    pw2: Tensor
    pw2_b: Tensor


@dataclass(eq=False)
class ConformerBlockParams(_Params):
    ffn1: FeedForwardParams
    attn_ln_gain: Tensor
    attn_ln_bias: Tensor
    attn: AttentionParams
    conv: ConvModuleParams
    ffn2: FeedForwardParams
    out_gain: Tensor
    out_bias: Tensor

    @property
    def d_model(self) -> int:
        return self.attn.d_model


def _norm(d: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True)


def _ffn(rng, d: int, hidden: int, zero: bool) -> FeedForwardParams:
    g, b = _norm(d)
    return FeedForwardParams(
        g,
        b,
        uniform_init(rng, (d, hidden), d, zero),
        uniform_init(rng, (hidden,), d, zero),
        uniform_init(rng, (hidden, d), hidden, zero),
        uniform_init(rng, (d,), hidden, zero),
    )


def _conv(rng, d: int, kernel: int, zero: bool) -> ConvModuleParams:
    g, b = _norm(d)
    ng, nb = _norm(d)
    return ConvModuleParams(
        g,
        b,
        uniform_init(rng, (d, 2 * d), d, zero),
        uniform_init(rng, (2 * d,), d, zero),
        uniform_init(rng, (kernel, d), kernel, zero),
        uniform_init(rng, (d,), kernel, zero),
        ng,
        nb,
        uniform_init(rng, (d, d), d, zero),
        uniform_init(rng, (d,), d, zero),
    )


def init_block(
    config: ConformerConfig,
    rng: np.random.Generator,
    max_len: int = 1,
    *,
    zero: bool = False,
    pos_emb: np.ndarray | None = None,
) -> ConformerBlockParams:
    """One block of parameters.  ``zero`` zeroes every non-norm weight."""
    d = config.d_model
    rel = config.scheme == "relative"
    ffn1 = _ffn(rng, d, d * config.ffn_expansion, zero)
    ag, ab = _norm(d)
    attn = init_attention(d, config.n_heads, rng, zero=zero)
    conv = _conv(rng, d, config.conv_kernel, zero)
    ffn2 = _ffn(rng, d, d * config.ffn_expansion, zero)
    og, ob = _norm(d)
    if rel:
        # Drawn last so the shared weights are identical across schemes.
        rp = init_attention(
            d, config.n_heads, rng, relative=True, max_len=max_len,
            base=config.theta_base, zero=zero, pos_emb=pos_emb,
        ).relpos
        attn = AttentionParams(attn.n_heads, attn.w_q, attn.w_k, attn.w_v, attn.w_o, relpos=rp)
    return ConformerBlockParams(ffn1, ag, ab, attn, conv, ffn2, og, ob)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    h = tc.layernorm(x, p.ln_gain, p.ln_bias, LN_EPS)
    h = tc.swish(tc.add_bias(tc.matmul(h, p.w1), p.b1))
    return tc.add_bias(tc.matmul(h, p.w2), p.b2)


def conv_module(x: Tensor, p: ConvModuleParams, causal: bool) -> Tensor:
    """Convolution module; ``causal`` pads only on the left so no frame sees the future."""
    K = p.dw.shape[0]
    left, right = (K - 1, 0) if causal else ((K - 1) // 2, (K - 1) // 2)
    h = tc.layernorm(x, p.ln_gain, p.ln_bias, LN_EPS)
    h = tc.glu(tc.add_bias(tc.matmul(h, p.pw1), p.pw1_b))
    h = tc.add_bias(tc.depthwise_conv1d(h, p.dw, left, right), p.dw_b)
    h = tc.swish(tc.layernorm(h, p.norm_gain, p.norm_bias, LN_EPS))
    return tc.add_bias(tc.matmul(h, p.pw2), p.pw2_b)


def conformer_block(
    x: Tensor,
    params: ConformerBlockParams,
    mask: AttentionMask | None,
    scheme: PEScheme,
    start_pos: int = 0,
    profile: StageTimer | None = None,
) -> Tensor:
    """Apply one Conformer block to ``x`` [T x d_model].

    A mask that denies anything switches the convolution to left-only
    padding; a full (or absent) mask uses symmetric padding.
    """
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise ShapeError(f"conformer_block: input {x.shape} for d_model={params.d_model}")
    causal = mask is not None and not mask.is_full
    x = tc.add(x, tc.scale(feed_forward(x, params.ffn1), 0.5))
    h = tc.layernorm(x, params.attn_ln_gain, params.attn_ln_bias, LN_EPS)
    x = tc.add(x, mhsa(h, params.attn, scheme, mask, start_pos, profile))
    x = tc.add(x, conv_module(x, params.conv, causal))
    x = tc.add(x, tc.scale(feed_forward(x, params.ffn2), 0.5))
    return tc.layernorm(x, params.out_gain, params.out_bias, LN_EPS)


@dataclass(eq=False)
class Encoder:
    config: ConformerConfig
    scheme: PEScheme
    layers: list[ConformerBlockParams]
    max_len: int

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}.")


def make_scheme(config: ConformerConfig, max_len: int) -> PEScheme:
    if config.scheme == "rotary":
        return PEScheme.rotary(build_rope_cache(max_len, config.head_dim, config.theta_base))
    if config.scheme == "absolute":
        return PEScheme.absolute(config.theta_base)
    if config.scheme == "relative":
        return PEScheme.relative(config.theta_base)
    return PEScheme.none()


def init_encoder(config: ConformerConfig, max_len: int, seed: int = 0, *, zero: bool = False) -> Encoder:
    """Deterministically initialise ``config.n_layers`` blocks for sequences up to ``max_len``."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    children = np.random.SeedSequence(seed).spawn(config.n_layers)
    pos_emb = relpos_table(max_len, config.d_model, config.theta_base) if config.scheme == "relative" else None
    layers = [
        init_block(config, np.random.default_rng(ss), max_len, zero=zero, pos_emb=pos_emb) for ss in children
    ]
    return Encoder(config, make_scheme(config, max_len), layers, max_len)


def encoder_forward(
    x: Tensor,
    encoder: Encoder,
    mask: AttentionMask | None = None,
    start_pos: int = 0,
    profile: StageTimer | None = None,
) -> Tensor:
    for layer in encoder.layers:
        x = conformer_block(x, layer, mask, encoder.scheme, start_pos, profile)
    return x


def count_parameters(encoder: Encoder) -> int:
    return sum(p.size for p in encoder.parameters())


def pe_parameter_count(encoder: Encoder) -> int:
    """Trainable parameters that exist only to encode position."""
    return sum(
        p.size for layer in encoder.layers if layer.attn.relpos is not None for p in layer.attn.relpos.parameters()
    )
