"""Self-, cross- and anchor-primary attention blocks over token sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import FeatureMap
from .numerics import ParameterRegistry, ShapeError, Tensor

PROVENANCES = ("concat-anchors", "branch-1", "branch-2", "primary-features")


@dataclass
class AttentionConfig:
    heads: int = 8
    model_dim: int = 32
    mlp_ratio: int = 2
    depth: int = 1
    eps: float = 1e-5

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.model_dim

    def validate(self) -> None:
        if self.heads < 1 or self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} must be divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class TokenSequence:
    tokens: Tensor
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"token sequences are n x C with n >= 1, got {self.tokens.shape}")

    def __len__(self) -> int:
        return self.tokens.shape[0]


# -- kernels ------------------------------------------------------------------


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] < 1:
        raise ShapeError("attention needs at least one key")
    scale = 1.0 / math.sqrt(q.shape[-1])
    return nx.softmax_rows(nx.mul(nx.matmul(q, nx.transpose(k, _swap_last(k.ndim))), scale))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys and values differ in length: {k.shape} vs {v.shape}")
    return nx.matmul(attention_weights(q, k), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -- parameters ---------------------------------------------------------------


def _init_mha(reg, prefix, c, rng):
    std = 1.0 / math.sqrt(c)
    for name in ("wq", "wk", "wv", "wo"):
        reg.add(f"{prefix}.{name}", rng.standard_normal((c, c)) * std)
    reg.add(f"{prefix}.bo", np.zeros(c))


def _init_ln(reg, prefix, c):
    reg.add(f"{prefix}.g", np.ones(c))
    reg.add(f"{prefix}.b", np.zeros(c))


def _init_mlp(reg, prefix, c, hidden, rng):
    reg.add(f"{prefix}.w1", rng.standard_normal((c, hidden)) * math.sqrt(2.0 / c))
    reg.add(f"{prefix}.b1", np.zeros(hidden))
    reg.add(f"{prefix}.w2", rng.standard_normal((hidden, c)) / math.sqrt(hidden))
    reg.add(f"{prefix}.b2", np.zeros(c))


def init_block(reg: ParameterRegistry, prefix: str, cfg: AttentionConfig, rng: np.random.Generator, pe_len: int = 0):
    """Register one PreNorm attention + MLP block (optionally with a learned PE table)."""
    c = cfg.model_dim
    if pe_len:
        reg.add(f"{prefix}.pe", rng.standard_normal((pe_len, c)) * 0.02)
    _init_ln(reg, f"{prefix}.ln1", c)
    _init_mha(reg, f"{prefix}.attn", c, rng)
    _init_ln(reg, f"{prefix}.ln2", c)
    _init_mlp(reg, f"{prefix}.mlp", c, cfg.mlp_hidden, rng)


def init_attention(reg: ParameterRegistry, cfg: AttentionConfig, num_anchors: int, rng: np.random.Generator):
    cfg.validate()
    for d in range(cfg.depth):
        init_block(reg, f"sa{d}", cfg, rng, pe_len=2 * num_anchors if d == 0 else 0)
    for d in range(cfg.depth):
        init_block(reg, f"ca{d}", cfg, rng)
    init_block(reg, "apa", cfg, rng)


# -- building blocks ----------------------------------------------------------


def _ln(x, reg, prefix, eps):
    return nx.layer_norm(x, reg[f"{prefix}.g"], reg[f"{prefix}.b"], eps)


def _mlp(x, reg, prefix):
    h = nx.gelu(nx.add(nx.matmul(x, reg[f"{prefix}.w1"]), reg[f"{prefix}.b1"]))
    return nx.add(nx.matmul(h, reg[f"{prefix}.w2"]), reg[f"{prefix}.b2"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return nx.transpose(nx.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def multi_head(q_in: Tensor, k_in: Tensor, v_in: Tensor, reg: ParameterRegistry, prefix: str, heads: int) -> Tensor:
    c = q_in.shape[1]
    if c % heads:
        raise ValueError(f"model width {c} not divisible by {heads} heads")
    q = _split_heads(nx.matmul(q_in, reg[f"{prefix}.wq"]), heads)
    k = _split_heads(nx.matmul(k_in, reg[f"{prefix}.wk"]), heads)
    v = _split_heads(nx.matmul(v_in, reg[f"{prefix}.wv"]), heads)
    o = scaled_dot_attention(q, k, v)  # heads x m x d
    o = nx.reshape(nx.transpose(o, (1, 0, 2)), (q_in.shape[0], c))
    return nx.add(nx.matmul(o, reg[f"{prefix}.wo"]), reg[f"{prefix}.bo"])


def prenorm_block(x: Tensor, ctx: Tensor | None, reg: ParameterRegistry, prefix: str, cfg: AttentionConfig) -> Tensor:
    """``x + MHA(LN(x), LN(ctx))`` then ``+ MLP(LN(.))``; ``ctx=None`` means self-attention."""
    q = _ln(x, reg, f"{prefix}.ln1", cfg.eps)
    kv = q if ctx is None else _ln(ctx, reg, f"{prefix}.ln1", cfg.eps)
    x = nx.add(x, multi_head(q, kv, kv, reg, f"{prefix}.attn", cfg.heads))
    return nx.add(x, _mlp(_ln(x, reg, f"{prefix}.ln2", cfg.eps), reg, f"{prefix}.mlp"))


# -- pipeline stages ----------------------------------------------------------


def transformer_block(
    t: TokenSequence, reg: ParameterRegistry, cfg: AttentionConfig, use_pe: bool = True
) -> TokenSequence:
    """Self-attention over the concatenated anchors ``T1 || T2`` (PE added first)."""
    x = t.tokens
    if use_pe:
        pe = reg["sa0.pe"]
        if pe.shape[0] != x.shape[0]:
            raise ShapeError(f"PE table has {pe.shape[0]} slots, sequence has {x.shape[0]}")
        x = nx.add(x, pe)
    for d in range(cfg.depth):
        x = prenorm_block(x, None, reg, f"sa{d}", cfg)
    return TokenSequence(x, "concat-anchors")


def split_halves(t: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
    n = len(t)
    if n % 2:
        raise ShapeError(f"cannot split an odd-length sequence ({n})")
    return (
        TokenSequence(nx.slice_rows(t.tokens, 0, n // 2), "branch-1"),
        TokenSequence(nx.slice_rows(t.tokens, n // 2, n), "branch-2"),
    )


def cross_attention_exchange(
    t1s: TokenSequence, t2s: TokenSequence, reg: ParameterRegistry, cfg: AttentionConfig
) -> tuple[TokenSequence, TokenSequence]:
    """Each branch's tokens query the other branch's tokens, in both directions."""
    if len(t1s) != len(t2s) or t1s.tokens.shape[1] != t2s.tokens.shape[1]:
        raise ShapeError(f"branch token sets differ: {t1s.tokens.shape} vs {t2s.tokens.shape}")
    a, b = t1s.tokens, t2s.tokens
    for d in range(cfg.depth):
        a, b = prenorm_block(a, b, reg, f"ca{d}", cfg), prenorm_block(b, a, reg, f"ca{d}", cfg)
    return TokenSequence(a, "branch-1"), TokenSequence(b, "branch-2")


def anchor_primary_block(x: FeatureMap, t: TokenSequence, reg: ParameterRegistry, cfg: AttentionConfig) -> Tensor:
    """All HW pixel features query the same-branch anchors; returns HW x C."""
    if t.provenance != f"branch-{x.source_id}":
        raise ValueError(f"feature map from branch {x.source_id} paired with {t.provenance} tokens")
    h, w, c = x.data.shape
    q = nx.reshape(x.data, (h * w, c))
    return prenorm_block(q, t.tokens, reg, "apa", cfg)
