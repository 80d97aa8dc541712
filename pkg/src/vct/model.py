"""Model configuration, parameter construction and the end-to-end forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionConfig,
    TokenSequence,
    anchor_primary_block,
    cross_attention_exchange,
    init_attention,
    split_halves,
    transformer_block,
)
from .backbone import EncoderConfig, FeatureMap, encode, init_encoder
from .head import ChangeLogits, GroundTruth, bce_loss, decode, difference_features, init_head
from .numerics import ParameterRegistry, ShapeError, Tensor, ops
from .rtm import RTMConfig, RTMOutput, gcn_weights, init_gcn, mine_reliable_tokens, uniform_tokens


@dataclass
class Ablation:
    use_rtm: bool = True
    use_te: bool = True
    use_td: bool = True

    def label(self) -> str:
        on = [n for n, v in (("RTM", self.use_rtm), ("TE", self.use_te), ("TD", self.use_td)) if v]
        return "+".join(on) if on else "backbone-only"


@dataclass
class ModelConfig:
    channels: list = field(default_factory=lambda: [16, 32, 32])
    out_channels: int = 32
    k: int = 1000
    l: int = 10  # noqa: E741
    gnn_layers: int = 1
    knn: int = 8
    kmeans_iters: int = 50
    kmeans_restarts: int = 10
    heads: int = 8
    depth: int = 1
    mlp_ratio: int = 2
    aux_gcn: bool = False
    aux_weight: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(list(self.channels), self.out_channels)

    @property
    def rtm(self) -> RTMConfig:
        return RTMConfig(self.k, self.l, self.gnn_layers, self.knn, self.seed, self.kmeans_iters,
                         self.aux_gcn, self.aux_weight, self.kmeans_restarts)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.out_channels, self.mlp_ratio, self.depth)

    @property
    def downsample_factor(self) -> int:
        return self.encoder.downsample_factor

    def validate(self) -> None:
        self.encoder.validate()
        self.rtm.validate()
        self.attention.validate()
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ForwardOutput:
    x1: FeatureMap
    x2: FeatureMap
    rtm: RTMOutput | None
    t1: Tensor
    t2: Tensor
    t1s: Tensor | None
    t2s: Tensor | None
    t1t: Tensor
    t2t: Tensor
    x1p: Tensor
    x2p: Tensor
    d: Tensor
    out: ChangeLogits


class VcT:
    """Parameters plus the forward pass for one ablation setting."""

    def __init__(self, cfg: ModelConfig, ablation: Ablation | None = None):
        cfg.validate()
        self.cfg = cfg
        self.ablation = ablation or Ablation()
        self.params = ParameterRegistry(np.dtype(cfg.dtype))
        seq = np.random.SeedSequence(cfg.seed)
        rngs = [np.random.default_rng(s) for s in seq.spawn(4)]
        init_encoder(self.params, cfg.encoder, rngs[0])
        if self.ablation.use_rtm:
            init_gcn(self.params, cfg.out_channels, cfg.gnn_layers, rngs[1])
        if self.ablation.use_te or self.ablation.use_td:
            init_attention(self.params, cfg.attention, cfg.l, rngs[2])
        init_head(self.params, cfg.out_channels, rngs[3])

    def trainable_names(self) -> list[str]:
        """Parameters on the loss path for this ablation."""
        skip = []
        if not (self.ablation.use_rtm and self.cfg.aux_gcn):
            skip.append("gcn.")
        if not self.ablation.use_td:
            skip += ["sa", "ca", "apa"]
        elif not self.ablation.use_te:
            skip += ["sa", "ca"]
        return [n for n in self.params.names() if not any(n.startswith(s) for s in skip)]

    def trainable(self) -> list[Tensor]:
        return [self.params[n] for n in self.trainable_names()]

    def forward(self, a, b) -> ForwardOutput:
        return forward_pipeline(a, b, self)

    def predict(self, a, b) -> ChangeLogits:
        return self.forward(a, b).out

    def loss(self, fwd: ForwardOutput, label) -> Tensor:
        gt = label if isinstance(label, GroundTruth) else GroundTruth.from_mask(label)
        loss = bce_loss(gt, fwd.out)
        if self.cfg.aux_gcn and fwd.rtm is not None:
            loss = nx.add(loss, nx.mul(coarse_bce(fwd.rtm.p.data, gt.labels, self.downsample_factor),
                                       self.cfg.aux_weight))
        return loss

    @property
    def downsample_factor(self) -> int:
        return self.cfg.downsample_factor


def _as_image(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def forward_pipeline(a, b, model: VcT) -> ForwardOutput:
    """encode x2 -> tokens -> (self + cross attention) -> (anchor-primary attention) -> head."""
    cfg, reg, abl = model.cfg, model.params, model.ablation
    a, b = _as_image(a, reg.dtype), _as_image(b, reg.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"image pair differs in shape: {a.shape} vs {b.shape}")
    x1 = encode(a, reg, cfg.encoder, source_id=1)
    x2 = encode(b, reg, cfg.encoder, source_id=2)
    h, w, c = x1.shape

    rtm_out = None
    if abl.use_rtm:
        rtm_out = mine_reliable_tokens(x1, x2, cfg.rtm, gcn_weights(reg, cfg.gnn_layers))
        t1, t2 = rtm_out.t1.tokens, rtm_out.t2.tokens
    else:
        t1, t2 = uniform_tokens(x1, cfg.l), uniform_tokens(x2, cfg.l)

    t1s = t2s = None
    if abl.use_te:
        att = cfg.attention
        joint = transformer_block(TokenSequence(nx.concat([t1, t2], axis=0), "concat-anchors"), reg, att)
        s1, s2 = split_halves(joint)
        t1s, t2s = s1.tokens, s2.tokens
        e1, e2 = cross_attention_exchange(s1, s2, reg, att)
        t1t, t2t = e1.tokens, e2.tokens
    else:
        t1t, t2t = t1, t2

    if abl.use_td:
        att = cfg.attention
        x1p = nx.reshape(anchor_primary_block(x1, TokenSequence(t1t, "branch-1"), reg, att), (h, w, c))
        x2p = nx.reshape(anchor_primary_block(x2, TokenSequence(t2t, "branch-2"), reg, att), (h, w, c))
    else:
        x1p, x2p = x1.data, x2.data

    d = difference_features(x1p, x2p)
    out = decode(d, reg, cfg.downsample_factor, out_hw=a.shape[:2])
    return ForwardOutput(x1, x2, rtm_out, t1, t2, t1s, t2s, t1t, t2t, x1p, x2p, d, out)


def downsample_mask(labels: np.ndarray, factor: int) -> np.ndarray:
    h, w = labels.shape
    blocks = labels.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


def coarse_bce(p: Tensor, labels: np.ndarray, factor: int) -> Tensor:
    """Binary cross-entropy between the coarse map and the block-majority label."""
    y = Tensor(downsample_mask(np.asarray(labels), factor).reshape(-1, 1).astype(p.dtype))
    one = Tensor(np.ones(p.shape, dtype=p.dtype))
    ll = nx.add(nx.mul(y, nx.log(p)), nx.mul(nx.sub(one, y), nx.log(nx.sub(one, p))))
    return nx.mul(ops.mean(ll), -1.0)
