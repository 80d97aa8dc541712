"""Prediction head (difference -> upsample -> conv decoder) and the training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import he_normal
from .numerics import ParameterRegistry, ShapeError, Tensor, ops

LOG_FLOOR = 1e-12


@dataclass
class ChangeLogits:
    logits: Tensor  # H0 x W0 x 2, pre-softmax
    prob: Tensor  # H0 x W0 x 2, channel 0 unchanged / channel 1 changed

    @property
    def shape(self):
        return self.prob.shape

    def hard_mask(self) -> np.ndarray:
        return np.argmax(self.prob.data, axis=-1).astype(np.uint8)

    def change_prob(self) -> np.ndarray:
        return self.prob.data[..., 1]


@dataclass
class GroundTruth:
    labels: np.ndarray  # H0 x W0 {0, 1}
    one_hot: np.ndarray  # H0 x W0 x 2

    @classmethod
    def from_mask(cls, mask) -> "GroundTruth":
        labels = (np.asarray(mask) > 0).astype(np.uint8)
        return cls(labels, np.eye(2)[labels])


def difference_features(x1p: Tensor, x2p: Tensor) -> Tensor:
    if x1p.shape != x2p.shape:
        raise ShapeError(f"refined maps differ in shape: {x1p.shape} vs {x2p.shape}")
    return nx.absolute(nx.sub(x1p, x2p))


def init_head(reg: ParameterRegistry, channels: int, rng: np.random.Generator, prefix="dec") -> None:
    half = max(channels // 2, 1)
    reg.add(f"{prefix}.c1.w", he_normal(rng, (3, 3, channels, half), 9 * channels))
    reg.add(f"{prefix}.c1.b", np.zeros(half))
    reg.add(f"{prefix}.c2.w", he_normal(rng, (3, 3, half, half), 9 * half))
    reg.add(f"{prefix}.c2.b", np.zeros(half))
    reg.add(f"{prefix}.c3.w", he_normal(rng, (1, 1, half, 2), half))
    reg.add(f"{prefix}.c3.b", np.zeros(2))


def decode(d: Tensor, reg: ParameterRegistry, factor: int, out_hw: tuple | None = None, prefix="dec") -> ChangeLogits:
    """Upsample ``d`` by ``factor`` and decode to a 2-channel per-pixel distribution."""
    if d.ndim != 3:
        raise ShapeError(f"decoder expects H x W x C, got {d.shape}")
    if out_hw is not None and tuple(out_hw) != (d.shape[0] * factor, d.shape[1] * factor):
        raise ShapeError(f"feature grid {d.shape[:2]} x{factor} does not reach {tuple(out_hw)}")
    x = nx.upsample_bilinear(d, factor)
    x = nx.gelu(nx.conv2d(x, reg[f"{prefix}.c1.w"], reg[f"{prefix}.c1.b"], pad=1))
    x = nx.gelu(nx.conv2d(x, reg[f"{prefix}.c2.w"], reg[f"{prefix}.c2.b"], pad=1))
    logits = nx.conv2d(x, reg[f"{prefix}.c3.w"], reg[f"{prefix}.c3.b"])
    return ChangeLogits(logits, nx.softmax_rows(logits))


def bce_loss(g: GroundTruth | np.ndarray, p: ChangeLogits | Tensor) -> Tensor:
    """Mean over pixels of ``-sum_c G log P`` (log clamped at 1e-12)."""
    onehot = g.one_hot if isinstance(g, GroundTruth) else np.asarray(g)
    prob = p.prob if isinstance(p, ChangeLogits) else p
    if onehot.shape != prob.shape:
        raise ShapeError(f"ground truth {onehot.shape} vs prediction {prob.shape}")
    npix = int(np.prod(prob.shape[:-1]))
    ll = ops.sum(nx.mul(nx.log(prob, LOG_FLOOR), Tensor(onehot.astype(prob.dtype))))
    return nx.mul(ll, -1.0 / npix)
