"""Shared convolutional encoder: H0 x W0 x 3 image -> H x W x C feature map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ParameterRegistry, ShapeError, Tensor


@dataclass
class EncoderConfig:
    channels: list = field(default_factory=lambda: [16, 32, 32])
    out_channels: int = 32

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.channels)

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("encoder channels must be a non-empty list of positive widths")
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")


@dataclass
class FeatureMap:
    data: Tensor
    source_id: int

    @property
    def shape(self):
        return self.data.shape


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_encoder(reg: ParameterRegistry, cfg: EncoderConfig, rng: np.random.Generator, prefix="enc") -> None:
    cfg.validate()
    cin = 3
    for s, width in enumerate(cfg.channels):
        reg.add(f"{prefix}.s{s}.down.w", he_normal(rng, (3, 3, cin, width), 9 * cin))
        reg.add(f"{prefix}.s{s}.down.b", np.zeros(width))
        reg.add(f"{prefix}.s{s}.res.w", he_normal(rng, (3, 3, width, width), 9 * width))
        reg.add(f"{prefix}.s{s}.res.b", np.zeros(width))
        cin = width
    if cin != cfg.out_channels:
        reg.add(f"{prefix}.proj.w", he_normal(rng, (1, 1, cin, cfg.out_channels), cin))
        reg.add(f"{prefix}.proj.b", np.zeros(cfg.out_channels))


def encode(image, reg: ParameterRegistry, cfg: EncoderConfig, source_id: int = 1, prefix="enc") -> FeatureMap:
    """Run one branch of the siamese encoder.

    Each stage is ``h = gelu(conv3x3/2(x)); x = h + gelu(conv3x3(h))``. The
    same registry must be passed for both branches.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=reg.dtype))
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"encoder expects H0 x W0 x 3 images, got {x.shape}")
    f = cfg.downsample_factor
    if x.shape[0] % f or x.shape[1] % f:
        raise ShapeError(f"image extents {x.shape[:2]} not divisible by downsample factor {f}")
    for s in range(len(cfg.channels)):
        h = nx.gelu(nx.conv2d(x, reg[f"{prefix}.s{s}.down.w"], reg[f"{prefix}.s{s}.down.b"], stride=2, pad=1))
        x = nx.add(h, nx.gelu(nx.conv2d(h, reg[f"{prefix}.s{s}.res.w"], reg[f"{prefix}.s{s}.res.b"], pad=1)))
    if f"{prefix}.proj.w" in reg:
        x = nx.conv2d(x, reg[f"{prefix}.proj.w"], reg[f"{prefix}.proj.b"])
    return FeatureMap(x, source_id)
