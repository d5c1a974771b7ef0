"""Content/style encoders, generator and PatchGAN discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor
from .nn import Conv2d, InstanceNorm2d, Module


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    base_channels: int = 16
    content_channels: int = 64
    style_dim: int = 8

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        for name in ("base_channels", "content_channels", "style_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def feature_size(self) -> int:
        return self.image_size // 4


PAPER_BACKBONE = BackboneConfig(image_size=352, base_channels=64, content_channels=256, style_dim=8)


def _check_image(net: str, x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{net}: expected B×3×H×W image, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"{net}: H and W must be divisible by 4, got {x.shape[2:]}")


class EncoderTrunk(Module):
    """Conv7-reflect, Conv3, Downsample, Conv3, Downsample (each conv + IN + ReLU)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        l = cfg.base_channels
        self.conv1 = Conv2d(3, l, 7, 1, 3, "reflect", rng=rng)
        self.norm1 = InstanceNorm2d(l)
        self.conv2 = Conv2d(l, 2 * l, 3, 1, 1, rng=rng)
        self.norm2 = InstanceNorm2d(2 * l)
        self.conv3 = Conv2d(2 * l, cfg.content_channels, 3, 1, 1, rng=rng)
        self.norm3 = InstanceNorm2d(cfg.content_channels)

    def forward(self, x: Tensor, taps: bool = False):
        _check_image("encoder", x)
        h1 = E.relu(self.norm1(self.conv1(x)))
        h2 = E.relu(self.norm2(self.conv2(h1)))
        h3 = E.relu(self.norm3(self.conv3(E.avg_pool2x2(h2))))
        c = E.avg_pool2x2(h3)
        if taps:
            return c, [h1, h2, c]
        return c


class ContentEncoder(EncoderTrunk):
    """Maps an image to its B×l_c×H/4×W/4 content feature map.

    With ``taps=True`` also returns the Conv-1 and Conv-2 block outputs and
    the final feature, the three layers used by the contrastive losses.
    """


class StyleEncoder(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.trunk = EncoderTrunk(cfg, rng)
        self.proj = Conv2d(cfg.content_channels, cfg.style_dim, 1, rng=rng)

    def forward(self, y: Tensor) -> Tensor:
        h = self.trunk(y)
        pooled = E.mean(h, (2, 3), keepdims=True)
        s = self.proj(pooled)
        return E.reshape(s, (s.shape[0], s.shape[1]))


class Generator(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        l = cfg.base_channels
        self.conv1 = Conv2d(cfg.content_channels, 2 * l, 3, 1, 1, rng=rng)
        self.norm1 = InstanceNorm2d(2 * l)
        self.conv2 = Conv2d(2 * l, l, 3, 1, 1, rng=rng)
        self.norm2 = InstanceNorm2d(l)
        self.conv3 = Conv2d(l, 3, 7, 1, 3, "reflect", rng=rng)

    def forward(self, u: Tensor) -> Tensor:
        if u.ndim != 4 or u.shape[1] != self.conv1.weight.shape[1]:
            raise ShapeError(f"generator: expected B×{self.conv1.weight.shape[1]}×h×w, got {u.shape}")
        h = E.relu(self.norm1(self.conv1(E.upsample_nearest2x(u))))
        h = E.relu(self.norm2(self.conv2(E.upsample_nearest2x(h))))
        return E.tanh(self.conv3(h))


class Discriminator(Module):
    """PatchGAN: three stride-2 4×4 stages, one stride-1 stage, 4×4 logit conv."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        l = cfg.base_channels
        self.conv1 = Conv2d(3, l, 4, 2, 1, rng=rng)
        self.conv2 = Conv2d(l, 2 * l, 4, 2, 1, rng=rng)
        self.norm2 = InstanceNorm2d(2 * l)
        self.conv3 = Conv2d(2 * l, 4 * l, 4, 2, 1, rng=rng)
        self.norm3 = InstanceNorm2d(4 * l)
        self.conv4 = Conv2d(4 * l, 8 * l, 4, 1, 1, rng=rng)
        self.norm4 = InstanceNorm2d(8 * l)
        self.conv5 = Conv2d(8 * l, 1, 4, 1, 1, rng=rng)

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        shape = (3, h, w)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            shape = conv.out_shape(shape)
        return shape

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"discriminator: expected B×3×H×W image, got {img.shape}")
        out = self.output_shape(*img.shape[2:])
        if out[1] < 1 or out[2] < 1:
            raise ShapeError(f"discriminator: image {img.shape[2:]} smaller than one patch")
        h = E.leaky_relu(self.conv1(img), 0.2)
        h = E.leaky_relu(self.norm2(self.conv2(h)), 0.2)
        h = E.leaky_relu(self.norm3(self.conv3(h)), 0.2)
        h = E.leaky_relu(self.norm4(self.conv4(h)), 0.2)
        return self.conv5(h)


def sample_style(rng: np.random.Generator, style_dim: int, batch: int | None = None) -> np.ndarray:
    """Draw style codes from the standard normal prior."""
    shape = (style_dim,) if batch is None else (batch, style_dim)
    return rng.standard_normal(shape)


# -- shape walk ------------------------------------------------------------------------

def _conv_row(label: str, conv: Conv2d, shape):
    w = conv.weight.shape
    params = (w[1], w[0], w[2], conv.stride, conv.padding)
    return (label, params, conv.out_shape(shape))


def _half(shape):
    return (shape[0], shape[1] // 2, shape[2] // 2)


def _double(shape):
    return (shape[0], shape[1] * 2, shape[2] * 2)


def encoder_table(trunk: EncoderTrunk, image_size: int, style_proj: Conv2d | None = None) -> list[tuple]:
    """Rows ``(layer, (in, out, k, s, p) or None, (C, H, W))`` for one sample.

    Shapes come from each layer's own shape arithmetic, so the walk is cheap
    at full resolution and tracks the instantiated weights.
    """
    rows = []
    shape = (3, image_size, image_size)
    for i, (conv, label) in enumerate([(trunk.conv1, "Conv-1 (Reflection)"),
                                       (trunk.conv2, "Conv-2 (Zeros)"),
                                       (trunk.conv3, "Conv-3 (Zeros)")]):
        if i == 2:
            shape = _half(shape)
            rows.append(("Downsample", None, shape))
        rows.append(_conv_row(label, conv, shape))
        shape = rows[-1][2]
        rows += [("InstanceNorm", None, shape), ("ReLU", None, shape)]
    shape = _half(shape)
    rows.append(("DownSample", None, shape))
    if style_proj is not None:
        shape = (shape[0], 1, 1)
        rows.append(("AdaptiveAvgPool", None, shape))
        rows.append(_conv_row("Conv-4", style_proj, shape))
    return rows


def generator_table(gen: Generator, feature_size: int) -> list[tuple]:
    rows = []
    shape = (gen.conv1.weight.shape[1], feature_size, feature_size)
    for conv, label in [(gen.conv1, "Conv-1 (Zeros)"), (gen.conv2, "Conv-2 (Zeros)")]:
        shape = _double(shape)
        rows.append(("UpSample", None, shape))
        rows.append(_conv_row(label, conv, shape))
        shape = rows[-1][2]
        rows += [("InstanceNorm", None, shape), ("ReLU", None, shape)]
    rows.append(_conv_row("Conv-3 (ReflectionPad)", gen.conv3, shape))
    rows.append(("Tanh", None, rows[-1][2]))
    return rows
