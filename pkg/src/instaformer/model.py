"""The generator-side network bundle: E, S, aggregator, G."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .aggregator import Aggregator, AggregatorConfig
from .backbone import BackboneConfig, ContentEncoder, Generator, StyleEncoder
from .engine import Tensor
from .nn import Module


class InstaFormer(Module):
    def __init__(self, backbone: BackboneConfig = BackboneConfig(),
                 aggregator: AggregatorConfig = AggregatorConfig(),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if backbone.feature_size % aggregator.patch_stride:
            raise ValueError(f"patch_stride {aggregator.patch_stride} does not divide the "
                             f"feature size {backbone.feature_size}")
        self._backbone = backbone
        self._agg = aggregator
        self.content_encoder = ContentEncoder(backbone, rng)
        self.style_encoder = StyleEncoder(backbone, rng)
        self.aggregator = Aggregator(backbone.content_channels, backbone.style_dim, aggregator, rng)
        self.generator = Generator(backbone, rng)

    @property
    def backbone_config(self) -> BackboneConfig:
        return self._backbone

    @property
    def aggregator_config(self) -> AggregatorConfig:
        return self._agg

    def tap_channels(self) -> dict[str, int]:
        l = self._backbone.base_channels
        return {"conv1": l, "conv2": 2 * l, "content": self._backbone.content_channels}

    def translate(self, x: Tensor, boxes, s, traces=None):
        """x → (ŷ, encoder taps of x, instance-token outputs)."""
        c, taps = self.content_encoder(x, taps=True)
        u, u_ins = self.aggregator(c, boxes, E.as_tensor(s), traces)
        return self.generator(u), taps, u_ins

    def reconstruct(self, y: Tensor) -> Tensor:
        c = self.content_encoder(y)
        s = self.style_encoder(y)
        u, _ = self.aggregator(c, [[] for _ in range(y.shape[0])], s)
        return self.generator(u)
