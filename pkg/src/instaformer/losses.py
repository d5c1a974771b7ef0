"""Training objectives: adversarial, patch/instance contrastive, reconstructions."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .aggregator import BoundingBox, roi_extract
from .engine import Tensor
from .nn import Linear, Module

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NceConfig:
    temperature: float = 0.07
    layers: tuple[str, ...] = ("conv1", "conv2", "content")
    patches_per_layer: int = 64
    projection_dim: int = 128
    hidden_dim: int = 256
    instance_grid: int = 4

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        unknown = set(self.layers) - set(ENCODER_TAPS)
        if unknown:
            raise ValueError(f"unknown encoder taps {sorted(unknown)}")
        if self.patches_per_layer < 2 or self.instance_grid < 1:
            raise ValueError("need >= 2 patches per layer and instance_grid >= 1")


ENCODER_TAPS = ("conv1", "conv2", "content")


@dataclass(frozen=True)
class LossWeights:
    glob: float = 1.0
    ins: float = 1.0
    style: float = 10.0
    img: float = 5.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class LossReport:
    gan_d: float
    gan_g: float
    nce_global: float
    nce_instance: float
    recon_img: float
    recon_style: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


# -- adversarial --------------------------------------------------------------------

def discriminator_loss(d_real: Tensor, d_fake: Tensor, mode: str = "logistic") -> Tensor:
    """-E[log D(y)] - E[log(1 - D(ŷ))] on raw logits (or the least-squares variant)."""
    if mode == "logistic":
        return E.mean(E.softplus(-d_real)) + E.mean(E.softplus(d_fake))
    if mode == "lsgan":
        return 0.5 * (E.mean((d_real - 1.0) * (d_real - 1.0)) + E.mean(d_fake * d_fake))
    raise ValueError(f"unknown gan mode {mode!r}")


def generator_adv_loss(d_fake: Tensor, mode: str = "logistic") -> Tensor:
    """Non-saturating -E[log D(ŷ)]."""
    if mode == "logistic":
        return E.mean(E.softplus(-d_fake))
    if mode == "lsgan":
        return E.mean((d_fake - 1.0) * (d_fake - 1.0))
    raise ValueError(f"unknown gan mode {mode!r}")


def gan_losses(d_real: Tensor, d_fake: Tensor, mode: str = "logistic") -> tuple[Tensor, Tensor]:
    return discriminator_loss(d_real, d_fake, mode), generator_adv_loss(d_fake, mode)


# -- infoNCE ----------------------------------------------------------------------------

def info_nce(anchor, positive, negatives, tau: float) -> Tensor:
    """-log softmax of the positive logit among [positive, negatives] at temperature tau.

    ``anchor``/``positive`` are (..., d), ``negatives`` (..., n, d); the
    result has the leading shape (a scalar for single vectors).
    """
    anchor, positive, negatives = (E.as_tensor(t) for t in (anchor, positive, negatives))
    if negatives.ndim < 2 or negatives.shape[-2] == 0:
        raise ValueError("info_nce: need at least one negative")
    pos = E.sum(anchor * positive, -1, keepdims=True)
    neg = E.sum(E.reshape(anchor, anchor.shape[:-1] + (1, anchor.shape[-1])) * negatives, -1)
    logits = E.concat([pos, neg], axis=-1) * (1.0 / tau)
    return E.logsumexp(logits, -1) - logits[..., 0]


def similarity_nce(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """Row-wise infoNCE where row i of ``k`` is the positive for ``q[i]`` and
    the other rows are negatives. ``q``, ``k`` are (..., S, d); returns (..., S)."""
    logits = E.matmul(q, E.swapaxes(k, -1, -2)) * (1.0 / tau)
    S = q.shape[-2]
    diag = np.arange(S)
    pos = logits[..., diag, diag]
    return E.logsumexp(logits, -1) - pos


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / E.sqrt(E.sum(v * v, -1, keepdims=True) + eps)


class ProjectionHead(Module):
    """Two-layer MLP with ReLU and unit-norm output."""

    def __init__(self, cin: int, hidden: int, out: int, rng: np.random.Generator):
        self.fc1 = Linear(cin, hidden, rng=rng)
        self.fc2 = Linear(hidden, out, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize(self.fc2(E.relu(self.fc1(x))))


class NceHeads(Module):
    """One projection head per encoder tap plus one for instance ROIs."""

    def __init__(self, tap_channels: dict[str, int], cfg: NceConfig, rng: np.random.Generator):
        self.global_heads = [ProjectionHead(tap_channels[name], cfg.hidden_dim, cfg.projection_dim, rng)
                             for name in cfg.layers]
        self.instance_head = ProjectionHead(tap_channels["content"], cfg.hidden_dim,
                                            cfg.projection_dim, rng)


def sample_locations(rng: np.random.Generator, batch: int, hw: int, n: int) -> np.ndarray:
    if n > hw:
        raise ValueError(f"cannot sample {n} patches from {hw} positions")
    return np.stack([rng.choice(hw, n, replace=False) for _ in range(batch)])


def gather_locations(feat: Tensor, idx: np.ndarray) -> Tensor:
    """(B, C, H, W) features at per-sample flat indices (B, S) → (B, S, C)."""
    B, C, H, W = feat.shape
    flat = E.permute(E.reshape(feat, (B, C, H * W)), (0, 2, 1))
    return flat[np.arange(B)[:, None], idx]


def global_content_loss(taps_x, taps_y, heads: NceHeads, cfg: NceConfig,
                        rng: np.random.Generator, locations=None) -> Tensor:
    """Patch contrastive loss between input taps and translated-image taps.

    ``taps_x``/``taps_y``: per-layer (B, C, H, W) features of x and ŷ. Queries
    come from ŷ, positives/negatives from x at the same sampled locations.
    ``x``-side features are treated as constants. ``locations`` overrides
    sampling with per-layer (B, S) index arrays.
    """
    per_layer = []
    for li, (fx, fy) in enumerate(zip(taps_x, taps_y)):
        head = heads.global_heads[li]
        B, _, H, W = fx.shape
        if locations is None:
            idx = sample_locations(rng, B, H * W, min(cfg.patches_per_layer, H * W))
        else:
            idx = locations[li]
        q = head(gather_locations(fy, idx))
        with E.no_grad():
            k = head(gather_locations(fx.detach(), idx))
        per_layer.append(E.mean(similarity_nce(q, k, cfg.temperature)))
    return E.mean(E.stack(per_layer))


def instance_content_loss(feat_x: Tensor, feat_y: Tensor, boxes, heads: NceHeads,
                          cfg: NceConfig) -> Tensor:
    """Contrastive loss over RoIAlign grid cells of each box.

    For each box the final features of x and ŷ are pooled to an r×r grid;
    cell m of ŷ is the query, cell m of x the positive, the other cells of
    the same box in x the negatives. Averages over all cells of all boxes;
    exactly zero when there are no boxes.
    """
    r = cfg.instance_grid
    qs, ks = [], []
    dropped = 0
    for b, sample_boxes in enumerate(boxes):
        for box in sample_boxes:
            if box.w < 2 or box.h < 2:
                dropped += 1
                continue
            qs.append(roi_extract(feat_y[b], box, r))
            with E.no_grad():
                ks.append(roi_extract(feat_x[b].detach(), box, r))
    if dropped:
        logger.warning("instance_content_loss: dropped %d degenerate boxes", dropped)
    if not qs:
        return Tensor(np.zeros((), dtype=feat_y.dtype))
    n, C = len(qs), feat_y.shape[1]
    head = heads.instance_head
    q = head(E.permute(E.reshape(E.stack(qs), (n, C, r * r)), (0, 2, 1)))
    with E.no_grad():
        k = head(E.permute(E.reshape(E.stack(ks), (n, C, r * r)), (0, 2, 1)))
    return E.mean(similarity_nce(q, k, cfg.temperature))


# -- reconstruction ---------------------------------------------------------------------

def l1(a: Tensor, b) -> Tensor:
    return E.mean(E.abs(a - b))


def image_recon_loss(y: Tensor, model) -> Tensor:
    """‖G(T(E(y), S(y))) − y‖₁ per pixel, no instance tokens."""
    return l1(model.reconstruct(y), y)


def style_recon_loss(y_hat: Tensor, s, style_encoder) -> Tensor:
    return l1(style_encoder(y_hat), s)


def total_loss(terms: dict, w: LossWeights):
    """Generator-side weighted sum; works on tensors or plain floats."""
    return (terms["gan_g"] + w.glob * terms["nce_global"] + w.ins * terms["nce_instance"]
            + w.style * terms["recon_style"] + w.img * terms["recon_img"])
