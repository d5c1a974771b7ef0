"""Token aggregation between encoder and generator.

Pipeline for one sample: strided conv patch embedding of the content map,
RoIAlign + the same conv stack for each box (one token per instance),
sinusoidal position embedding of token geometry, a stack of pre-norm
transformer blocks whose normalisation is AdaIN driven by the style code,
then a transposed-conv stack that maps the grid tokens back to the content
resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor
from .nn import NORM_EPS, Conv2d, ConvTranspose2d, Linear, Module, normalize

FEATURE_STRIDE = 4


@dataclass(frozen=True)
class AggregatorConfig:
    patch_stride: int = 2
    token_dim: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_dim: int = 256

    def __post_init__(self):
        if self.patch_stride not in (1, 2, 4, 8):
            raise ValueError(f"patch_stride must be one of 1, 2, 4, 8, got {self.patch_stride}")
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")
        if self.token_dim % 8:
            raise ValueError("token_dim must be divisible by 8 (four sin/cos ladders)")
        if self.blocks < 1 or self.mlp_dim < 1:
            raise ValueError("blocks and mlp_dim must be >= 1")

    @property
    def freq_bands(self) -> int:
        return self.token_dim // 8


PAPER_AGGREGATOR = AggregatorConfig(patch_stride=8, token_dim=1024, blocks=6, heads=4, mlp_dim=4096)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: centre and size in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def normalized(self, width: int, height: int | None = None) -> tuple[float, float, float, float]:
        height = width if height is None else height
        return (self.cx / width, self.cy / height, self.w / width, self.h / height)

    def is_valid(self, width: int, height: int | None = None, min_size: float = 2.0) -> bool:
        height = width if height is None else height
        return (self.w >= min_size and self.h >= min_size
                and self.cx - self.w / 2 >= 0 and self.cy - self.h / 2 >= 0
                and self.cx + self.w / 2 <= width and self.cy + self.h / 2 <= height)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass
class TokenSequence:
    tokens: Tensor                 # (G + N) × l'_c
    geometry: np.ndarray           # (G + N) × 4 normalised (cx, cy, w, h)
    grid_shape: tuple[int, int]
    n_instances: int = 0

    @property
    def n_grid(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


# -- position embedding ------------------------------------------------------------

def gamma(a, K: int) -> np.ndarray:
    """(sin(2^0 π a), cos(2^0 π a), ..., sin(2^{K-1} π a), cos(2^{K-1} π a))."""
    if K < 1:
        raise ValueError("K must be >= 1")
    a = np.asarray(a, dtype=np.float64)
    freqs = (2.0 ** np.arange(K)) * np.pi
    ang = a[..., None] * freqs
    out = np.empty(a.shape + (2 * K,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def embed_geometry(geom: np.ndarray, K: int) -> np.ndarray:
    """Cat(γ(x), γ(y), γ(w), γ(h)) for each row of an (M, 4) geometry array."""
    geom = np.asarray(geom, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([gamma(geom[:, i], K) for i in range(4)], axis=1)


def grid_geometry(grid_h: int, grid_w: int, image_h: int, image_w: int) -> np.ndarray:
    """Normalised (cx, cy, w, h) of each raster-ordered grid patch."""
    cell_h, cell_w = image_h / grid_h, image_w / grid_w
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * cell_w
    cy = (ys.reshape(-1) + 0.5) * cell_h
    geom = np.stack([cx / image_w, cy / image_h,
                     np.full(cx.shape, cell_w) / image_w,
                     np.full(cy.shape, cell_h) / image_h], axis=1)
    return geom


def box_geometry(boxes, image_w: int, image_h: int) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.normalized(image_w, image_h) for b in boxes], dtype=np.float64)


def pos_embed_global(grid_h: int, grid_w: int, image_h: int, image_w: int, token_dim: int) -> np.ndarray:
    if token_dim % 8:
        raise ValueError(f"token_dim {token_dim} is not 8·K")
    return embed_geometry(grid_geometry(grid_h, grid_w, image_h, image_w), token_dim // 8)


def pos_embed_instance(box: BoundingBox, image_w: int, image_h: int, token_dim: int) -> np.ndarray:
    if token_dim % 8:
        raise ValueError(f"token_dim {token_dim} is not 8·K")
    return embed_geometry(np.array(box.normalized(image_w, image_h)), token_dim // 8)[0]


# -- RoIAlign --------------------------------------------------------------------------

def roi_points(box: BoundingBox, res: int, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Bin-centre sample points (x, y) in feature-map coordinates, raster order."""
    x0 = (box.cx - box.w / 2) / stride
    y0 = (box.cy - box.h / 2) / stride
    bw, bh = box.w / stride / res, box.h / stride / res
    jj, ii = np.meshgrid(np.arange(res), np.arange(res), indexing="xy")
    xs = x0 + (jj.reshape(-1) + 0.5) * bw
    ys = y0 + (ii.reshape(-1) + 0.5) * bh
    return np.stack([xs, ys], axis=1)


def roi_extract(c: Tensor, box: BoundingBox, res: int, stride: int = FEATURE_STRIDE) -> Tensor:
    """RoIAlign one box from a C×h×w map to C×res×res (one sample per bin centre)."""
    if box.w < 2 or box.h < 2:
        raise ValueError(f"degenerate box {box}")
    samples = E.bilinear_sample(c, roi_points(box, res, stride))  # res² × C
    return E.reshape(E.permute(samples, (1, 0)), (c.shape[0], res, res))


# -- layers ------------------------------------------------------------------------------

class PatchEmbed(Module):
    """log2(k) overlapped 3×3 stride-2 convs (ReLU between); k = 1 is one stride-1 conv."""

    def __init__(self, cin: int, cfg: AggregatorConfig, rng: np.random.Generator):
        k = cfg.patch_stride
        if k == 1:
            self.convs = [Conv2d(cin, cfg.token_dim, 3, 1, 1, rng=rng)]
        else:
            n = int(math.log2(k))
            chans = [cin] + [cfg.token_dim] * n
            self.convs = [Conv2d(chans[i], chans[i + 1], 3, 2, 1, rng=rng) for i in range(n)]
        self._k = k

    def forward(self, c: Tensor) -> Tensor:
        if c.shape[2] % self._k or c.shape[3] % self._k:
            raise ShapeError(f"patch_embed: spatial dims {c.shape[2:]} not divisible by {self._k}")
        h = c
        for i, conv in enumerate(self.convs):
            if i:
                h = E.relu(h)
            h = conv(h)
        return h


class PatchExpand(Module):
    """Transposed-conv mirror of :class:`PatchEmbed` (4×4 stride-2 kernels)."""

    def __init__(self, cout: int, cfg: AggregatorConfig, rng: np.random.Generator):
        k = cfg.patch_stride
        if k == 1:
            self.deconvs = [ConvTranspose2d(cfg.token_dim, cout, 3, 1, 1, rng=rng)]
        else:
            n = int(math.log2(k))
            chans = [cfg.token_dim] * n + [cout]
            self.deconvs = [ConvTranspose2d(chans[i], chans[i + 1], 4, 2, 1, rng=rng) for i in range(n)]

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for i, deconv in enumerate(self.deconvs):
            if i:
                h = E.relu(h)
            h = deconv(h)
        return h


def adain(z: Tensor, scale: Tensor, shift: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalise each channel over the token axis, then apply style scale/shift.

    ``z`` is (M, D) or (B, M, D); ``scale``/``shift`` broadcast against it.
    """
    axis = z.ndim - 2
    if z.shape[axis] < 2:
        raise ShapeError(f"adain: need at least 2 tokens, got shape {z.shape}")
    return normalize(z, (axis,), eps) * scale + shift


class StyleAffine(Module):
    """Learned map from a style code to AdaIN (scale, shift); zero init gives (1, 0)."""

    def __init__(self, style_dim: int, dim: int, rng: np.random.Generator):
        self.fc = Linear(style_dim, 2 * dim, rng=rng, zero=True)
        self._dim = dim

    def forward(self, s: Tensor) -> tuple[Tensor, Tensor]:
        if s.ndim == 1:
            s = E.reshape(s, (1, -1))
        out = self.fc(s)
        d = self._dim
        return 1.0 + out[..., :d], out[..., d:]


class TransformerBlock(Module):
    def __init__(self, cfg: AggregatorConfig, style_dim: int, rng: np.random.Generator):
        d = cfg.token_dim
        self.style_msa = StyleAffine(style_dim, d, rng)
        self.qkv = Linear(d, 3 * d, rng=rng)
        self.proj = Linear(d, d, rng=rng)
        self.style_mlp = StyleAffine(style_dim, d, rng)
        self.fc1 = Linear(d, cfg.mlp_dim, rng=rng)
        self.fc2 = Linear(cfg.mlp_dim, d, rng=rng)
        self._heads = cfg.heads
        self._dim = d

    def attention(self, z: Tensor, trace: dict | None = None) -> Tensor:
        M, d = z.shape
        h = self._heads
        dh = d // h
        qkv = E.permute(E.reshape(self.qkv(z), (M, 3, h, dh)), (1, 2, 0, 3))  # 3, h, M, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = E.matmul(q, E.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        attn = E.softmax(scores, axis=-1)
        if trace is not None:
            trace["attn"] = attn.data
        out = E.reshape(E.permute(E.matmul(attn, v), (1, 0, 2)), (M, d))
        return self.proj(out)

    def forward(self, z: Tensor, s: Tensor, trace: dict | None = None) -> Tensor:
        """``z`` is (M, l'_c) tokens of one sample, ``s`` its (l_s,) style code."""
        if z.ndim != 2 or z.shape[1] != self._dim:
            raise ShapeError(f"transformer_block: expected M×{self._dim} tokens, got {z.shape}")
        g1, b1 = self.style_msa(s)
        n1 = normalize(z, (0,))
        if trace is not None:
            trace["norm_msa"] = n1.data
        z_mid = self.attention(n1 * g1 + b1, trace) + z
        g2, b2 = self.style_mlp(s)
        n2 = normalize(z_mid, (0,))
        if trace is not None:
            trace["norm_mlp"] = n2.data
        return self.fc2(E.gelu(self.fc1(n2 * g2 + b2))) + z_mid

    def core_param_count(self) -> int:
        """Parameters of the qkv/proj/MLP linears (style maps excluded)."""
        return sum(p.size for lin in (self.qkv, self.proj, self.fc1, self.fc2) for p in lin.parameters())


def transformer_param_count(cfg: AggregatorConfig) -> int:
    d, m = cfg.token_dim, cfg.mlp_dim
    per_block = (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d)
    return cfg.blocks * per_block


def block_table(cfg: AggregatorConfig) -> list[tuple]:
    """Per-block layer rows ``(layer, (in, out) or None, (C,))``."""
    d, m = cfg.token_dim, cfg.mlp_dim
    return [
        ("AdaptiveInstanceNorm", None, (d,)),
        ("Linear-1", (d, 3 * d), (3 * d,)),
        ("Attention", None, (d,)),
        ("Linear-2", (d, d), (d,)),
        ("AdaptiveInstanceNorm", None, (d,)),
        ("Linear-3", (d, m), (m,)),
        ("GELU", None, (m,)),
        ("Linear-4", (m, d), (d,)),
    ]


# -- token assembly -----------------------------------------------------------------------

def build_tokens(p: Tensor, inst: Tensor | None, boxes, image_size: tuple[int, int]) -> TokenSequence:
    """Raster grid tokens of ``p`` (l'_c×gh×gw), then instance tokens, plus geometry embedding."""
    d, gh, gw = p.shape
    H, W = image_size
    n = 0 if inst is None else inst.shape[0]
    if n != len(boxes):
        raise ValueError(f"build_tokens: {n} instance embeddings for {len(boxes)} boxes")
    grid = E.permute(E.reshape(p, (d, gh * gw)), (1, 0))
    geom = grid_geometry(gh, gw, H, W)
    parts = [grid]
    if n:
        parts.append(inst)
        geom = np.concatenate([geom, box_geometry(boxes, W, H)], axis=0)
    tokens = E.concat(parts, axis=0) if n else grid
    pe = embed_geometry(geom, d // 8).astype(p.dtype)
    return TokenSequence(tokens + Tensor(pe), geom, (gh, gw), n)


class Aggregator(Module):
    def __init__(self, content_channels: int, style_dim: int, cfg: AggregatorConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(content_channels, cfg, rng)
        self.blocks = [TransformerBlock(cfg, style_dim, rng) for _ in range(cfg.blocks)]
        self.expand = PatchExpand(content_channels, cfg, rng)

    def instance_embed(self, c_ins: Tensor) -> Tensor:
        """(N, l_c, k, k) ROI features → (N, l'_c) tokens through the patch-embed convs."""
        k = self.cfg.patch_stride
        if c_ins.shape[2:] != (k, k):
            raise ShapeError(f"instance_embed: expected {k}×{k} ROIs, got {c_ins.shape[2:]}")
        out = self.patch_embed(c_ins)
        return E.reshape(out, (out.shape[0], out.shape[1]))

    def tokens_for(self, c: Tensor, p: Tensor, b: int, boxes, image_size) -> TokenSequence:
        k = self.cfg.patch_stride
        inst = None
        if boxes:
            rois = E.stack([roi_extract(c[b], box, k) for box in boxes], axis=0)
            inst = self.instance_embed(rois)
        return build_tokens(p[b], inst, boxes, image_size)

    def forward(self, c: Tensor, boxes, s: Tensor, traces: list | None = None):
        """Mix content, instance tokens and style.

        ``boxes`` is one list of :class:`BoundingBox` per sample (may be empty),
        ``s`` is B×l_s. Returns ``(u, u_ins)`` with ``u`` shaped like ``c`` and
        ``u_ins`` a list of (N_b, l'_c) instance-token outputs.
        """
        B, _, h, w = c.shape
        if len(boxes) != B:
            raise ValueError(f"aggregate: {len(boxes)} box lists for batch of {B}")
        image_size = (h * FEATURE_STRIDE, w * FEATURE_STRIDE)
        p = self.patch_embed(c)
        grids, u_ins = [], []
        for b in range(B):
            seq = self.tokens_for(c, p, b, boxes[b], image_size)
            z = seq.tokens
            for blk in self.blocks:
                tr = {} if traces is not None else None
                z = blk(z, s[b], tr)
                if traces is not None:
                    tr["sample"] = b
                    traces.append(tr)
            G = seq.n_grid
            grids.append(E.reshape(E.permute(z[:G], (1, 0)), (1, -1) + seq.grid_shape))
            u_ins.append(z[G:])
        zgrid = E.concat(grids, axis=0) if B > 1 else grids[0]
        return self.expand(zgrid), u_ins
