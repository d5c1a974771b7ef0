"""Inference helpers and per-image evaluation of a trained model."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .backbone import sample_style
from .engine import Tensor
from .losses import ENCODER_TAPS, global_content_loss
from .metrics import instance_ssim, palette_distance, ssim


def style_codes(style_dim: int, n: int, seed: int) -> np.ndarray:
    return sample_style(np.random.default_rng([seed, 11]), style_dim, n)


def translate_images(state, images: np.ndarray, s: np.ndarray, boxes=None, batch: int = 4) -> np.ndarray:
    """Translate an (n, 3, H, W) array without recording a tape.

    ``boxes=None`` runs without instance tokens (the test-time default).
    """
    n = images.shape[0]
    boxes = boxes if boxes is not None else [[] for _ in range(n)]
    outs = []
    with E.no_grad(), E.default_dtype(state.dtype):
        for i in range(0, n, batch):
            x = Tensor(images[i:i + batch].astype(state.dtype))
            y_hat, _, _ = state.model.translate(x, boxes[i:i + batch], s[i:i + batch].astype(state.dtype))
            outs.append(y_hat.data)
    return np.concatenate(outs).astype(np.float64)


def reconstruct_images(state, images: np.ndarray) -> np.ndarray:
    with E.no_grad(), E.default_dtype(state.dtype):
        return state.model.reconstruct(Tensor(images.astype(state.dtype))).data.astype(np.float64)


def content_nce(state, x: np.ndarray, y_hat: np.ndarray, seed: int = 0) -> np.ndarray:
    """Per-image global contrastive loss between inputs and translations at fixed locations."""
    cfg = state.cfg.nce
    idx = [ENCODER_TAPS.index(name) for name in cfg.layers]
    out = []
    with E.no_grad(), E.default_dtype(state.dtype):
        for i in range(x.shape[0]):
            _, tx = state.model.content_encoder(Tensor(x[i:i + 1].astype(state.dtype)), taps=True)
            _, ty = state.model.content_encoder(Tensor(y_hat[i:i + 1].astype(state.dtype)), taps=True)
            rng = np.random.default_rng([seed, i])
            loss = global_content_loss([tx[j] for j in idx], [ty[j] for j in idx], state.heads, cfg, rng)
            out.append(float(loss.item()))
    return np.array(out)


def evaluate_samples(state, samples, style_seed: int = 0, use_boxes: bool = False) -> dict:
    """Per-image and mean SSIM, instance SSIM and palette distances of translated samples."""
    images = np.stack([smp.image for smp in samples])
    s = style_codes(state.cfg.backbone.style_dim, len(samples), style_seed)
    boxes = [list(smp.boxes) for smp in samples] if use_boxes else None
    y_hat = translate_images(state, images, s, boxes)
    rows = []
    for smp, out in zip(samples, y_hat):
        row = {"id": smp.id, "ssim": ssim(smp.image, out),
               "palette_A": palette_distance(out, "A"), "palette_B": palette_distance(out, "B"),
               "input_palette_B": palette_distance(smp.image, "B")}
        try:
            row["instance_ssim"] = instance_ssim(smp.image, out, smp.boxes)
        except ValueError:
            row["instance_ssim"] = None
        rows.append(row)
    agg = {}
    for key in ("ssim", "instance_ssim", "palette_A", "palette_B", "input_palette_B"):
        vals = [r[key] for r in rows if r[key] is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    return {"aggregate": agg, "images": rows, "translations": y_hat}
