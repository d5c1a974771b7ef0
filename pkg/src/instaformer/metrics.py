"""SSIM, box-restricted SSIM, and palette statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import DOMAINS, background


@dataclass(frozen=True)
class SsimConfig:
    window: int = 8
    dynamic_range: float = 2.0

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


def _as_chw(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-channel SSIM over all valid (stride-1) uniform windows."""
    k = cfg.window
    wa = sliding_window_view(a, (k, k), axis=(-2, -1))
    wb = sliding_window_view(b, (k, k), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over windows, averaged over channels. Inputs are C×H×W."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < cfg.window:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than window {cfg.window}")
    return float(ssim_map(a, b, cfg).mean(axis=(-2, -1)).mean())


def box_crop(img: np.ndarray, box) -> np.ndarray:
    x0 = int(round(box.cx - box.w / 2))
    y0 = int(round(box.cy - box.h / 2))
    return img[..., y0:y0 + int(round(box.h)), x0:x0 + int(round(box.w))]


def instance_ssim(a, b, boxes, cfg: SsimConfig = SsimConfig()) -> float:
    """Average SSIM of the crops at each box large enough for one window."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"instance_ssim: shape mismatch {a.shape} vs {b.shape}")
    scores = []
    for box in boxes:
        ca, cb = box_crop(a, box), box_crop(b, box)
        if min(ca.shape[-2:]) >= cfg.window:
            scores.append(ssim(ca, cb, cfg))
    if not scores:
        raise ValueError("instance_ssim: no box is at least one window in size")
    return float(np.mean(scores))


def channel_stats(img) -> np.ndarray:
    """(mean_R, mean_G, mean_B, std_R, std_G, std_B)."""
    arr = _as_chw(img)
    flat = arr.reshape(arr.shape[0], -1)
    return np.concatenate([flat.mean(axis=1), flat.std(axis=1)])


def palette_stats(domain: str, size: int = 64) -> np.ndarray:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    return channel_stats(background(domain, size))


def palette_distance(img, domain: str) -> float:
    """L2 distance between an image's channel statistics and a domain background's."""
    arr = _as_chw(img)
    return float(np.linalg.norm(channel_stats(arr) - palette_stats(domain, arr.shape[-1])))
