"""Finite-difference checks over every differentiable primitive and three composite paths.

Each check reduces its op output to a scalar with a fixed random projection
so that every output element contributes, then compares backprop against
central differences in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .aggregator import AggregatorConfig, BoundingBox
from .backbone import BackboneConfig, Discriminator
from .engine import Tensor
from .losses import NceConfig, total_loss
from .trainer import TrainConfig, TrainState, generator_terms

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _away_from_zero(rng, shape, lo=0.2, hi=1.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _projected(op: Callable[[Tensor], Tensor], rng, out_shape) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out_shape))
    return lambda t: E.sum(op(t) * r)


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable, np.ndarray, list | None]]:
    """(name, scalar fn, point, indices) for each primitive; an optional fifth entry overrides eps."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, op, x, indices=None):
        with E.no_grad():
            shape = op(Tensor(x)).shape
        checks.append((name, _projected(op, rng, shape), x, indices))

    a = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((3, 4)))
    bpos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    add("add", lambda t: E.add(t, b), a)
    row = Tensor(rng.standard_normal((1, 4)))
    add("add_broadcast", lambda t: E.add(row, t), a)
    add("sub", lambda t: E.sub(b, t), a)
    add("mul", lambda t: E.mul(t, b), a)
    add("div_numerator", lambda t: E.div(t, bpos), a)
    add("div_denominator", lambda t: E.div(b, t), rng.uniform(0.5, 2.0, (3, 4)))
    m2 = Tensor(rng.standard_normal((4, 5)))
    add("matmul", lambda t: E.matmul(t, m2), a)
    bm = Tensor(rng.standard_normal((2, 3, 4)))
    add("matmul_batched", lambda t: E.matmul(bm, t), rng.standard_normal((2, 4, 2)))
    add("relu", E.relu, _away_from_zero(rng, (3, 4)))
    add("leaky_relu", lambda t: E.leaky_relu(t, 0.2), _away_from_zero(rng, (3, 4)))
    add("gelu", E.gelu, rng.standard_normal((3, 4)))
    add("tanh", E.tanh, rng.standard_normal((3, 4)))
    add("exp", E.exp, rng.standard_normal((3, 4)))
    add("log", E.log, rng.uniform(0.5, 2.0, (3, 4)))
    add("sqrt", E.sqrt, rng.uniform(0.5, 2.0, (3, 4)))
    add("abs", E.abs, _away_from_zero(rng, (3, 4)))
    add("softplus", E.softplus, 3 * rng.standard_normal((3, 4)))
    add("sum", lambda t: E.sum(t, 1, keepdims=True), a)
    add("mean", lambda t: E.mean(t, (0,)), a)
    add("var", lambda t: E.var(t, -1), a)
    add("softmax", lambda t: E.softmax(t, -1), a)
    add("logsumexp", lambda t: E.logsumexp(t, -1), a)
    add("concat", lambda t: E.concat([t, b], axis=1), a)
    add("stack", lambda t: E.stack([b, t], axis=0), a)
    add("slice_basic", lambda t: t[1:, ::2], a)
    add("slice_advanced", lambda t: t[np.array([0, 2, 0]), np.array([1, 1, 1])], a)
    add("reshape", lambda t: E.reshape(t, (2, 6)), a)
    add("permute", lambda t: E.permute(t, (2, 0, 1)), rng.standard_normal((2, 3, 4)))
    add("swapaxes", lambda t: E.swapaxes(t, 0, 2), rng.standard_normal((2, 3, 4)))

    img = rng.standard_normal((2, 3, 6, 7))
    add("pad2d_zeros", lambda t: E.pad2d(t, 2, "zeros"), img)
    add("pad2d_reflect", lambda t: E.pad2d(t, 3, "reflect"), img)
    w = Tensor(0.3 * rng.standard_normal((4, 3, 3, 3)))
    bias = Tensor(rng.standard_normal(4))
    add("conv2d_input", lambda t: E.conv2d(t, w, bias, stride=1, padding=1), img)
    add("conv2d_stride2_reflect", lambda t: E.conv2d(t, w, bias, stride=2, padding=1, pad_mode="reflect"),
        img)
    x_fixed = Tensor(img)
    add("conv2d_weight", lambda t: E.conv2d(x_fixed, t, bias, stride=2, padding=1),
        0.3 * rng.standard_normal((4, 3, 3, 3)))
    add("conv2d_bias", lambda t: E.conv2d(x_fixed, w, t, stride=1, padding=0), rng.standard_normal(4))
    wt = Tensor(0.3 * rng.standard_normal((3, 2, 4, 4)))
    add("conv_transpose2d_input", lambda t: E.conv_transpose2d(t, wt, None, stride=2, padding=1),
        rng.standard_normal((2, 3, 4, 5)))
    xt_fixed = Tensor(rng.standard_normal((2, 3, 4, 5)))
    add("conv_transpose2d_weight", lambda t: E.conv_transpose2d(xt_fixed, t, Tensor(np.ones(2)),
                                                                stride=2, padding=1),
        0.3 * rng.standard_normal((3, 2, 4, 4)))
    add("avg_pool2x2", E.avg_pool2x2, rng.standard_normal((2, 3, 6, 8)))
    add("upsample_nearest2x", E.upsample_nearest2x, rng.standard_normal((2, 3, 3, 4)))
    # sample points are data (box geometry), not differentiated
    pts = rng.uniform(-0.3, 6.3, (9, 2))
    add("bilinear_sample", lambda t: E.bilinear_sample(t, pts), rng.standard_normal((3, 6, 7)))
    return checks


def _tiny_config(seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, batch=1, steps=10,
                       backbone=BackboneConfig(image_size=32, base_channels=4, content_channels=8, style_dim=4),
                       aggregator=AggregatorConfig(patch_stride=2, token_dim=16, blocks=1, heads=2, mlp_dim=32),
                       nce=NceConfig(patches_per_layer=6, projection_dim=8, hidden_dim=8, instance_grid=2))


def composite_checks(seed: int = 0, n_indices: int = 24):
    """The three end-to-end paths: full translation, total generator loss, discriminator."""
    rng = np.random.default_rng([seed, 1])
    cfg = _tiny_config(seed)
    with E.default_dtype(np.float64):
        state = TrainState(cfg)
    size = cfg.backbone.image_size
    x = np.tanh(rng.standard_normal((1, 3, size, size)))
    y = np.tanh(rng.standard_normal((1, 3, size, size)))
    boxes = [[BoundingBox(12.0, 14.0, 14.0, 18.0)]]
    s = rng.standard_normal((1, cfg.backbone.style_dim))
    checks = []

    def translation_mean(t):
        y_hat, _, _ = state.model.translate(t, boxes, s)
        return E.mean(y_hat)

    idx = sorted(rng.choice(x.size, n_indices, replace=False).tolist())
    checks.append(("composite_encoder_aggregator_generator", translation_mean, x, idx))

    blk = state.model.aggregator.blocks[0]
    w0 = blk.qkv.weight.data.copy()

    def total_wrt_qkv(t):
        saved = blk.qkv.weight
        blk.qkv.weight = t
        try:
            terms, _ = generator_terms(state, Tensor(x), boxes, Tensor(y), s, np.random.default_rng(5))
            return total_loss(terms, cfg.weights)
        finally:
            blk.qkv.weight = saved

    idx = sorted(rng.choice(w0.size, n_indices, replace=False).tolist())
    # the loss is O(10) while these gradients are O(1e-5), so a larger step keeps
    # central-difference roundoff below the tolerance
    checks.append(("composite_total_loss_wrt_qkv_slice", total_wrt_qkv, w0, idx, 1e-4))

    with E.default_dtype(np.float64):
        disc = Discriminator(BackboneConfig(image_size=32, base_channels=4), np.random.default_rng(seed))
    xd = np.tanh(rng.standard_normal((1, 3, 32, 32)))
    with E.no_grad():
        oshape = disc(Tensor(xd)).shape
    r = Tensor(rng.standard_normal(oshape))
    idx = sorted(rng.choice(xd.size, n_indices, replace=False).tolist())
    checks.append(("composite_discriminator_logit_wrt_input", lambda t: E.sum(disc(t) * r), xd, idx))
    return checks


def run_suite(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    results = []
    with E.default_dtype(np.float64):
        for name, fn, x, idx, *step in primitive_checks(seed) + composite_checks(seed):
            t0 = time.perf_counter()
            err = E.grad_check(fn, x, eps=step[0] if step else eps, indices=idx)
            results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
