"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a backward
closure through :func:`record`. Reductions use numpy's fixed pairwise order,
so identical inputs always give bit-identical results.
"""

from __future__ import annotations

import builtins
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, UnknownOpError, get_default_dtype, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), bw)


# -- elementwise unary ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return record("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return record("gelu", out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1.0 - out ** 2),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    xd = x.data
    out = np.logaddexp(0.0, xd)

    def bw(g):
        sig = np.exp(-np.logaddexp(0.0, -xd))
        return (g * sig,)

    return record("softplus", out, (x,), bw)


# -- reductions --------------------------------------------------------------

def _axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _axes(axes, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=ax, keepdims=keepdims)
    return record("sum", np.asarray(out), (x,), lambda g: (_expand(g, shape, ax, keepdims).copy(),))


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes(axes, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in ax])) if ax else 1
    out = x.data.mean(axis=ax, keepdims=keepdims)
    return record("mean", np.asarray(out), (x,), lambda g: (_expand(g / n, shape, ax, keepdims).copy(),))


def var(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    ax = _axes(axes, x.ndim)
    shape = x.shape
    n = int(np.prod([shape[a] for a in ax])) if ax else 1
    centered = x.data - x.data.mean(axis=ax, keepdims=True)
    out = (centered ** 2).mean(axis=ax, keepdims=keepdims)

    def bw(g):
        return (_expand(g, shape, ax, keepdims) * (2.0 / n) * centered,)

    return record("var", np.asarray(out), (x,), bw)


def max_detached(x: Tensor, axes=None, keepdims: bool = True) -> Tensor:
    """Maximum as a constant (used for log-sum-exp stabilisation)."""
    return Tensor(x.data.max(axis=_axes(axes, x.ndim), keepdims=keepdims))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = max_detached(x, axis, keepdims=True)
    s = log(sum(exp(sub(x, m)), axis, keepdims=True))
    return reshape(add(s, m), tuple(n for i, n in enumerate(x.shape) if i != axis % x.ndim))


# -- shape manipulation ------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return record("concat", out, tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (builtins.slice, int, type(None), type(Ellipsis))) for i in index)


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    """Basic or advanced indexing; advanced indices scatter-add on backward."""
    try:
        out = x.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return record("slice", np.array(out, copy=True), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return record("permute", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


# -- image ops -------------------------------------------------------------------

def _reflect_pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")


def _reflect_pad_adjoint(g: np.ndarray, p: int) -> np.ndarray:
    # fold the reflected border back onto its source rows/columns
    H = g.shape[2] - 2 * p
    W = g.shape[3] - 2 * p
    rows = g[:, :, p:p + H, :].copy()
    for r in range(1, p + 1):
        rows[:, :, r] += g[:, :, p - r]
        rows[:, :, H - 1 - r] += g[:, :, p + H - 1 + r]
    out = rows[:, :, :, p:p + W].copy()
    for c in range(1, p + 1):
        out[:, :, :, c] += rows[:, :, :, p - c]
        out[:, :, :, W - 1 - c] += rows[:, :, :, p + W - 1 + c]
    return out


def pad2d(x: Tensor, padding: int, mode: str = "zeros") -> Tensor:
    if padding == 0:
        return x
    p = padding
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        return record("pad2d", out, (x,), lambda g: (g[:, :, p:-p, p:-p].copy(),))
    if mode == "reflect":
        if min(x.shape[2:]) <= p:
            raise ShapeError(f"pad2d: reflect padding {p} too large for shape {x.shape}")
        return record("pad2d", _reflect_pad(x.data, p), (x,),
                      lambda g: (_reflect_pad_adjoint(g, p),))
    raise ValueError(f"pad2d: unknown pad mode {mode!r}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_valid(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_valid_adjoint(g: np.ndarray, w: np.ndarray, stride: int, in_shape) -> np.ndarray:
    """Adjoint of ``_conv_valid`` with respect to its input."""
    B, C, H, W = in_shape
    kh, kw = w.shape[2], w.shape[3]
    Ho, Wo = g.shape[2], g.shape[3]
    cols = np.tensordot(w, g, axes=([0], [1]))  # C, kh, kw, B, Ho, Wo
    out = np.zeros((C, B, H, W), dtype=g.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_valid_wgrad(xp: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    win = _windows(xp, kh, kw, stride)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv(op: str, x: Tensor, w: Tensor, in_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"{op}: incompatible shapes {x.shape} and {w.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation, NCHW input and OIhw weight."""
    _check_conv("conv2d", x, w, 1)
    xp = pad2d(x, padding, pad_mode)
    kh, kw = w.shape[2], w.shape[3]
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    xpd, wd = xp.data, w.data

    def bw(g):
        gx = _conv_valid_adjoint(g, wd, stride, xpd.shape) if xp.requires_grad else None
        gw = _conv_valid_wgrad(xpd, g, stride, kh, kw) if w.requires_grad else None
        return gx, gw

    out = record("conv2d", _conv_valid(xpd, wd, stride), (xp, w), bw)
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution, weight laid out as (in, out, kh, kw).

    Exactly the adjoint of :func:`conv2d` with the same weight, stride and
    zero padding.
    """
    _check_conv("conv_transpose2d", x, w, 0)
    B, _, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    full_shape = (B, w.shape[1], (H - 1) * stride + kh, (W - 1) * stride + kw)
    p = padding
    if full_shape[2] <= 2 * p or full_shape[3] <= 2 * p:
        raise ShapeError(f"conv_transpose2d: padding {p} too large for shape {x.shape}")
    xd, wd = x.data, w.data
    full = _conv_valid_adjoint(xd, wd, stride, full_shape)
    out = full[:, :, p:full_shape[2] - p, p:full_shape[3] - p]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gx = _conv_valid(gp, wd, stride) if x.requires_grad else None
        gw = _conv_valid_wgrad(gp, xd, stride, kh, kw) if w.requires_grad else None
        return gx, gw

    out = record("conv_transpose2d", np.ascontiguousarray(out), (x, w), bw)
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


def avg_pool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2: spatial dims of {x.shape} must be even")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return record("avg_pool2x2", out, (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", out, (x,), bw)


def _bilinear_corners(points: np.ndarray, H: int, W: int):
    u = np.clip(points[:, 0] - 0.5, 0.0, W - 1)
    v = np.clip(points[:, 1] - 0.5, 0.0, H - 1)
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = u - x0
    wy = v - y0
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    return corners, weights


def bilinear_sample(fmap: Tensor, points) -> Tensor:
    """Sample a C×H×W map at continuous (x, y) points; returns P×C.

    Pixel ``i`` is centred at ``i + 0.5``; points outside the valid range
    are clamped to the border.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise ShapeError("bilinear_sample: empty point list")
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected C×H×W map, got {fmap.shape}")
    C, H, W = fmap.shape
    corners, weights = _bilinear_corners(points, H, W)
    m = fmap.data
    out = np.zeros((len(points), C), dtype=m.dtype)
    for (yy, xx), wt in zip(corners, weights):
        out += wt[:, None] * m[:, yy, xx].T

    def bw(g):
        gm = np.zeros((C, H, W), dtype=g.dtype)
        for (yy, xx), wt in zip(corners, weights):
            np.add.at(gm, (builtins.slice(None), yy, xx), (wt[:, None] * g).T)
        return (gm,)

    return record("bilinear_sample", out, (fmap,), bw)


# -- dispatch ------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "avg_pool2x2": avg_pool2x2,
    "upsample_nearest2x": upsample_nearest2x,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "gelu": gelu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "abs": abs,
    "softmax": softmax,
    "sum": sum,
    "mean": mean,
    "var": var,
    "sqrt": sqrt,
    "concat": concat,
    "slice": slice,
    "reshape": reshape,
    "permute": permute,
    "pad2d": pad2d,
    "bilinear_sample": bilinear_sample,
}

_LIST_INPUT = {"concat"}


def primitive_forward(op_kind: str, inputs, **attrs) -> Tensor:
    """Run a primitive by name, e.g. ``primitive_forward("conv2d", [x, w], stride=2)``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op {op_kind!r}") from None
    if op_kind in _LIST_INPUT:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
