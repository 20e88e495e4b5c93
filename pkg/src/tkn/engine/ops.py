"""Forward operators and their gradient rules.

Every public function accepts :class:`~tkn.engine.tensor.Tensor` inputs,
computes the forward result with numpy, and registers a gradient closure on
the active tape when any input lies on a gradient path.  With no active tape
these are plain numpy computations.

Conventions: convolution is cross-correlation with zero padding; image
tensors are ``[N, C, H, W]``; conv weights are ``[C_out, C_in, k, k]`` and
transposed-conv weights ``[C_in, C_out, k, k]`` so that
``conv2d_transpose(y, w)`` is the exact adjoint of ``conv2d(x, w)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, active_tape

__all__ = [
    "add", "sub", "mul", "div", "neg", "pow_scalar", "sqrt", "exp",
    "sigmoid", "relu", "leaky_relu", "matmul", "reshape", "transpose",
    "concat", "slice_axis", "sum", "mean", "softmax", "conv2d",
    "conv2d_transpose", "group_norm", "layer_norm",
]


def _apply(out_data, inputs, grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.tracked() for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply(a.data * b.data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _apply(a.data / b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _apply(out, (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    return pow_scalar(a, 0.5)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 takes the positive branch
    out = np.maximum(a.data, 0.0)
    return _apply(out, (a,), lambda g: (g * (a.data >= 0),))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    out = a.data * slope
    np.maximum(out, a.data, out=out)

    def grad_fn(g):
        return (g * np.where(a.data >= 0, 1.0, slope),)

    return _apply(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _apply(out, (a, b), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _apply(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply(out, tuple(tensors), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _apply(a.data[index].copy(), (a,), grad_fn)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _apply(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _apply(out, (a,), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return _apply(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolutions


def _gather_cols(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> im2col matrix [C*k*k, N*ho*wo]."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    n, c = xp.shape[0], xp.shape[1]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _scatter_cols(prod: np.ndarray, h: int, wd: int, k: int, stride: int,
                  hb: int, wb: int) -> np.ndarray:
    """Adjoint of :func:`_gather_cols`.

    ``prod`` is ``[C, k, k, N, h, wd]`` tap products; returns ``[C, N, hb, wb]``
    with each tap added at its strided offset.  Taps are grouped by output
    residue class so accumulation runs over contiguous memory.
    """
    c, _, _, n = prod.shape[:4]
    buf = np.zeros((c, n, hb, wb), dtype=prod.dtype)
    for a in range(min(stride, k)):
        la = h + (k - 1 - a) // stride
        for b in range(min(stride, k)):
            lb = wd + (k - 1 - b) // stride
            acc = np.zeros((c, n, la, lb), dtype=prod.dtype)
            for di in range(a, k, stride):
                r = di // stride
                for dj in range(b, k, stride):
                    q = dj // stride
                    acc[:, :, r:r + h, q:q + wd] += prod[:, di, dj]
            buf[:, :, a:a + stride * la:stride, b:b + stride * lb:stride] = acc
    return buf


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding over ``[N, C, H, W]`` input."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {w.shape}")
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(
            f"conv2d kernel {k}x{k} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _gather_cols(xp, k, stride, ho, wo)  # [C k k, N ho wo]
    wflat = w.data.reshape(co, c * k * k)
    out = np.ascontiguousarray(
        (wflat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gflat = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        gw = (gflat @ cols.T).reshape(co, c, k, k)
        gcols = (wflat.T @ gflat).reshape(c, k, k, n, ho, wo)
        gxp = _scatter_cols(gcols, ho, wo, k, stride,
                            h + 2 * padding, wd + 2 * padding)
        gx = gxp.transpose(1, 0, 2, 3)[:, :, padding:padding + h,
                                       padding:padding + wd]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply(out, inputs, grad_fn)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight layout ``[C_in, C_out, k, k]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d_transpose expects 4-D input and weight, got {x.shape}, {w.shape}"
        )
    n, c, h, wd = x.shape
    ci, co, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d_transpose kernel must be square odd, got {w.shape}")
    if ci != c:
        raise ShapeError(
            f"conv2d_transpose channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if stride < 1:
        raise ValueError(f"conv2d_transpose stride must be >= 1, got {stride}")
    if not 0 <= output_padding < stride:
        raise ValueError(
            f"output_padding must lie in [0, stride), got {output_padding} with stride {stride}"
        )
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d_transpose output extent {ho}x{wo} <= 0 for input {x.shape}"
        )
    hb = (h - 1) * stride + k + output_padding
    wb = (wd - 1) * stride + k + output_padding

    xmat = x.data.transpose(1, 0, 2, 3).reshape(ci, n * h * wd)
    prod = (w.data.reshape(ci, co * k * k).T @ xmat).reshape(co, k, k, n, h, wd)
    buf = _scatter_cols(prod, h, wd, k, stride, hb, wb)
    out = buf[:, :, padding:padding + ho, padding:padding + wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def grad_fn(g):
        gbuf = np.zeros((n, co, hb, wb), dtype=g.dtype)
        gbuf[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols = _gather_cols(gbuf, k, stride, h, wd)  # [CO k k, N h wd]
        wflat = w.data.reshape(ci, co * k * k)
        gx = np.ascontiguousarray(
            (wflat @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3))
        gw = (xmat @ gcols.T).reshape(ci, co, k, k)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# normalization (fused forward/backward)


def _standardize_grad(g_hat, xhat, inv, axis):
    """Backward of xhat = (x - mean(x)) / sqrt(var(x) + eps)."""
    term = g_hat - g_hat.mean(axis=axis, keepdims=True)
    term -= xhat * (g_hat * xhat).mean(axis=axis, keepdims=True)
    return inv * term


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group standardization over ``[N, C, H, W]`` plus channel affine."""
    if eps <= 0:
        raise ValueError(f"group_norm eps must be > 0, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if c % num_groups != 0:
        raise ShapeError(f"channels {c} not divisible by {num_groups} groups")
    per = c // num_groups
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2)  # [N, G]
    inv = 1.0 / np.sqrt(xg.var(axis=2) + eps)
    # fold standardization and affine into one per-(sample, channel) scale/shift
    inv_c = np.repeat(inv, per, axis=1)[:, :, None, None]
    mu_c = np.repeat(mu, per, axis=1)[:, :, None, None]
    scale = inv_c * gamma.data[None, :, None, None]
    out = x.data * scale
    out += beta.data[None, :, None, None] - mu_c * scale

    def grad_fn(g):
        xhat = ((x.data - mu_c) * inv_c).reshape(n, num_groups, -1)
        dgamma = (g * xhat.reshape(n, c, h, w)).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        g_hat = (g * gamma.data[None, :, None, None]).reshape(n, num_groups, -1)
        gx = _standardize_grad(g_hat, xhat, inv[:, :, None], axis=2)
        return gx.reshape(n, c, h, w), dgamma, dbeta

    return _apply(out, (x, gamma, beta), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply per-feature affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = _standardize_grad(g * gamma.data, xhat, inv, axis=-1)
        return gx, dgamma, dbeta

    return _apply(out, (x, gamma, beta), grad_fn)
