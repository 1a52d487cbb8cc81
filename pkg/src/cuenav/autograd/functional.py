"""Differentiable primitives used by the navigation network.

Layouts follow the usual NCHW convention. Convolution is lowered to a
matrix product over extracted patches (im2col); its backward pass scatters
patch gradients back with one strided add per kernel tap.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor

# When a list is installed here, piecewise ops append their branch pattern so
# gradient checks can tell when a finite difference straddles a kink.
_SWITCH_LOG: list | None = None


def _log_switch(pattern: np.ndarray) -> None:
    if _SWITCH_LOG is not None:
        _SWITCH_LOG.append(np.packbits(pattern))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor.from_op(out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor.from_op(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return Tensor.from_op(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    _log_switch(inside)

    def backward(g):
        return (g * inside,)

    return Tensor.from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    active = x.data > 0
    _log_switch(active)

    def backward(g):
        return (g * active,)

    return Tensor.from_op(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so neither branch overflows exp
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_op(out, (x,), backward)


# reductions and reshaping ------------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    # dividing (not multiplying by 1/n) keeps the mean of a constant exact
    return div(sum(x, axis), float(n))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward)


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along axis 1."""
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:1] + x.shape[2:] != ref[:1] + ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=1)
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return Tensor.from_op(out, xs, backward)


def stack_rows(xs: list[Tensor]) -> Tensor:
    """Concatenate along axis 0 (batch)."""
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=0)
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return Tensor.from_op(out, xs, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor.from_op(out, (x,), backward)


# dense layers ------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (B, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor.from_op(out, parents, backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (B*Ho*Wo, k*k*C), columns ordered (tap_i, tap_j, channel)
    b, c = xp.shape[:2]
    cols = np.empty((b, ho, wo, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    d = dcols.reshape(b, ho, wo, k * k, c)
    acc = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            acc[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i * k + j, :]
    if padding:
        acc = acc[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` has shape (Cout, Cin, K, K)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ValueError(f"conv2d: weight shape {weight.shape} does not match input shape {x.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ValueError(f"conv2d: kernel {k} does not fit padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gcol = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gcol.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = gcol @ wmat
            if k == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = dcols.reshape(b, ho, wo, cin).transpose(0, 3, 1, 2)
            else:
                gx = _col2im(dcols, x.shape, k, stride, padding, ho, wo)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, parents, backward)


# pooling / resampling ----------------------------------------------------------

def avg_pool_global(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ValueError(f"avg_pool_global expects 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, factor: int, dtype_str: str) -> np.ndarray:
    # half-pixel centres, edges clamped
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m.astype(dtype_str)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of (B, C, H, W) by an integer factor."""
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear expects 4-D input, got {x.shape}")
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    _, _, h, w = x.shape
    mh = _bilinear_matrix(h, factor, x.data.dtype.str)
    mw = _bilinear_matrix(w, factor, x.data.dtype.str)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor.from_op(out, (x,), backward)


def scale_by_learned_weights(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply channel ``c`` of (B, C, H, W) by ``weights[c]``."""
    if weights.ndim != 1 or x.ndim != 4 or weights.shape[0] != x.shape[1]:
        raise ValueError(f"scale_by_learned_weights: weights {weights.shape} do not match input {x.shape}")
    return mul(x, reshape(weights, (1, -1, 1, 1)))
