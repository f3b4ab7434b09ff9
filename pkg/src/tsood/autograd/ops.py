"""Primitive kernels with their vector-Jacobian products.

Every kernel validates its inputs (shape, finiteness), computes the forward
value with numpy and, when a tape is active and some input requires grad,
records a closure mapping the output cotangent to input cotangents.
Reductions accumulate in float64 and cast back to the input dtype.
"""
from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape


def _check_finite(kernel: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(kernel)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _emit(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        tape.record(t, inputs, vjp)
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kernel: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, a.shape, b.shape) from None


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    _check_finite("add", a.data, b.data)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    _check_finite("sub", a.data, b.data)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    _check_finite("mul", a.data, b.data)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape),
                            unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    _check_finite("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _emit(out, (a, b), vjp)


# --- elementwise unary ------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    _check_finite("neg", x.data)
    return _emit(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    _check_finite("log", x.data)
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    _check_finite("sqrt", x.data)
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    _check_finite("square", x.data)
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x.data)
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype, copy=False)
    return _emit(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    _check_finite("tanh", x.data)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1 - out * out),))


# --- linear algebra ---------------------------------------------------------

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    _check_finite("matmul", a.data, b.data)

    def vjp(g):
        return (unbroadcast(g @ _swap(b.data), a.shape),
                unbroadcast(_swap(a.data) @ g, b.shape))

    return _emit(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight, None))
    return add(y, bias) if bias is not None else y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation: x (B, Cin, L), weight (Cout, Cin, K)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv1d", weight.shape, bias.shape, detail="bias")
    B, cin, L = x.shape
    cout, _, K = weight.shape
    if padding == "same":
        left = (K - 1) // 2
        right = K - 1 - left
    elif padding == "valid":
        left = right = 0
        if L < K:
            raise ShapeError("conv1d", x.shape, weight.shape, detail="valid padding needs L >= K")
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_finite("conv1d", *(t.data for t in inputs))

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if (left or right) else x.data
    lout = xp.shape[2] - K + 1
    cols = sliding_window_view(xp, K, axis=2)  # (B, Cin, Lout, K)
    cols = cols.transpose(0, 2, 1, 3).reshape(B * lout, cin * K)
    wmat = weight.data.reshape(cout, cin * K)
    out = (cols @ wmat.T).reshape(B, lout, cout).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(B, lout, cin, K)
        dxp = np.zeros((B, cin, xp.shape[2]), dtype=g.dtype)
        for k in range(K):
            dxp[:, :, k:k + lout] += dcols[:, :, :, k].transpose(0, 2, 1)
        gx = dxp[:, :, left:left + L]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _emit(out, inputs, vjp)


# --- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, tuple(axes), detail="axes")
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inv),))


def slice(x: Tensor, idx) -> Tensor:  # noqa: A001 - kernel name
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(np.array(out, copy=True), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(out, tensors, vjp)


# --- reductions -------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_finite("sum", x.data)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    return _emit(np.asarray(out), (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("mean", x.data)
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    n = x.size // builtins.max(np.asarray(out).size, 1)
    return _emit(np.asarray(out), (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / n,))


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_finite("max", x.data)
    out = np.max(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        full = _expand(np.asarray(out), x.shape, axis, keepdims)
        mask = (x.data == full).astype(g.dtype)
        mask /= np.sum(mask, axis=axis, keepdims=True)
        return (_expand(g, x.shape, axis, keepdims) * mask,)

    return _emit(np.asarray(out), (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing (time) axis."""
    return mean(x, axis=-1)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", x.data)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = (z / np.sum(z, axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (out * (g - inner),)

    return _emit(out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    _check_finite("logsumexp", x.data)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True, dtype=np.float64)
    full = (m + np.log(s)).astype(x.dtype)
    out = full if keepdims else np.squeeze(full, axis=axis)

    def vjp(g):
        p = np.exp(x.data - full)
        return (_expand(g, x.shape, axis, keepdims) * p,)

    return _emit(out, (x,), vjp)


# --- normalization ----------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    _check_finite("layer_norm", x.data, gamma.data, beta.data)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(out, (x, gamma, beta), vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (B, C) or (B, C, L) inputs.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in common frameworks).
    """
    if x.ndim not in (2, 3) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    _check_finite("batch_norm", x.data, gamma.data, beta.data)
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    n = x.size // x.shape[1]
    if training:
        if n < 2:
            raise ShapeError("batch_norm", x.shape, detail="training needs >1 value per channel")
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = ((x.data - mu.reshape(bshape).astype(x.dtype)) * inv).astype(x.dtype)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def vjp(g):
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        else:
            gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit(out, (x, gamma, beta), vjp)
