"""Differentiable operations on :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` for constants).
Convolution and pooling use strided window views, so their cost is one
im2col copy plus a matrix product.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _data(x, like: np.ndarray | None = None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    dtype = like.dtype if like is not None else np.float32
    return np.asarray(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _like_of(a, b) -> np.ndarray | None:
    if isinstance(a, Tensor):
        return a.data
    if isinstance(b, Tensor):
        return b.data
    return None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    like = _like_of(a, b)
    ad, bd = _data(a, like), _data(b, like)
    out = ad + bd

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    like = _like_of(a, b)
    ad, bd = _data(a, like), _data(b, like)
    out = ad - bd

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    like = _like_of(a, b)
    ad, bd = _data(a, like), _data(b, like)
    out = ad * bd

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    like = _like_of(a, b)
    ad, bd = _data(a, like), _data(b, like)
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = a.data
    if axis is None:
        out = np.asarray(x.sum(), dtype=x.dtype).reshape(1)

        def backward(g):
            return (np.broadcast_to(g.reshape(()), x.shape).copy(),)
    else:
        out = x.sum(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    x = a.data
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis), float(n))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(
            f"matmul inner dimension mismatch: {ad.shape[1]} (left columns) != {bd.shape[0]} (right rows)"
        )

    def backward(g):
        return g @ bd.T, ad.T @ g

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2:
        raise ValueError(f"linear expects (N, in_features) input, got shape {xd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear in_features mismatch: input has {xd.shape[1]}, weight expects {wd.shape[0]}")
    out = xd @ wd
    if bias is not None:
        out += bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd.T, xd.T @ g, gb

    return make_result(out, (x, weight, bias), backward, "linear")


# -- softmax family ----------------------------------------------------------

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (a,), backward, "softmax")


# -- convolution and pooling -------------------------------------------------

def _out_size(n: int, k: int, s: int, p: int, dim: str) -> int:
    if k > n + 2 * p:
        raise ValueError(f"kernel {dim} size {k} exceeds padded input {dim} size {n + 2 * p}")
    size = (n + 2 * p - k) // s + 1
    if size <= 0:
        raise ValueError(f"non-positive output {dim} size {size}")
    return size


def _scatter_windows(dwin: np.ndarray, padded_shape: tuple, stride: tuple, out_hw: tuple) -> np.ndarray:
    """Adjoint of the window view: sum (N,C,Ho,Wo,kh,kw) back onto the padded input."""
    sh, sw = stride
    ho, wo = out_hw
    kh, kw = dwin.shape[4], dwin.shape[5]
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dwin[:, :, :, :, i, j]
    return dxp


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {xd.shape}")
    if wd.ndim != 4:
        raise ValueError(f"conv2d expects (Cout, Cin, kh, kw) kernel, got shape {wd.shape}")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = wd.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input has Cin={c}, kernel expects Cin={cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = _out_size(h, kh, sh, ph, "height")
    wo = _out_size(w, kw, sw, pw, "width")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::sh, ::sw][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        cols = _windows(xp, kh, kw, sh, sw, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        dcols = g2 @ wmat
        if kh == 1 and kw == 1:
            dxp = np.zeros(xp.shape, dtype=dcols.dtype)
            dxp[:, :, :sh * (ho - 1) + 1:sh, :sw * (wo - 1) + 1:sw] = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            dwin = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dwin, xp.shape, (sh, sw), (ho, wo))
        gx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv2d")


def max_pool2d(x: Tensor, kernel_size, stride=None, padding=0) -> Tensor:
    """Max pooling; the gradient goes to the first maximal element in scan order."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"max_pool2d expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    kh, kw = _pair(kernel_size)
    sh, sw = _pair(stride if stride is not None else kernel_size)
    ph, pw = _pair(padding)
    ho = _out_size(h, kh, sh, ph, "height")
    wo = _out_size(w, kw, sw, pw, "width")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if (ph or pw) else xd
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dwin.reshape(n, c, ho, wo, kh, kw), xp.shape, (sh, sw), (ho, wo))
        return (dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel_size, stride=None) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"avg_pool2d expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    kh, kw = _pair(kernel_size)
    sh, sw = _pair(stride if stride is not None else kernel_size)
    ho = _out_size(h, kh, sh, 0, "height")
    wo = _out_size(w, kw, sw, 0, "width")
    if (kh, kw) == (h, w):
        out = xd.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / (kh * kw), xd.shape).copy(),)
    else:
        out = _windows(xd, kh, kw, sh, sw, ho, wo).mean(axis=(4, 5))

        def backward(g):
            dwin = np.broadcast_to((g / (kh * kw))[..., None, None], (n, c, ho, wo, kh, kw))
            return (_scatter_windows(dwin, xd.shape, (sh, sw), (ho, wo)),)

    return make_result(out, (x,), backward, "avg_pool2d")


def global_avg_pool2d(x: Tensor) -> Tensor:
    return avg_pool2d(x, x.shape[2:])


# -- normalization -----------------------------------------------------------

def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training normalizes with the biased batch variance and folds the batch
    statistics into the running buffers in place (``running = momentum *
    running + (1 - momentum) * batch``; the running variance is unbiased).
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm2d expects NCHW input, got shape {xd.shape}")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d affine shape mismatch: channels={c}, gamma={gamma.shape}, beta={beta.shape}")
    gd, bd = gamma.data, beta.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if training:
        if m < 2:
            raise ValueError("batch_norm2d in train mode needs at least two values per channel")
        mu = xd.mean(axis=axes)
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = centered * inv[None, :, None, None]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]

    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gd[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm2d")
