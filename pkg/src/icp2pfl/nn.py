"""Residual convolutional denoiser with a hand-written reverse pass.

Layout is channels-last throughout: activations are ``(N, H, W, C)``.
All parameters live in one flat vector; :meth:`Denoiser.layers` hands out
views into it, so updating the vector updates the network.

Network::

    h0      = relu(conv_head(x))
    h_{b+1} = h_b + conv_b2(relu(conv_b1(h_b)))      b = 0 .. B-1
    out     = x + conv_tail(h_B)                      (global residual)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL = 3
_PAD = ((0, 0), (1, 1), (1, 1), (0, 0))


class NumericError(ArithmeticError):
    """A non-finite value appeared during forward or backward."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class Arch:
    blocks: int = 3
    channels: int = 16
    patch: int = 64
    residual: bool = True

    def __post_init__(self):
        if self.blocks < 0 or self.channels < 1 or self.patch < 1:
            raise ValueError(f"invalid architecture {self}")

    def conv_shapes(self):
        """(out_channels, in_channels) for every conv, in parameter order."""
        c = self.channels
        shapes = [(c, 1)]
        for _ in range(self.blocks):
            shapes += [(c, c), (c, c)]
        shapes.append((1, c))
        return shapes

    @property
    def n_params(self):
        return sum(o * i * KERNEL * KERNEL + o for o, i in self.conv_shapes())


class Denoiser:
    """Architecture descriptor plus a flat parameter vector.

    The compute dtype follows ``params.dtype``: float32 normally, float64
    for the finite-difference shadow copy made by :meth:`astype`.
    """

    def __init__(self, arch: Arch, params: np.ndarray):
        params = np.asarray(params)
        if params.ndim != 1 or params.size != arch.n_params:
            raise ValueError(
                f"expected {arch.n_params} parameters for {arch}, got shape {params.shape}")
        if params.dtype not in (np.float32, np.float64):
            params = params.astype(np.float32)
        if not np.isfinite(params).all():
            raise NumericError("non-finite parameter")
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: Arch, seed: int, tail_scale: float = 0.1,
             branch_scale: float = 0.0) -> Denoiser:
        """Fan-in scaled uniform init; biases start at zero.

        Convs feeding a ReLU use the He bound sqrt(6/fan_in); the two
        linear convs (second conv of a block, tail) use sqrt(3/fan_in).
        The tail is shrunk by ``tail_scale`` and each block's second conv by
        ``branch_scale``, so by default every residual branch starts at zero
        and a fresh network is close to the identity map.  Narrow networks
        otherwise start with a seed-dependent gain that can make plain SGD
        diverge in the first epoch.
        """
        rng = np.random.default_rng(seed)
        chunks = []
        shapes = arch.conv_shapes()
        for idx, (o, i) in enumerate(shapes):
            fan_in = i * KERNEL * KERNEL
            feeds_relu = idx == 0 or (idx % 2 == 1 and idx != len(shapes) - 1)
            bound = np.sqrt((6.0 if feeds_relu else 3.0) / fan_in)
            if idx == len(shapes) - 1:
                bound *= tail_scale
            elif idx > 0 and not feeds_relu:
                bound *= branch_scale
            chunks.append(rng.uniform(-bound, bound, size=o * i * KERNEL * KERNEL))
            chunks.append(np.zeros(o))
        return cls(arch, np.concatenate(chunks).astype(np.float32))

    @classmethod
    def zeros(cls, arch: Arch, dtype=np.float32) -> Denoiser:
        return cls(arch, np.zeros(arch.n_params, dtype=dtype))

    def astype(self, dtype) -> Denoiser:
        return Denoiser(self.arch, self.params.astype(dtype))

    def with_params(self, params) -> Denoiser:
        return Denoiser(self.arch, params)

    def copy(self) -> Denoiser:
        return Denoiser(self.arch, self.params.copy())

    def layers(self):
        """List of ``(weight (O, I, 3, 3), bias (O,))`` views into ``params``."""
        out = []
        pos = 0
        for o, i in self.arch.conv_shapes():
            n = o * i * KERNEL * KERNEL
            w = self.params[pos:pos + n].reshape(o, i, KERNEL, KERNEL)
            pos += n
            b = self.params[pos:pos + o]
            pos += o
            out.append((w, b))
        return out


def _conv(x, w, b=None):
    win = sliding_window_view(np.pad(x, _PAD), (KERNEL, KERNEL), axis=(1, 2))
    out = np.tensordot(win, w, axes=([3, 4, 5], [1, 2, 3]))
    if b is not None:
        out += b
    return out


def _conv_backward(x, w, dout):
    """Gradients of a same-padded 3x3 conv w.r.t. input, weight and bias."""
    win = sliding_window_view(np.pad(x, _PAD), (KERNEL, KERNEL), axis=(1, 2))
    dw = np.tensordot(dout, win, axes=([0, 1, 2], [0, 1, 2]))  # (O, I, 3, 3)
    db = dout.sum(axis=(0, 1, 2))
    # full correlation with the 180-degree rotated kernel, in/out swapped
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = _conv(dout, w_rot)
    return dx, dw, db


def _check(arr, layer, what="activation"):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite {what}", layer)


def _as_batch(model: Denoiser, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    p = model.arch.patch
    if x.ndim != 3 or x.shape[1:] != (p, p):
        raise ValueError(f"expected input of shape ({p}, {p}) or (N, {p}, {p}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x.astype(model.params.dtype, copy=False)[..., None], single


def _forward_cached(model: Denoiser, xb):
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(model, xb)


def _forward_impl(model, xb):
    layers = model.layers()
    cache = []
    h = np.maximum(_conv(xb, *layers[0]), 0)
    _check(h, 0)
    cache.append(h)
    for blk in range(model.arch.blocks):
        li = 1 + 2 * blk
        a = np.maximum(_conv(h, *layers[li]), 0)
        _check(a, li)
        r = _conv(a, *layers[li + 1])
        _check(r, li + 1)
        cache.append(a)
        h = h + r
        cache.append(h)
    out = _conv(h, *layers[-1])
    if model.arch.residual:
        out += xb
    _check(out, len(layers) - 1)
    return out, cache


def forward(model: Denoiser, x) -> np.ndarray:
    """Denoise one ``(H, W)`` patch or a ``(N, H, W)`` stack."""
    xb, single = _as_batch(model, x)
    out, _ = _forward_cached(model, xb)
    out = out[..., 0]
    return out[0] if single else out


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(d * d))


def value_and_grad(model: Denoiser, x, y) -> tuple[float, np.ndarray]:
    """Mean-squared-error loss and its gradient w.r.t. the flat parameters.

    With a stack of patches the loss is the mean over every pixel of every
    patch, which equals the mean of the per-patch losses.
    """
    xb, _ = _as_batch(model, x)
    yb = np.asarray(y)
    if yb.ndim == 2:
        yb = yb[None]
    if yb.shape != xb.shape[:3]:
        raise ValueError(f"target shape {np.shape(y)} does not match input {np.shape(x)}")
    yb = yb.astype(model.params.dtype, copy=False)[..., None]

    out, cache = _forward_cached(model, xb)
    with np.errstate(over="ignore", invalid="ignore"):
        return _backward_impl(model, xb, yb, out, cache)


def _backward_impl(model, xb, yb, out, cache):
    diff = out - yb
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dout = (2.0 / diff.size) * diff

    layers = model.layers()
    grads = [None] * len(layers)
    h_last = cache[-1]
    dh, dw, db = _conv_backward(h_last, layers[-1][0], dout)
    grads[-1] = (dw, db)
    for blk in reversed(range(model.arch.blocks)):
        li = 1 + 2 * blk
        h_in = cache[2 * blk]
        a = cache[2 * blk + 1]
        da, dw2, db2 = _conv_backward(a, layers[li + 1][0], dh)
        da *= a > 0
        dx1, dw1, db1 = _conv_backward(h_in, layers[li][0], da)
        _check(dx1, li, "gradient")
        grads[li] = (dw1, db1)
        grads[li + 1] = (dw2, db2)
        dh = dh + dx1
    dh = dh * (cache[0] > 0)
    _, dw0, db0 = _conv_backward(xb, layers[0][0], dh)
    grads[0] = (dw0, db0)

    flat = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in grads])
    flat = flat.astype(model.params.dtype, copy=False)
    _check(flat, None, "gradient")
    return loss, flat


def backward(model: Denoiser, x, y) -> np.ndarray:
    """d loss_mse(forward(model, x), y) / d params."""
    return value_and_grad(model, x, y)[1]


def predict(model: Denoiser, x, chunk: int = 64) -> np.ndarray:
    """Batched :func:`forward` over a large stack, ``chunk`` patches at a time."""
    x = np.asarray(x)
    return np.concatenate([forward(model, x[i:i + chunk]) for i in range(0, len(x), chunk)])
