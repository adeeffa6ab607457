"""Primitive layer operations: forward and exact reverse-mode backward.

Convolution is cross-correlation (no kernel flip). The inner loop runs
over kernel offsets, turning each offset into one (out_c, in_c) x
(in_c, voxels) matmul; this keeps peak memory at one volume copy instead
of a full im2col matrix and vectorizes well for the few-channel, large
volume shapes this engine lives on.

All functions are pure: they allocate their outputs and never mutate
arguments. Dropout takes an explicit seed or Generator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import AXES

SAME = "same"
VALID = "valid"


@dataclass(frozen=True)
class ConvSpec:
    """Static geometry of one convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = SAME

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ShapeError("channel counts must be positive")
        if len(self.kernel) != 3 or len(self.stride) != 3:
            raise ShapeError("kernel and stride must be 3-tuples")
        for k in self.kernel:
            if k <= 0 or k % 2 == 0:
                raise ShapeError(f"kernel extents must be odd and positive, got {self.kernel}")
        for s in self.stride:
            if s <= 0:
                raise ShapeError(f"strides must be positive, got {self.stride}")
        if self.padding not in (SAME, VALID):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def pad(self):
        if self.padding == SAME:
            return tuple((k - 1) // 2 for k in self.kernel)
        return (0, 0, 0)

    def out_spatial(self, in_spatial):
        """floor((in + 2*pad - k) / stride) + 1 per axis."""
        out = []
        for ax, (n, k, s, p) in enumerate(zip(in_spatial, self.kernel, self.stride, self.pad)):
            m = (n + 2 * p - k) // s + 1
            if m < 1:
                raise ShapeError(
                    f"kernel {k} does not fit input extent {n} on axis {AXES[ax + 2]!r}",
                    axis=AXES[ax + 2],
                )
            out.append(m)
        return tuple(out)

    def weight_shape(self):
        return (self.out_channels, self.in_channels) + tuple(self.kernel)


def _check_conv_args(x, weights, spec):
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-axis, got ndim={x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv3d: axis 'channel' has extent {x.shape[1]}, spec expects {spec.in_channels}",
            axis="channel",
        )
    if tuple(weights.shape) != spec.weight_shape():
        raise ShapeError(
            f"conv3d: weight shape {tuple(weights.shape)} does not match spec {spec.weight_shape()}"
        )


def _pad_input(x, pad):
    pd, ph, pw = pad
    if pd == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d(x, weights, bias, spec):
    """3D cross-correlation with per-output-channel bias.

    x: (n, in_c, d, h, w); weights: (out_c, in_c, kd, kh, kw); bias: (out_c,).
    """
    x = np.asarray(x)
    weights = np.asarray(weights, dtype=x.dtype)
    _check_conv_args(x, weights, spec)
    n = x.shape[0]
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    do, ho, wo = spec.out_spatial(x.shape[2:])
    xp = _pad_input(x, spec.pad)
    svox = do * ho * wo
    out = np.zeros((n, spec.out_channels, svox), dtype=x.dtype)
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                xs = xp[:, :, dz:dz + sd * do:sd, dy:dy + sh * ho:sh, dx:dx + sw * wo:sw]
                out += weights[:, :, dz, dy, dx] @ xs.reshape(n, spec.in_channels, svox)
    out = out.reshape(n, spec.out_channels, do, ho, wo)
    if bias is not None:
        bias = np.asarray(bias, dtype=x.dtype)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(
                f"conv3d: bias length {bias.shape} does not match out_channels {spec.out_channels}"
            )
        out += bias[None, :, None, None, None]
    return out


def conv3d_backward(x, weights, grad_out, spec):
    """Exact gradients of conv3d wrt input, weights and bias."""
    x = np.asarray(x)
    weights = np.asarray(weights, dtype=x.dtype)
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    _check_conv_args(x, weights, spec)
    n = x.shape[0]
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    do, ho, wo = spec.out_spatial(x.shape[2:])
    if grad_out.shape != (n, spec.out_channels, do, ho, wo):
        raise ShapeError(
            f"conv3d_backward: grad_out shape {grad_out.shape} does not match "
            f"output shape {(n, spec.out_channels, do, ho, wo)}"
        )
    xp = _pad_input(x, spec.pad)
    svox = do * ho * wo
    gyf = grad_out.reshape(n, spec.out_channels, svox)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weights)
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                sl = (
                    slice(None),
                    slice(None),
                    slice(dz, dz + sd * do, sd),
                    slice(dy, dy + sh * ho, sh),
                    slice(dx, dx + sw * wo, sw),
                )
                xs = xp[sl].reshape(n, spec.in_channels, svox)
                grad_w[:, :, dz, dy, dx] = np.matmul(
                    gyf, xs.transpose(0, 2, 1)).sum(axis=0)
                grad_xp[sl] += (weights[:, :, dz, dy, dx].T @ gyf).reshape(
                    n, spec.in_channels, do, ho, wo
                )
    pd, ph, pw = spec.pad
    d, h, w = x.shape[2:]
    grad_x = grad_xp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
    if pd or ph or pw:
        grad_x = np.ascontiguousarray(grad_x)
    grad_b = gyf.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


def _pool_geometry(shape, window, stride, padding):
    pad = tuple((k - 1) // 2 for k in window) if padding == SAME else (0, 0, 0)
    out = []
    for ax, (nn, k, s, p) in enumerate(zip(shape, window, stride, pad)):
        span = nn + 2 * p - k
        if span < 0 or span % s != 0:
            raise ShapeError(
                f"maxpool3d: extent {nn} on axis {AXES[ax + 2]!r} is not tileable by "
                f"window {k} stride {s} ({padding} mode)",
                axis=AXES[ax + 2],
            )
        out.append(span // s + 1)
    return tuple(out), pad


def maxpool3d(x, window=(2, 2, 2), stride=(2, 2, 2), padding=VALID):
    """Max pooling; returns (pooled, argmax offsets) for exact backward routing.

    Valid mode requires each spatial extent to tile exactly (even extents
    for the default 2-cube); Same mode pads with -inf so border maxima
    come only from real voxels.
    """
    x = np.asarray(x)
    n, c = x.shape[:2]
    (do, ho, wo), pad = _pool_geometry(x.shape[2:], window, stride, padding)
    pd, ph, pw = pad
    if pd or ph or pw:
        xp = np.pad(
            x,
            ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)),
            constant_values=-np.inf,
        )
    else:
        xp = x
    kd, kh, kw = window
    sd, sh, sw = stride
    out = np.full((n, c, do, ho, wo), -np.inf, dtype=x.dtype)
    argmax = np.zeros((n, c, do, ho, wo), dtype=np.int32)
    off = 0
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                xs = xp[:, :, dz:dz + sd * do:sd, dy:dy + sh * ho:sh, dx:dx + sw * wo:sw]
                better = xs > out
                np.copyto(out, xs, where=better)
                argmax[better] = off
                off += 1
    return out, argmax


def maxpool3d_backward(grad_out, argmax, in_shape, window=(2, 2, 2), stride=(2, 2, 2),
                       padding=VALID):
    """Route each output gradient to the voxel that won its window."""
    grad_out = np.asarray(grad_out)
    (do, ho, wo), pad = _pool_geometry(in_shape[2:], window, stride, padding)
    pd, ph, pw = pad
    kd, kh, kw = window
    sd, sh, sw = stride
    padded = (in_shape[0], in_shape[1], in_shape[2] + 2 * pd,
              in_shape[3] + 2 * ph, in_shape[4] + 2 * pw)
    grad_xp = np.zeros(padded, dtype=grad_out.dtype)
    off = 0
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                # fixed offset -> injective window-to-voxel map, slice add is safe
                grad_xp[:, :, dz:dz + sd * do:sd, dy:dy + sh * ho:sh,
                        dx:dx + sw * wo:sw] += grad_out * (argmax == off)
                off += 1
    if pd or ph or pw:
        return np.ascontiguousarray(
            grad_xp[:, :, pd:pd + in_shape[2], ph:ph + in_shape[3], pw:pw + in_shape[4]]
        )
    return grad_xp


def upsample_nearest(x, factor=2):
    """Replicate every voxel over a factor^3 block."""
    x = np.asarray(x)
    y = x.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)
    return y


def upsample_nearest_backward(grad_out, factor=2):
    """Adjoint of replication: sum each factor^3 block."""
    g = np.asarray(grad_out)
    n, c, d, h, w = g.shape
    if d % factor or h % factor or w % factor:
        raise ShapeError("upsample backward: grad extents not divisible by factor")
    g = g.reshape(n, c, d // factor, factor, h // factor, factor, w // factor, factor)
    return g.sum(axis=(3, 5, 7))


def concat_channels(xs):
    """Concatenate along the channel axis; all inputs share (n, d, h, w)."""
    xs = [np.asarray(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels: empty input sequence")
    head = xs[0]
    for i, x in enumerate(xs[1:], start=1):
        if x.shape[0] != head.shape[0] or x.shape[2:] != head.shape[2:]:
            raise ShapeError(
                f"concat_channels: input {i} has frame {x.shape[0], *x.shape[2:]}, "
                f"expected {head.shape[0], *head.shape[2:]}"
            )
    if len(xs) == 1:
        return head.copy()
    return np.concatenate(xs, axis=1)


def concat_channels_backward(grad_out, channel_counts):
    """Slice the gradient back per input, in order."""
    grads = []
    start = 0
    for c in channel_counts:
        grads.append(np.ascontiguousarray(grad_out[:, start:start + c]))
        start += c
    if start != grad_out.shape[1]:
        raise ShapeError(
            f"concat_channels_backward: channel counts sum to {start}, "
            f"gradient has {grad_out.shape[1]}"
        )
    return grads


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    # evaluate on the negative half-line only, so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1.0 - y)


def _as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dropout(x, rate, rng):
    """Inverted dropout: zero each voxel with probability rate, scale survivors.

    rng is an integer seed or a numpy Generator. Returns (output, keep mask).
    """
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x)
    if rate == 0.0:
        return x.copy(), np.ones_like(x)
    gen = _as_generator(rng)
    mask = (gen.random(x.shape) >= rate).astype(x.dtype)
    return x * mask * (1.0 / (1.0 - rate)), mask


def dropout_backward(grad_out, mask, rate):
    if rate == 0.0:
        return np.asarray(grad_out).copy()
    return grad_out * mask * (1.0 / (1.0 - rate))
