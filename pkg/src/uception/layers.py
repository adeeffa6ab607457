"""Parameterized layers.

A layer owns its parameters (named, stable across builds) but never owns
activations: ``forward`` returns ``(output, cache)`` and ``backward``
consumes that cache, so a built graph stays read-only during the forward
pass and can be shared across threads for inference. Parameter gradients
are accumulated into the ``grads`` dict passed to ``backward``.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import ConvSpec

TRAIN = "train"
INFER = "infer"


class Context:
    """Per-forward state: mode and the RNG dropout draws from (graph order)."""

    def __init__(self, mode=INFER, rng=None):
        if mode not in (TRAIN, INFER):
            raise ShapeError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.mode = mode
        self.rng = rng if isinstance(rng, np.random.Generator) or rng is None \
            else np.random.default_rng(rng)


def accumulate_grad(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


class Conv3d:
    def __init__(self, name, spec: ConvSpec, dtype=np.float32):
        self.name = name
        self.spec = spec
        self.w = np.zeros(spec.weight_shape(), dtype=dtype)
        self.b = np.zeros(spec.out_channels, dtype=dtype)

    def init_params(self, rng):
        # He fan-in initialization, zero bias
        fan_in = self.spec.in_channels * int(np.prod(self.spec.kernel))
        std = np.sqrt(2.0 / fan_in)
        self.w[...] = rng.normal(0.0, std, self.w.shape)

    def parameters(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x, ctx):
        return ops.conv3d(x, self.w, self.b, self.spec), x

    def backward(self, grad_out, cache, grads):
        gx, gw, gb = ops.conv3d_backward(cache, self.w, grad_out, self.spec)
        accumulate_grad(grads, f"{self.name}.w", gw)
        accumulate_grad(grads, f"{self.name}.b", gb)
        return gx


class ReLU:
    def parameters(self):
        return {}

    def forward(self, x, ctx):
        return ops.relu(x), x

    def backward(self, grad_out, cache, grads):
        return ops.relu_backward(grad_out, cache)


class Sigmoid:
    def parameters(self):
        return {}

    def forward(self, x, ctx):
        y = ops.sigmoid(x)
        return y, y

    def backward(self, grad_out, cache, grads):
        return ops.sigmoid_backward(grad_out, cache)


class Dropout:
    """Voxel-wise inverted dropout; identity when inferring or rate is 0."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def parameters(self):
        return {}

    def forward(self, x, ctx):
        if ctx.mode != TRAIN or self.rate == 0.0:
            return x, None
        if ctx.rng is None:
            raise ShapeError("training forward needs a seeded Context rng for dropout")
        y, mask = ops.dropout(x, self.rate, ctx.rng)
        return y, mask

    def backward(self, grad_out, cache, grads):
        if cache is None:
            return grad_out
        return ops.dropout_backward(grad_out, cache, self.rate)


class MaxPool3d:
    def __init__(self, window=(2, 2, 2), stride=(2, 2, 2), padding=ops.VALID):
        self.window = window
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return {}

    def forward(self, x, ctx):
        y, argmax = ops.maxpool3d(x, self.window, self.stride, self.padding)
        return y, (argmax, x.shape)

    def backward(self, grad_out, cache, grads):
        argmax, in_shape = cache
        return ops.maxpool3d_backward(grad_out, argmax, in_shape,
                                      self.window, self.stride, self.padding)


class UpsampleNearest:
    def __init__(self, factor=2):
        self.factor = factor

    def parameters(self):
        return {}

    def forward(self, x, ctx):
        return ops.upsample_nearest(x, self.factor), None

    def backward(self, grad_out, cache, grads):
        return ops.upsample_nearest_backward(grad_out, self.factor)


class Chain:
    """Run layers in sequence; backward replays them in reverse."""

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def forward(self, x, ctx):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, ctx)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out, caches, grads):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(grad_out, cache, grads)
        return grad_out


def conv_unit(name, in_channels, out_channels, kernel, stride=1, dropout_rate=0.0,
              dtype=np.float32):
    """conv -> ReLU -> dropout, the repeating unit of every hidden layer."""
    k = (kernel, kernel, kernel)
    s = (stride, stride, stride)
    spec = ConvSpec(in_channels, out_channels, k, s, ops.SAME)
    return Chain([Conv3d(name, spec, dtype), ReLU(), Dropout(dropout_rate)])
