"""Minimal dense/convolutional network stack with exact backprop, a Nadam
optimizer, soft target updates, and a FLOPs estimator.

Layers expose a functional interface: forward returns (output, cache) and
backward consumes that cache, so a frozen network can be evaluated from
several threads at once.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description, used for FLOPs accounting."""

    kind: str
    input_size: Optional[int] = None
    output_size: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    input_width: Optional[int] = None
    activation: Optional[str] = None


def conv_output_width(input_width: int, kernel: int, stride: int) -> int:
    """(w_i - v) / s + 1; must come out a positive integer."""
    if (input_width - kernel) % stride != 0:
        raise ValueError("kernel/stride do not tile the input width")
    out = (input_width - kernel) // stride + 1
    if out < 1:
        raise ValueError("non-positive convolution output width")
    return out


def flops_estimate(specs) -> int:
    """Per-evaluation FLOPs: conv layers dominate with Ci*wi^2*Co*wo^2; dense
    layers contribute input*output."""
    total = 0
    for spec in specs:
        if spec.kind == "conv":
            wo = conv_output_width(spec.input_width, spec.kernel, spec.stride)
            total += spec.in_channels * spec.input_width**2 * spec.out_channels * wo**2
        elif spec.kind == "dense":
            total += spec.input_size * spec.output_size
        elif spec.kind != "activation":
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return total


class Dense:
    """Affine layer; weights fan-in scaled uniform, biases zero."""

    def __init__(self, input_size, output_size, rng, init_scale=None):
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(input_size)
        self.weight = rng.uniform(-scale, scale, size=(output_size, input_size))
        self.bias = np.zeros(output_size)
        self.input_size = input_size
        self.output_size = output_size

    @property
    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(
                f"dense layer expects (batch, {self.input_size}), got {x.shape}"
            )
        return x @ self.weight.T + self.bias, x

    def backward(self, dout, cache):
        x = cache
        dw = dout.T @ x
        db = dout.sum(axis=0)
        return dout @ self.weight, [dw, db]


class Activation:
    def __init__(self, kind):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    parameters: list = []

    def forward(self, x):
        if self.kind == "relu":
            out = np.maximum(x, 0.0)
        elif self.kind == "tanh":
            out = np.tanh(x)
        elif self.kind == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-x))
        else:
            out = x
        return out, (x, out)

    def backward(self, dout, cache):
        x, out = cache
        if self.kind == "relu":
            dx = dout * (x > 0)
        elif self.kind == "tanh":
            dx = dout * (1.0 - out**2)
        elif self.kind == "sigmoid":
            dx = dout * out * (1.0 - out)
        else:
            dx = dout
        return dx, []


class Flatten:
    parameters: list = []

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), []


class Conv2D:
    """Single valid-mode convolution layer, input (batch, C_i, w, w)."""

    def __init__(self, in_channels, out_channels, kernel, stride, input_width, rng):
        self.out_width = conv_output_width(input_width, kernel, stride)
        scale = 1.0 / np.sqrt(in_channels * kernel * kernel)
        self.weight = rng.uniform(
            -scale, scale, size=(out_channels, in_channels, kernel, kernel)
        )
        self.bias = np.zeros(out_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.input_width = input_width

    @property
    def parameters(self):
        return [self.weight, self.bias]

    def _patches(self, x):
        v, s, wo = self.kernel, self.stride, self.out_width
        b, c = x.shape[0], x.shape[1]
        cols = np.empty((b, c, v, v, wo, wo))
        for i in range(v):
            for j in range(v):
                cols[:, :, i, j] = x[:, :, i : i + s * wo : s, j : j + s * wo : s]
        return cols

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (
            self.in_channels,
            self.input_width,
            self.input_width,
        ):
            raise ValueError(
                f"conv layer expects (batch, {self.in_channels}, "
                f"{self.input_width}, {self.input_width}), got {x.shape}"
            )
        cols = self._patches(x)
        out = np.einsum("bcijhw,ocij->bohw", cols, self.weight)
        out += self.bias[np.newaxis, :, np.newaxis, np.newaxis]
        return out, cols

    def backward(self, dout, cache):
        cols = cache
        dw = np.einsum("bohw,bcijhw->ocij", dout, cols)
        db = dout.sum(axis=(0, 2, 3))
        dcols = np.einsum("bohw,ocij->bcijhw", dout, self.weight)
        v, s, wo = self.kernel, self.stride, self.out_width
        dx = np.zeros(
            (dout.shape[0], self.in_channels, self.input_width, self.input_width)
        )
        for i in range(v):
            for j in range(v):
                dx[:, :, i : i + s * wo : s, j : j + s * wo : s] += dcols[:, :, i, j]
        return dx, [dw, db]


class Network:
    """Ordered layer stack with a pure forward/backward pair."""

    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters)
        return params

    def forward(self, x):
        caches = []
        for index, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x)
            except ValueError as err:
                raise ValueError(f"layer {index}: {err}") from None
            caches.append(cache)
        return x, caches

    def backward(self, dout, caches):
        """Gradients of a scalar loss given d(loss)/d(output); returns the
        input gradient and per-parameter gradients aligned with parameters()."""
        grads: list = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, layer_grads = layer.backward(dout, cache)
            grads = layer_grads + grads
        return dout, grads

    def copy(self):
        return copy.deepcopy(self)


class Nadam:
    """Nesterov-accelerated Adam with bias correction."""

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError("moment decay rates must lie in (0, 1)")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.first_moment, self.second_moment):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            nesterov = b1 * m_hat + (1.0 - b1) * g / (1.0 - b1**t)
            p -= self.learning_rate * nesterov / (np.sqrt(v_hat) + self.epsilon)


def soft_update(target_params, current_params, delta):
    """target <- delta * current + (1 - delta) * target, elementwise."""
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    for t, c in zip(target_params, current_params):
        t *= 1.0 - delta
        t += delta * c


def save_weights(path, networks: dict) -> None:
    """Persist named networks' parameters with a shape manifest."""
    arrays = {}
    for name, net in networks.items():
        for i, p in enumerate(net.parameters()):
            arrays[f"{name}.{i}"] = p
    np.savez(path, **arrays)


def load_weights(path, networks: dict) -> None:
    with np.load(path) as blob:
        for name, net in networks.items():
            for i, p in enumerate(net.parameters()):
                stored = blob[f"{name}.{i}"]
                if stored.shape != p.shape:
                    raise ValueError(
                        f"shape mismatch for {name}.{i}: "
                        f"{stored.shape} vs {p.shape}"
                    )
                p[...] = stored
