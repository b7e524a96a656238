"""Tiny fully-connected networks with hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "sigmoid")


@dataclass
class MlpParams:
    """Dense layers ``h = act(x @ W + b)`` with ReLU between hidden layers.

    ``weights[i]`` has shape ``(widths[i], widths[i + 1])``.
    """

    widths: tuple
    weights: list
    biases: list
    output_activation: str = "identity"
    weight_grads: list = field(default=None, repr=False)
    bias_grads: list = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ValueError(f"layer {i} shapes {w.shape}, {b.shape} do not chain with {self.widths}")
        if self.weight_grads is None:
            self.weight_grads = [np.zeros_like(w) for w in self.weights]
            self.bias_grads = [np.zeros_like(b) for b in self.biases]

    @classmethod
    def create(cls, widths, output_activation="identity", rng=None, dtype=np.float32, zero_last=False):
        """Glorot-uniform weights, zero biases; ``zero_last`` zeroes the final layer."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
            if zero_last and i == len(widths) - 2:
                w = np.zeros_like(w)
            weights.append(w.astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(tuple(widths), weights, biases, output_activation)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self):
        return self.weights + self.biases

    def gradients(self):
        return self.weight_grads + self.bias_grads

    def zero_grad(self):
        for g in self.gradients():
            g[...] = 0.0

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            self.widths,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.output_activation,
        )


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def mlp_forward(params: MlpParams, x):
    """Evaluate the network on a batch ``x`` of shape ``(B, widths[0])``.

    Returns ``(output, cache)``; the cache holds each layer's input and
    pre-activation for :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != params.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {params.widths[0]}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif params.output_activation == "sigmoid":
            h = _sigmoid(z)
        else:
            h = z
    return h, (inputs, pre, h)


def mlp_backward(params: MlpParams, cache, upstream, accumulate=True, param_grads=True):
    """Reverse-mode pass; returns the gradient w.r.t. the network input.

    Parameter gradients are added into ``params.weight_grads`` /
    ``params.bias_grads`` (or overwrite them when ``accumulate`` is False;
    skipped entirely with ``param_grads=False``). ReLU's derivative at
    exactly zero is taken as 0.
    """
    inputs, pre, out = cache
    g = np.asarray(upstream, dtype=params.dtype)
    if params.output_activation == "sigmoid":
        g = g * out * (1.0 - out)
    for i in range(len(params.weights) - 1, -1, -1):
        if i < len(params.weights) - 1:
            g = g * (pre[i] > 0.0)
        if not param_grads:
            g = g @ params.weights[i].T
            continue
        gw = inputs[i].T @ g
        gb = g.sum(axis=0)
        if accumulate:
            params.weight_grads[i] += gw
            params.bias_grads[i] += gb
        else:
            params.weight_grads[i][...] = gw
            params.bias_grads[i][...] = gb
        g = g @ params.weights[i].T
    return g
