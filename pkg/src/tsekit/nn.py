"""Reusable network layers on top of the autodiff ops.

Initialization is seed-deterministic: every layer draws from the
numpy Generator handed to its constructor.  Conv/linear weights are
uniform(-k, k) with k = 1/sqrt(fan_in); biases start at zero; PReLU
slopes at 0.25; norm gains at one.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError


def _uniform_init(rng, shape, fan_in):
    k = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv1x1:
    """Pointwise channel mixing: [.., C_in, T] -> [.., C_out, T]."""

    def __init__(self, in_channels, out_channels, rng):
        self.weight = _uniform_init(rng, (out_channels, in_channels), in_channels)
        self.bias = _zeros((out_channels, 1))

    def __call__(self, x):
        return ad.add(ad.matmul(self.weight, x), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class DepthwiseConv:
    """Per-channel dilated conv, same-padded so T is preserved."""

    def __init__(self, channels, kernel, dilation, rng):
        self.weight = _uniform_init(rng, (channels, 1, kernel), kernel)
        self.bias = _zeros((channels, 1))
        self.channels = channels
        self.dilation = dilation
        self.pad = (kernel - 1) * dilation // 2

    def __call__(self, x):
        h = ad.conv1d(x, self.weight, stride=1, dilation=self.dilation,
                      groups=self.channels, pad=self.pad)
        return ad.add(h, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class PReLU:
    def __init__(self, init_slope=0.25):
        self.slope = Tensor(np.array([init_slope]), requires_grad=True)

    def __call__(self, x):
        return ad.prelu(x, self.slope)

    def params(self):
        return {"slope": self.slope}


class GlobalLayerNorm:
    """Joint channel-time normalization with learnable per-channel affine."""

    def __init__(self, channels):
        self.gain = Tensor(np.ones((channels, 1)), requires_grad=True)
        self.bias = _zeros((channels, 1))

    def __call__(self, x):
        return ad.layer_norm_global(x, self.gain, self.bias, eps=1e-8)

    def params(self):
        return {"gain": self.gain, "bias": self.bias}


class Encoder:
    """Strided 1-D conv front end with ReLU: waveform -> [N, T_enc].

    Kernel length L, stride L/2, so T_enc = (len - L) // (L/2) + 1.
    """

    def __init__(self, n_filters, window, rng):
        if window % 2:
            raise ShapeError(f"encoder window must be even, got {window}")
        self.window = window
        self.stride = window // 2
        self.weight = _uniform_init(rng, (n_filters, 1, window), window)
        self.bias = _zeros((n_filters, 1))

    def n_frames(self, n_samples):
        return (n_samples - self.window) // self.stride + 1

    def __call__(self, y):
        if y.shape[-1] < self.window:
            raise DataError(f"encoder: input of {y.shape[-1]} samples shorter "
                            f"than window {self.window}")
        h = ad.conv1d(y, self.weight, stride=self.stride)
        return ad.relu(ad.add(h, self.bias))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class Decoder:
    """Transposed conv back to the time domain: [N, T_enc] -> waveform.

    Output length is (T_enc - 1) * L/2 + L.
    """

    def __init__(self, n_filters, window, rng):
        self.window = window
        self.stride = window // 2
        self.weight = _uniform_init(rng, (n_filters, 1, window), n_filters * window)
        self.bias = _zeros((1, 1))

    def __call__(self, m):
        return ad.add(ad.conv1d_transpose(m, self.weight, stride=self.stride), self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class ConvBlock:
    """Residual dilated depthwise-separable block.

    branch: 1x1 (B->H), PReLU, gLN, depthwise (P, dilation, same-pad),
    PReLU, gLN, 1x1 (H->B); output is x + branch.
    """

    def __init__(self, in_channels, hidden_channels, kernel, dilation, rng):
        self.expand = Conv1x1(in_channels, hidden_channels, rng)
        self.act1 = PReLU()
        self.norm1 = GlobalLayerNorm(hidden_channels)
        self.depthwise = DepthwiseConv(hidden_channels, kernel, dilation, rng)
        self.act2 = PReLU()
        self.norm2 = GlobalLayerNorm(hidden_channels)
        self.project = Conv1x1(hidden_channels, in_channels, rng)
        self.in_channels = in_channels

    def __call__(self, x):
        if x.shape[-2] != self.in_channels:
            raise ShapeError(f"conv_block: expected {self.in_channels} channels, "
                             f"got {x.shape[-2]}")
        h = self.norm1(self.act1(self.expand(x)))
        h = self.norm2(self.act2(self.depthwise(h)))
        return ad.add(x, self.project(h))

    def params(self):
        out = {}
        for name, sub in (("expand", self.expand), ("act1", self.act1),
                          ("norm1", self.norm1), ("depthwise", self.depthwise),
                          ("act2", self.act2), ("norm2", self.norm2),
                          ("project", self.project)):
            for k, v in sub.params().items():
                out[f"{name}.{k}"] = v
        return out


def collect_params(layers: dict) -> dict:
    """Flatten {layer_name: layer} into {dotted_name: Tensor}."""
    out = {}
    for lname, layer in layers.items():
        for pname, t in layer.params().items():
            out[f"{lname}.{pname}"] = t
    return out


def linear_softmax_ce(e: Tensor, w: Tensor, label) -> Tensor:
    """Cross entropy -log softmax(W e)[label].

    `e` is one embedding as [dim] (constant) or [dim, 1], or a batch
    [n, dim, 1] with a label per row; batches return the mean.  Computed
    as logsumexp(logits) - logits[label], which is exact and stable.
    """
    n_classes = w.shape[0]
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise DataError(f"speaker label out of range: {label} "
                        f"(have {n_classes} training speakers)")
    if e.ndim == 1:
        e = Tensor(e.data[:, None])
    if e.shape[-1] != 1 or e.shape[-2] != w.shape[1]:
        raise ShapeError(f"linear_softmax_ce: embedding {e.shape} does not match "
                         f"projection {w.shape}")
    logits = ad.matmul(w, e)                     # [.., S, 1]
    if logits.ndim == 3 and logits.shape[0] != labels.size:
        raise ShapeError(f"linear_softmax_ce: {logits.shape[0]} embeddings but "
                         f"{labels.size} labels")

    shift = Tensor(logits.data.max(axis=-2, keepdims=True))
    lse = ad.add(ad.log(ad.tensor_sum(ad.exp(ad.sub(logits, shift)),
                                      axis=-2, keepdims=True)), shift)
    onehot = np.zeros(logits.shape)
    if logits.ndim == 2:
        onehot[labels[0], 0] = 1.0
    else:
        onehot[np.arange(labels.size), labels, 0] = 1.0
    picked = ad.tensor_sum(ad.mul(logits, Tensor(onehot)), axis=-2, keepdims=True)
    return ad.mean(ad.sub(lse, picked))
