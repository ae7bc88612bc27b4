"""Classical layers, the QNN layer with its residual projection, and the loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .quantum import HermitianObservable, PQCParams, qnn_forward


@dataclass
class Conv2DLayer:
    kernels: Tensor  # [out_ch, in_ch, k, k]
    bias: Tensor  # [out_ch]


@dataclass
class DenseLayer:
    weights: Tensor  # [out, in]
    bias: Tensor  # [out]


@dataclass
class QNNLayer:
    pqc: PQCParams
    obs: HermitianObservable
    residual_enabled: bool = False
    residual_weights: Tensor | None = None  # [n_qubits, 2**n_qubits]
    residual_bias: Tensor | None = None  # [n_qubits]


def conv2d(x, layer):
    """Valid stride-1 cross-correlation plus per-channel bias."""
    x = ad.as_tensor(x)
    k = layer.kernels
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected [b, c, h, w] input, got {x.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernels expect {k.shape[1]}")
    out = ad.conv2d(x, k)
    return out + layer.bias.reshape(1, -1, 1, 1)


def avgpool2(x):
    return ad.avgpool2(x)


def dense(x, layer):
    x = ad.as_tensor(x)
    w = layer.weights
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input width {x.shape[-1]} does not match weights {w.shape}")
    return x @ w.T + layer.bias


def tanh(x):
    return ad.tanh(x)


def relu(x):
    return ad.relu(x)


def qnn_layer_forward(x, layer):
    x = ad.as_tensor(x)
    width = 1 << layer.pqc.n_qubits
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"qnn_layer: expected [b, {width}] input, got {x.shape}")
    out = qnn_forward(x, layer.pqc, layer.obs)
    if layer.residual_enabled:
        out = out + (x @ layer.residual_weights.T + layer.residual_bias)
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` against one-hot ``labels``."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("softmax_cross_entropy: labels must be one-hot rows")
    # shift by the row max as a constant; log-softmax is shift invariant
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.exp(z).sum(axis=1, keepdims=True))
    picked = (z * Tensor(labels)).sum(axis=1, keepdims=True)
    return (lse - picked).mean()


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
