##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Network primitives composed from fitkit.tensor operations: convolution (im2col + matmul),      #
# max-pooling, batch normalization, dense layers and softmax cross-entropy. Everything here is   #
# built from differentiable Tensor ops, so second derivatives come for free.                     #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from fitkit import tensor as T
from fitkit.errors import ShapeError
from fitkit.tensor import Tensor

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@lru_cache(maxsize=64)
def _im2col_index(channels, height, width, kernel, stride, padding):
    """Flat input index for every (output location, patch entry); -1 marks zero padding."""

    out_h = conv_output_size(height, kernel, stride, padding)
    out_w = conv_output_size(width, kernel, stride, padding)
    oy, ox, c, ky, kx = np.meshgrid(
        np.arange(out_h), np.arange(out_w), np.arange(channels), np.arange(kernel), np.arange(kernel),
        indexing="ij",
    )
    y = oy * stride + ky - padding
    x = ox * stride + kx - padding
    inside = (y >= 0) & (y < height) & (x >= 0) & (x < width)
    flat = np.where(inside, c * height * width + y * width + x, -1)
    index = flat.reshape(-1).astype(np.int64)
    index.setflags(write=False)
    return index, out_h, out_w


@dataclass
class LinearParts:
    """Inputs and outputs of a linear map in per-example form, used for per-example gradients.

    cols: (N, L, K) input patches; z: (N, L, O) outputs (bias included).
    """

    cols: Tensor
    z: Tensor


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    2-D convolution of x (N, C, H, W) with weight (O, C, k, k).

    Returns:
        tuple[Tensor, LinearParts]: Output (N, O, H', W') and the per-example linear view.
    """

    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c, k, k2 = weight.shape
    if in_c != c or k != k2:
        raise ShapeError(f"conv2d weight {weight.shape} does not fit input {x.shape}")
    index, out_h, out_w = _im2col_index(c, h, w, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d kernel {k} does not fit a {h}x{w} input")
    locations, patch = out_h * out_w, c * k * k

    cols = T.gather(x.reshape(n, c * h * w), index).reshape(n, locations, patch)
    flat = cols.reshape(n * locations, patch) @ weight.reshape(out_c, patch).T
    if bias is not None:
        flat = flat + bias
    z = flat.reshape(n, locations, out_c)
    out = z.transpose(0, 2, 1).reshape(n, out_c, out_h, out_w)
    return out, LinearParts(cols, z)


def dense(x, weight, bias=None):
    """Fully connected layer on x (N, K) with weight (O, K)."""

    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} does not fit input {x.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    n, k = x.shape
    parts = LinearParts(x.reshape(n, 1, k), out.reshape(n, 1, weight.shape[0]))
    return parts.z.reshape(n, weight.shape[0]), parts


@lru_cache(maxsize=64)
def _pool_windows(height, width, kernel, stride):
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    oy, ox, ky, kx = np.meshgrid(
        np.arange(out_h), np.arange(out_w), np.arange(kernel), np.arange(kernel), indexing="ij"
    )
    flat = ((oy * stride + ky) * width + (ox * stride + kx)).reshape(out_h * out_w, kernel * kernel)
    flat.setflags(write=False)
    return flat, out_h, out_w


def max_pool2d(x, kernel=2, stride=None):
    """Max-pooling; ties go to the first maximal element in scan order."""

    stride = stride or kernel
    n, c, h, w = x.shape
    windows, out_h, out_w = _pool_windows(h, w, kernel, stride)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"max_pool2d window {kernel} does not fit a {h}x{w} input")
    rows = x.data.reshape(n * c, h * w)
    first = np.argmax(rows[:, windows], axis=2)
    selected = np.take_along_axis(np.broadcast_to(windows, (n * c,) + windows.shape), first[..., None], axis=2)
    out = T.gather(x.reshape(n * c, h * w), selected[..., 0])
    return out.reshape(n, c, out_h, out_w)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(x, gamma, beta, state, training, momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """
    Batch normalization over every axis except the channel axis (axis 1).

    Training mode normalizes with batch statistics and updates the running estimates (unbiased
    variance); evaluation mode normalizes with the running estimates as constants.
    """

    axes = tuple(i for i in range(x.ndim) if i != 1)
    shape = tuple(x.shape[1] if i == 1 else 1 for i in range(x.ndim))
    if training:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = x.size // x.shape[1]
        with T.no_grad():
            unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
            state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean.data.reshape(-1)
            state.running_var = (1.0 - momentum) * state.running_var + momentum * unbiased
        normalized = centered / ((var + eps) ** 0.5)
    else:
        mean = Tensor(state.running_mean.reshape(shape))
        std = Tensor(np.sqrt(state.running_var.reshape(shape) + eps))
        normalized = (x - mean) / std
    return normalized * gamma.reshape(shape) + beta.reshape(shape)


def log_softmax(logits):
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    lse = shifted.exp().sum(axis=1, keepdims=True).log()
    return shifted - lse


def softmax(logits_array):
    """Numpy softmax over the last axis (no graph)."""

    shifted = logits_array - logits_array.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean", weights=None):
    """
    Cross-entropy of integer labels under softmax(logits).

    Args:
        logits (Tensor): (N, K) scores.
        labels (np.ndarray): (N,) class indices.
        reduction (str): "mean", "sum" or "none".
        weights (np.ndarray, optional): (N,) per-example weights applied before reduction.

    Returns:
        Tensor: Scalar for "mean"/"sum", (N,) for "none".
    """

    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"labels {labels.shape} do not fit logits {logits.shape}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    lse = shifted.exp().sum(axis=1).log()
    picked = T.Gather.apply(shifted, idx=labels.reshape(n, 1)).reshape(n)
    losses = lse - picked
    if weights is not None:
        losses = losses * Tensor(np.asarray(weights, dtype=T.DTYPE))
    if reduction == "none":
        return losses
    if reduction == "sum":
        return losses.sum()
    return losses.mean()


def soft_cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy against fixed target distributions (N, K); targets carry no gradient."""

    targets = np.asarray(targets, dtype=T.DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not fit logits {logits.shape}")
    losses = -(log_softmax(logits) * Tensor(targets)).sum(axis=1)
    if reduction == "none":
        return losses
    if reduction == "sum":
        return losses.sum()
    return losses.mean()
