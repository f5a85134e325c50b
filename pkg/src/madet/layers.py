"""Dense-tensor layer kernels: forward and backward passes for every layer
type the two detection networks need.

All functions are pure: they take numpy arrays (float64 by default) plus an
explicit RNG where randomness is involved, and return new arrays.  Gradient
accumulation across a minibatch is done by the caller, summing per-sample
gradients in sample order so runs are bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

# Clamp applied to probabilities before the cross-entropy logs; the loss is
# singular at exactly 0 or 1.
BCE_EPS = 1e-7


@dataclass
class LayerGrad:
    """Gradients produced by one layer's backward pass.

    d_input matches the forward input's shape; d_params holds one array per
    trainable parameter (kernels/weights first, then bias), possibly empty.
    """

    d_input: np.ndarray
    d_params: list


def conv2d_forward(x, kernels, bias):
    """Valid (no padding), stride-1 cross-correlation.

    x: (C_in, H, W); kernels: (C_out, C_in, kH, kW); bias: (C_out,).
    Returns (C_out, H-kH+1, W-kW+1).
    """
    _check_conv_shapes(x, kernels, bias)
    kh, kw = kernels.shape[2], kernels.shape[3]
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (C,oh,ow,kh,kw)
    out = np.tensordot(windows, kernels, axes=[(0, 3, 4), (1, 2, 3)])
    return np.ascontiguousarray(out.transpose(2, 0, 1)) + bias[:, None, None]


def conv2d_backward(x, kernels, d_output):
    """Gradients of a scalar loss through conv2d_forward.

    Returns LayerGrad with d_params = [d_kernels, d_bias].
    """
    _check_conv_shapes(x, kernels, None)
    c_out, c_in, kh, kw = kernels.shape
    oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    if d_output.shape != (c_out, oh, ow):
        raise ShapeError("conv2d d_output shape", d_output.shape, (c_out, oh, ow))

    d_bias = d_output.sum(axis=(1, 2))

    # d_kernels[o,c,u,v] = sum_{i,j} x[c,i+u,j+v] * d_output[o,i,j]
    windows = sliding_window_view(x, (oh, ow), axis=(1, 2))  # (C,kh,kw,oh,ow)
    d_kernels = np.tensordot(d_output, windows, axes=[(1, 2), (3, 4)])

    # d_input accumulated per kernel offset; fixed (u,v) order keeps the
    # summation bit-reproducible.
    d_input = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            # (C_out,C_in)^T applied to d_output -> (C_in, oh, ow)
            contrib = np.tensordot(kernels[:, :, u, v], d_output, axes=[0, 0])
            d_input[:, u:u + oh, v:v + ow] += contrib
    return LayerGrad(d_input, [d_kernels, d_bias])


def _check_conv_shapes(x, kernels, bias):
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError("conv2d expects x (C,H,W) and kernels (O,C,kH,kW)",
                         x.shape, kernels.shape)
    if x.shape[0] != kernels.shape[1]:
        raise ShapeError("conv2d channel mismatch", x.shape, kernels.shape)
    if kernels.shape[2] > x.shape[1] or kernels.shape[3] > x.shape[2]:
        raise ShapeError("conv2d kernel larger than input", kernels.shape, x.shape)
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise ShapeError("conv2d bias shape", bias.shape, (kernels.shape[0],))


@dataclass
class PoolIndices:
    """Argmax bookkeeping from maxpool2_forward, consumed by the backward."""

    input_shape: tuple
    flat_argmax: np.ndarray  # (C, H//2, W//2), flat indices into the input


def maxpool2_values(x):
    """Pooled values only (no argmax bookkeeping); the cheap path for
    inference, identical to maxpool2_forward's first return value."""
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError("maxpool2 needs (C,H,W) with H,W >= 2", x.shape)
    oh, ow = x.shape[1] // 2, x.shape[2] // 2
    trimmed = x[:, :2 * oh, :2 * ow]
    a = np.maximum(trimmed[:, 0::2, 0::2], trimmed[:, 0::2, 1::2])
    b = np.maximum(trimmed[:, 1::2, 0::2], trimmed[:, 1::2, 1::2])
    return np.maximum(a, b)


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; trailing odd row/column dropped.

    Ties within a window go to the first element in row-major scan order.
    Returns (pooled, PoolIndices).
    """
    if x.ndim != 3 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError("maxpool2 needs (C,H,W) with H,W >= 2", x.shape)
    c, h, w = x.shape
    oh, ow = h // 2, w // 2
    trimmed = x[:, :2 * oh, :2 * ow]
    windows = trimmed.reshape(c, oh, 2, ow, 2).transpose(0, 1, 3, 2, 4)
    flat_windows = windows.reshape(c, oh, ow, 4)
    local = flat_windows.argmax(axis=3)  # first max wins: row-major tie rule
    pooled = np.take_along_axis(flat_windows, local[..., None], axis=3)[..., 0]

    rows = 2 * np.arange(oh)[None, :, None] + local // 2
    cols = 2 * np.arange(ow)[None, None, :] + local % 2
    chan = np.arange(c)[:, None, None]
    flat = (chan * h + rows) * w + cols
    return pooled, PoolIndices((c, h, w), flat)


def maxpool2_backward(indices, d_output):
    """Route d_output to the argmax positions recorded by the forward."""
    if d_output.shape != indices.flat_argmax.shape:
        raise ShapeError("maxpool2 d_output does not match pool indices",
                         d_output.shape, indices.flat_argmax.shape)
    d_input = np.zeros(indices.input_shape, dtype=d_output.dtype)
    # Window argmax positions are distinct, so plain assignment suffices.
    d_input.ravel()[indices.flat_argmax.ravel()] = d_output.ravel()
    return LayerGrad(d_input, [])


def leaky_relu(x, alpha=0.01):
    """f(v) = v if v >= 0 else alpha * v, elementwise."""
    if alpha < 0:
        raise ValidationError(f"leaky_relu slope must be >= 0, got {alpha}")
    if alpha <= 1.0:
        # equivalent closed form, cheaper than a branch mask
        return np.maximum(x, alpha * x)
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(x, d_output, alpha=0.01):
    # Subgradient at exactly 0 is taken as 1.
    return LayerGrad(np.where(x >= 0, 1.0, alpha) * d_output, [])


def maxout_pairs(x):
    """Pairwise maxout on a flat vector: out[i] = max(x[2i], x[2i+1])."""
    if x.ndim != 1 or x.shape[0] % 2 != 0:
        raise ShapeError("maxout_pairs needs a flat even-length vector", x.shape)
    return np.maximum(x[0::2], x[1::2])


def maxout_pairs_backward(x, d_output):
    """Gradient routes to the winning element; ties go to the lower index."""
    if x.ndim != 1 or x.shape[0] % 2 != 0:
        raise ShapeError("maxout_pairs needs a flat even-length vector", x.shape)
    if d_output.shape != (x.shape[0] // 2,):
        raise ShapeError("maxout_pairs d_output length", d_output.shape, (x.shape[0] // 2,))
    first_wins = x[0::2] >= x[1::2]
    d_input = np.zeros_like(x)
    d_input[0::2] = np.where(first_wins, d_output, 0.0)
    d_input[1::2] = np.where(first_wins, 0.0, d_output)
    return LayerGrad(d_input, [])


def fully_connected_forward(x, weights, bias):
    """out = weights @ x + bias, with weights (m, n) applied to x (n,)."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError("fully_connected input/weights mismatch", x.shape, weights.shape)
    if bias.shape != (weights.shape[0],):
        raise ShapeError("fully_connected bias shape", bias.shape, (weights.shape[0],))
    return weights @ x + bias


def fully_connected_backward(x, weights, d_output):
    if d_output.shape != (weights.shape[0],):
        raise ShapeError("fully_connected d_output shape", d_output.shape,
                         (weights.shape[0],))
    d_weights = np.outer(d_output, x)
    d_input = weights.T @ d_output
    return LayerGrad(d_input, [d_weights, d_output.copy()])


def softmax2(logits):
    """Numerically stable two-class softmax; outputs sum to 1."""
    if logits.shape != (2,):
        raise ShapeError("softmax2 expects 2 logits", logits.shape)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax2_backward(probs, d_probs):
    """d_logits for softmax given gradient w.r.t. the probabilities."""
    inner = np.dot(d_probs, probs)
    return LayerGrad(probs * (d_probs - inner), [])


def bce_loss(p, t):
    """Binary cross entropy on a single probability.

    p is clamped to [BCE_EPS, 1 - BCE_EPS] before the logs; the returned
    derivative d_p is that of the clamped expression (zero where the clamp
    is active).  Returns (loss, d_p).
    """
    if t not in (0, 1):
        raise ValidationError(f"bce_loss target must be 0 or 1, got {t!r}")
    clamped = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
    loss = -t * np.log(clamped) - (1 - t) * np.log(1.0 - clamped)
    if p < BCE_EPS or p > 1.0 - BCE_EPS:
        d_p = 0.0
    else:
        d_p = -t / clamped + (1 - t) / (1.0 - clamped)
    return float(loss), float(d_p)


def dropout_mask(rng, shape, p):
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p, rng, training):
    """Inverted dropout: scaling happens at train time, inference is identity."""
    if not training or p == 0.0:
        if not 0.0 <= p < 1.0:
            raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
        return x.copy()
    return x * dropout_mask(rng, x.shape, p)
