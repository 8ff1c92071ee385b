"""Forward and backward kernels on numpy arrays.

Every function keeps the dtype of its input, so the same code trains in
float32 and is gradient-checked in float64. Layouts are [batch, channels,
length] for sequences and [batch, features] for dense inputs.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from ..errors import InputTooShort, InsufficientBatch, LabelOutOfRange, ShapeMismatch

# upper bound on im2col elements materialized at once
_CHUNK_ELEMS = 1 << 23


def _conv_geometry(x, w, stride):
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d needs 3-d input and weights, got {x.shape} and {w.shape}")
    _, c_in, length = x.shape
    c_out, wc, k = w.shape
    if wc != c_in:
        raise ShapeMismatch(f"weights expect {wc} input channels, input has {c_in}")
    if k % 2 == 0:
        raise ShapeMismatch(f"kernel length must be odd, got {k}")
    if stride < 1:
        raise ShapeMismatch(f"stride must be positive, got {stride}")
    pad = (k - 1) // 2
    out_len = -(-length // stride)
    return c_in, c_out, k, pad, out_len


def check_conv_shapes(x, w, bias, stride=1):
    c_out = _conv_geometry(x, w, stride)[1]
    if bias.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")


def _columns(x_pad, k, stride, out_len):
    """[B, C, Lp] -> [B, out_len, C*k] patch matrix (copied)."""
    win = sliding_window_view(x_pad, k, axis=2)[:, :, ::stride][:, :, :out_len]
    b, c = win.shape[:2]
    return win.transpose(0, 2, 1, 3).reshape(b, out_len, c * k)


def _batch_chunks(b, per_item):
    step = max(1, _CHUNK_ELEMS // max(per_item, 1))
    for s in range(0, b, step):
        yield slice(s, min(b, s + step))


def _fft_len(length, k):
    return sfft.next_fast_len(length + k - 1, real=True)


def _spectra(a, n):
    """[B, C, L] -> contiguous [F, B, C] spectrum (zero padded to n)."""
    return np.ascontiguousarray(sfft.rfft(a, n, axis=-1).transpose(2, 0, 1))


def _kernel_spectra(w, n):
    """[O, C, k] -> [F, O, C]."""
    return np.ascontiguousarray(sfft.rfft(w, n, axis=-1).transpose(2, 0, 1))


def _from_spectra(s, n, start, length):
    """[F, B, C] spectrum -> [B, C, length] signal window starting at ``start``."""
    full = sfft.irfft(np.ascontiguousarray(s.transpose(1, 2, 0)), n, axis=-1)
    return full[:, :, start:start + length]


def _fft_conv(x, w, pad):
    """Same-padded stride-1 correlation in the frequency domain, no bias.

    Returns (out, cache); the cache holds the input spectrum for backward.
    """
    length, k = x.shape[2], w.shape[2]
    n = _fft_len(length, k)
    xs = _spectra(x, n)
    hs = _kernel_spectra(w[:, :, ::-1], n).transpose(0, 2, 1)  # [F, C, O]
    return _from_spectra(xs @ hs, n, pad, length), (xs, n)


def _fft_conv_backward(cache, w, grad_out, pad, need_input_grad=True):
    xs, n = cache
    length, k = grad_out.shape[2], w.shape[2]
    gs = _spectra(grad_out, n)  # [F, B, O]
    grad_x = None
    if need_input_grad:
        # correlation with the flipped, transposed kernel
        grad_x = _from_spectra(gs @ _kernel_spectra(w, n), n, pad, length)
    # grad_w[o, c, j] = sum_{b,i} g[b,o,i] x[b,c,i+j-pad]
    cross = np.conj(gs).transpose(0, 2, 1) @ xs  # [F, O, C]
    corr = sfft.irfft(cross, n, axis=0)  # [n, O, C]
    lags = np.arange(-pad, pad + 1) % n
    grad_w = np.ascontiguousarray(corr[lags].transpose(1, 2, 0))
    return grad_x, grad_w


def conv1d_forward(x, w, bias, stride=1):
    """Same-padded cross-correlation: out[b,o,i] = bias[o] + sum_{c,j} w[o,c,j] x_pad[b,c,i*stride+j]."""
    check_conv_shapes(x, w, bias, stride)
    c_in, c_out, k, pad, out_len = _conv_geometry(x, w, stride)
    dtype = np.result_type(x, w)
    if k == 1:
        out = np.matmul(w[:, :, 0], x[:, :, ::stride])
        return (out + bias[None, :, None]).astype(dtype, copy=False)
    if stride == 1:
        out, _ = _fft_conv(x, w, pad)
        return (out + bias[None, :, None]).astype(dtype, copy=False)
    b = x.shape[0]
    x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    wmat = w.reshape(c_out, c_in * k).T
    out = np.empty((b, c_out, out_len), dtype=np.result_type(x, w))
    for sl in _batch_chunks(b, out_len * c_in * k):
        cols = _columns(x_pad[sl], k, stride, out_len)
        out[sl] = (cols @ wmat).transpose(0, 2, 1)
    out += bias[None, :, None]
    return out


def conv1d_backward(x, w, grad_out, stride=1):
    """Return (grad_x, grad_w, grad_bias) for conv1d_forward."""
    c_in, c_out, k, pad, out_len = _conv_geometry(x, w, stride)
    b, length = x.shape[0], x.shape[2]
    if grad_out.shape != (b, c_out, out_len):
        raise ShapeMismatch(f"upstream shape {grad_out.shape} != {(b, c_out, out_len)}")
    dtype = np.result_type(x, w)
    grad_bias = grad_out.sum(axis=(0, 2))
    if k == 1:
        xs = x[:, :, ::stride]
        grad_w = np.tensordot(grad_out, xs, axes=([0, 2], [0, 2]))[:, :, None]
        grad_x = np.zeros_like(x)
        grad_x[:, :, ::stride] = np.matmul(w[:, :, 0].T, grad_out)
        return grad_x.astype(dtype, copy=False), grad_w.astype(dtype, copy=False), grad_bias
    if stride == 1:
        _, cache = _fft_conv(x, w, pad)
        grad_x, grad_w = _fft_conv_backward(cache, w, grad_out, pad)
        return grad_x.astype(dtype, copy=False), grad_w.astype(dtype, copy=False), grad_bias
    x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    wmat = w.reshape(c_out, c_in * k)
    grad_w = np.zeros((c_out, c_in * k), dtype=np.result_type(x, w))
    gx_pad = np.zeros_like(x_pad)
    span = stride * (out_len - 1) + 1
    for sl in _batch_chunks(b, out_len * c_in * k):
        g = grad_out[sl].transpose(0, 2, 1)  # [b, L_out, O]
        cols = _columns(x_pad[sl], k, stride, out_len)
        grad_w += np.tensordot(g, cols, axes=([0, 1], [0, 1]))
        gcols = (g @ wmat).reshape(g.shape[0], out_len, c_in, k)
        for j in range(k):
            gx_pad[sl, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    grad_x = gx_pad[:, :, pad:pad + length]
    return grad_x, grad_w.reshape(w.shape), grad_bias


# ---------------------------------------------------------------- batch norm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train, momentum=0.9, eps=1e-5):
    """Per-channel normalization over batch and length.

    In train mode the running statistics are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``; the batch
    variance is the biased one both for normalizing and for the running
    estimate. Returns (out, cache).
    """
    if x.ndim != 3 or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm input {x.shape} vs {gamma.shape[0]} channels")
    if train:
        if x.shape[0] * x.shape[2] < 2:
            raise InsufficientBatch("train-mode batch norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, train)


def batchnorm_backward(grad_out, gamma, cache):
    """Return (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, train = cache
    grad_beta = grad_out.sum(axis=(0, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    g_hat = grad_out * gamma[None, :, None]
    if train:
        n = grad_out.shape[0] * grad_out.shape[2]
        grad_x = (inv_std[None, :, None] / n) * (
            n * g_hat
            - g_hat.sum(axis=(0, 2), keepdims=True)
            - xhat * (g_hat * xhat).sum(axis=(0, 2), keepdims=True)
        )
    else:
        grad_x = g_hat * inv_std[None, :, None]
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------- pointwise / pooling


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def dropout(x, keep_prob, *, train, seed=None):
    """Inverted dropout. Returns (out, mask); mask is None when nothing is dropped."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1:
        return x, None
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / np.asarray(keep_prob, x.dtype)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def maxpool1d(x, factor):
    """Non-overlapping max pooling; remainder dropped. Returns (out, argmax)."""
    if factor < 1:
        raise ValueError("pool factor must be positive")
    b, c, length = x.shape
    n = length // factor
    if n == 0:
        raise InputTooShort(f"length {length} shorter than pool factor {factor}")
    win = x[:, :, :n * factor].reshape(b, c, n, factor)
    idx = win.argmax(axis=3)  # first index on ties
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return out, idx


def maxpool1d_backward(grad_out, idx, factor, length):
    b, c, n = grad_out.shape
    g = np.zeros((b, c, n, factor), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=3)
    grad_x = np.zeros((b, c, length), dtype=grad_out.dtype)
    grad_x[:, :, :n * factor] = g.reshape(b, c, n * factor)
    return grad_x


def global_avg_pool(x):
    if x.shape[2] < 1:
        raise InputTooShort("global average pool over an empty axis")
    return x.mean(axis=2)


def global_avg_pool_backward(grad_out, length):
    g = grad_out[:, :, None] / length
    return np.repeat(g, length, axis=2).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------- dense / loss


def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense shapes x{x.shape} W{w.shape} b{b.shape}")
    return x @ w.T + b


def dense_backward(x, w, grad_out):
    """Return (grad_x, grad_w, grad_b)."""
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeMismatch(f"upstream {grad_out.shape} vs ({x.shape[0]}, {w.shape[0]})")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class LossOutput(NamedTuple):
    loss: float
    logit_grad: np.ndarray


def softmax_cross_entropy(logits, labels) -> LossOutput:
    """Mean cross-entropy over the batch with max-subtracted softmax."""
    labels = np.asarray(labels)
    b, n_classes = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} vs batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    return LossOutput(max(loss, 0.0), grad / b)
