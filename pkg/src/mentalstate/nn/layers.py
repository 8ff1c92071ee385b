"""Stateful layer objects wrapping the functional kernels.

A layer owns named parameter arrays (``params``), optional non-trainable
buffers (``buffers``) and, after ``backward``, gradients keyed like
``params``. ``forward`` caches what ``backward`` needs; a layer therefore
handles one forward/backward pair at a time.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}
        return self


class Conv1d(Layer):
    """Same-padded 1-D convolution, He-uniform initialized.

    Set ``needs_input_grad = False`` on a layer that reads the network input
    to skip computing a gradient nobody consumes.
    """

    def __init__(self, c_in, c_out, kernel_len, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        if kernel_len % 2 == 0 or kernel_len < 1:
            raise ValueError(f"kernel length must be odd and positive, got {kernel_len}")
        self.stride = stride
        self.needs_input_grad = True
        fan_in = c_in * kernel_len
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.uniform(-bound, bound, (c_out, c_in, kernel_len)).astype(dtype)
        self.params["bias"] = np.zeros(c_out, dtype=dtype)

    def _spectral(self):
        return self.stride == 1 and self.params["weight"].shape[2] > 1

    def forward(self, x, train=False):
        w, b = self.params["weight"], self.params["bias"]
        self._x = x
        if self._spectral():
            F.check_conv_shapes(x, w, b, self.stride)
            out, self._cache = F._fft_conv(x, w, (w.shape[2] - 1) // 2)
            return (out + b[None, :, None]).astype(np.result_type(x, w), copy=False)
        return F.conv1d_forward(x, w, b, self.stride)

    def backward(self, grad_out):
        w = self.params["weight"]
        if self._spectral():
            if grad_out.shape != (self._x.shape[0], w.shape[0], self._x.shape[2]):
                raise ShapeMismatch(f"upstream shape {grad_out.shape} does not match output")
            gx, gw = F._fft_conv_backward(self._cache, w, grad_out, (w.shape[2] - 1) // 2,
                                          self.needs_input_grad)
            gb = grad_out.sum(axis=(0, 2))
            self._cache = None
            dtype = np.result_type(self._x, w)
            gx = None if gx is None else gx.astype(dtype, copy=False)
        else:
            gx, gw, gb = F.conv1d_backward(self._x, w, grad_out, self.stride)
        self.grads = {"weight": gw.astype(w.dtype, copy=False), "bias": gb}
        return gx


class BatchNorm1d(Layer):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        out, self._cache = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train=train, momentum=self.momentum, eps=self.eps,
        )
        return out

    def backward(self, grad_out):
        gx, gg, gb = F.batchnorm_backward(grad_out, self.params["gamma"], self._cache)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._x = x
        return F.relu(x)

    def backward(self, grad_out):
        return F.relu_backward(self._x, grad_out)


class MaxPool1d(Layer):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=False):
        if self.factor == 1:
            return x
        self._length = x.shape[2]
        out, self._idx = F.maxpool1d(x, self.factor)
        return out

    def backward(self, grad_out):
        if self.factor == 1:
            return grad_out
        return F.maxpool1d_backward(grad_out, self._idx, self.factor, self._length)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._length = x.shape[2]
        return F.global_avg_pool(x)

    def backward(self, grad_out):
        return F.global_avg_pool_backward(grad_out, self._length)


class Dropout(Layer):
    """Inverted dropout; the caller sets ``seed`` before each training forward."""

    def __init__(self, keep_prob=0.5):
        super().__init__()
        self.keep_prob = keep_prob
        self.seed = None

    def forward(self, x, train=False):
        out, self._mask = F.dropout(x, self.keep_prob, train=train, seed=self.seed)
        return out

    def backward(self, grad_out):
        return F.dropout_backward(grad_out, self._mask)


class Dense(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        super().__init__()
        bound = np.sqrt(6.0 / d_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype)
        self.params["bias"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x, train=False):
        self._x = x
        return F.dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, grad_out):
        gx, gw, gb = F.dense_backward(self._x, self.params["weight"], grad_out)
        self.grads = {"weight": gw, "bias": gb}
        return gx
