"""Layer primitives for a 1D convolutional regressor, written in plain numpy.

Activations are laid out as (batch, channels, length) for the convolutional
part and (batch, features) after flattening.  Every layer exposes
``forward(x, train)`` and ``backward(dout)``; learnable arrays live in
``params`` with matching entries in ``grads`` after a backward pass.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}  # non-learnable state that must be saved (BN running stats)

    def spec(self):
        return {"type": self.kind}

    def output_shape(self, shape):
        return shape

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self


class Conv1D(Layer):
    """Valid 1D cross-correlation, stride 1."""

    kind = "conv"

    def __init__(self, in_channels, filters, kernel):
        super().__init__()
        self.in_channels, self.filters, self.kernel = in_channels, filters, kernel
        self.params["W"] = np.zeros((filters, in_channels, kernel))
        self.params["b"] = np.zeros(filters)

    def spec(self):
        return {"type": self.kind, "in_channels": self.in_channels, "filters": self.filters, "kernel": self.kernel}

    def output_shape(self, shape):
        c, n = shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        if n < self.kernel:
            raise ValueError(f"input length {n} shorter than kernel {self.kernel}")
        return (self.filters, n - self.kernel + 1)

    def init(self, rng):
        fan_in = self.in_channels * self.kernel
        self.params["W"] = rng.standard_normal(self.params["W"].shape) * np.sqrt(2.0 / fan_in)
        self.params["b"] = np.zeros(self.filters)

    def forward(self, x, train=False):
        N, C, L = x.shape
        K = self.kernel
        Lo = L - K + 1
        # cols[n, l, c*K + k] = x[n, c, l + k]
        cols = sliding_window_view(x, K, axis=2).transpose(0, 2, 1, 3).reshape(N, Lo, C * K)
        W = self.params["W"].reshape(self.filters, C * K)
        out = cols @ W.T + self.params["b"]
        self.cache = (x.shape, cols)
        return out.transpose(0, 2, 1)

    def backward(self, dout):
        (N, C, L), cols = self.cache
        K = self.kernel
        Lo = L - K + 1
        d = dout.transpose(0, 2, 1)  # (N, Lo, F)
        F = self.filters
        self.grads["W"] = (d.reshape(-1, F).T @ cols.reshape(-1, C * K)).reshape(F, C, K)
        self.grads["b"] = d.sum(axis=(0, 1))
        # dx is the full convolution of dout with the flipped kernels
        padded = np.zeros((N, F, Lo + 2 * (K - 1)), dtype=dout.dtype)
        padded[:, :, K - 1:K - 1 + Lo] = dout
        win = sliding_window_view(padded, K, axis=2).transpose(0, 2, 1, 3).reshape(N, L, F * K)
        flipped = self.params["W"][:, :, ::-1].transpose(0, 2, 1).reshape(F * K, C)
        return (win @ flipped).transpose(0, 2, 1)


class BatchNorm1D(Layer):
    """Per-channel normalization over batch and length."""

    kind = "bn"

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def spec(self):
        return {"type": self.kind, "channels": self.channels}

    def init(self, rng):
        pass

    def _axes(self, x):
        return (0, 2) if x.ndim == 3 else (0,)

    def _shape(self, x, v):
        return v[None, :, None] if x.ndim == 3 else v[None, :]

    def forward(self, x, train=False):
        ax = self._axes(x)
        g = self._shape(x, self.params["gamma"])
        b = self._shape(x, self.params["beta"])
        if train:
            mu = x.mean(axis=ax)
            var = x.var(axis=ax)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu
            self.buffers["running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - self._shape(x, mu)) * self._shape(x, inv)
        self.cache = (xhat, inv, train)
        return g * xhat + b

    def backward(self, dout):
        xhat, inv, train = self.cache
        ax = self._axes(dout)
        self.grads["gamma"] = (dout * xhat).sum(axis=ax)
        self.grads["beta"] = dout.sum(axis=ax)
        g = self._shape(dout, self.params["gamma"])
        dxhat = dout * g
        if not train:
            return dxhat * self._shape(dout, inv)
        m = dout.size // self.channels
        return (self._shape(dout, inv) / m) * (
            m * dxhat - dxhat.sum(axis=ax, keepdims=True) - xhat * (dxhat * xhat).sum(axis=ax, keepdims=True))


class LeakyReLU(Layer):
    kind = "lrelu"

    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def spec(self):
        return {"type": self.kind, "slope": self.slope}

    def forward(self, x, train=False):
        self.mask = x > 0
        return np.where(self.mask, x, self.slope * x)

    def backward(self, dout):
        return np.where(self.mask, dout, self.slope * dout)


class MaxPool1D(Layer):
    """Width-2, stride-2 max pool; a trailing odd sample is dropped."""

    kind = "pool"

    def output_shape(self, shape):
        c, n = shape
        return (c, n // 2)

    def forward(self, x, train=False):
        N, C, L = x.shape
        Lo = L // 2
        pairs = x[:, :, : 2 * Lo].reshape(N, C, Lo, 2)
        arg = pairs.argmax(axis=3)
        self.cache = (x.shape, arg)
        return np.take_along_axis(pairs, arg[..., None], axis=3)[..., 0]

    def backward(self, dout):
        (N, C, L), arg = self.cache
        Lo = L // 2
        dpairs = np.zeros((N, C, Lo, 2), dtype=dout.dtype)
        np.put_along_axis(dpairs, arg[..., None], dout[..., None], axis=3)
        dx = np.zeros((N, C, L), dtype=dout.dtype)
        dx[:, :, : 2 * Lo] = dpairs.reshape(N, C, 2 * Lo)
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self.shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, units):
        super().__init__()
        self.in_features, self.units = in_features, units
        self.params["W"] = np.zeros((in_features, units))
        self.params["b"] = np.zeros(units)

    def spec(self):
        return {"type": self.kind, "in_features": self.in_features, "units": self.units}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"dense expects {self.in_features} features, got {shape}")
        return (self.units,)

    def init(self, rng):
        self.params["W"] = rng.standard_normal((self.in_features, self.units)) * np.sqrt(2.0 / self.in_features)
        self.params["b"] = np.zeros(self.units)

    def forward(self, x, train=False):
        self.x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self.x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) during training."""

    kind = "dropout"

    def __init__(self, p=0.2):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(0)
        self.mask = None

    def spec(self):
        return {"type": self.kind, "p": self.p}

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self.mask = None
            return x
        self.mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return x * self.mask

    def backward(self, dout):
        return dout if self.mask is None else dout * self.mask


LAYER_TYPES = {c.kind: c for c in (Conv1D, BatchNorm1D, LeakyReLU, MaxPool1D, Flatten, Dense, Dropout)}


def layer_from_spec(spec):
    s = dict(spec)
    cls = LAYER_TYPES[s.pop("type")]
    return cls(**s)
