"""Sequential 1D CNN mapping a pump-flow window (L/min) to preload (mmHg)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .layers import (BatchNorm1D, Conv1D, Dense, Dropout, Flatten, LeakyReLU, MaxPool1D, layer_from_spec)
from .windows import WINDOW

MODEL_FORMAT_VERSION = 1
LABEL_SCALE = 25.0  # mmHg; labels are divided by this before fitting

# (kernel length, filters, pool after block)
CONV_BLOCKS = ((30, 3, False), (20, 3, False), (10, 5, False), (7, 10, False),
               (7, 10, True), (5, 10, True), (3, 10, False), (3, 10, False))
DENSE_UNITS = (100, 20)
DROPOUT = 0.2


def reference_layers(input_length=WINDOW, conv_blocks=CONV_BLOCKS, dense_units=DENSE_UNITS, dropout=DROPOUT):
    """Layer list of the estimator: conv blocks (conv, BN, LeakyReLU, optional
    pool), flatten, LeakyReLU dense layers, dropout, linear output."""
    layers = []
    c, n = 1, input_length
    for k, f, pool in conv_blocks:
        layers += [Conv1D(c, f, k), BatchNorm1D(f), LeakyReLU()]
        c, n = f, n - k + 1
        if pool:
            layers.append(MaxPool1D())
            n //= 2
        if n < 1:
            raise ValueError("input too short for the convolution stack")
    layers.append(Flatten())
    width = c * n
    for u in dense_units:
        layers += [Dense(width, u), LeakyReLU()]
        width = u
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(Dense(width, 1))
    return layers


class CnnModel:
    """Layer stack plus input normalization and label scaling.

    ``forward`` works on normalized, scaled quantities; ``predict`` takes raw
    flow windows and returns mmHg.
    """

    def __init__(self, layers, input_length=WINDOW, input_mean=0.0, input_std=1.0, label_scale=LABEL_SCALE,
                 meta=None):
        self.layers = list(layers)
        self.input_length = input_length
        self.input_mean = float(input_mean)
        self.input_std = float(input_std)
        self.label_scale = float(label_scale)
        self.meta = dict(meta or {})
        shape = (1, input_length)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (1,):
            raise ValueError(f"layer stack emits shape {shape}, expected (1,)")

    @classmethod
    def reference(cls, input_length=WINDOW, **kw):
        return cls(reference_layers(input_length), input_length, **kw)

    def init(self, seed):
        """He initialization (normal, variance 2/fan_in); zero biases."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng([int(seed), 1])
        return self

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        for layer in self.layers:
            for v in layer.params.values():
                return v.dtype
        return np.dtype(float)

    # ----------------------------------------------------------- compute
    def normalize(self, windows):
        w = np.asarray(windows, dtype=self.dtype)
        if w.ndim == 1:
            w = w[None, :]
        if w.shape[1] != self.input_length:
            raise ValueError(f"windows must have {self.input_length} samples, got {w.shape[1]}")
        return ((w - self.input_mean) / self.input_std)[:, None, :]

    def forward(self, x, train=False):
        """Scaled output for normalized input of shape (N, 1, length)."""
        for layer in self.layers:
            x = layer.forward(x, train)
        return x[:, 0]

    def backward(self, dout):
        d = dout[:, None]
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss_and_grads(self, x, y_scaled):
        """Mean squared error on scaled labels and its gradients (train mode)."""
        pred = self.forward(x, train=True)
        r = pred - y_scaled
        loss = float(np.mean(r * r))
        self.backward(2.0 * r / r.size)
        return loss, pred

    def predict(self, windows, batch=512):
        """Preload estimates (mmHg) for raw flow windows; inference mode."""
        x = self.normalize(windows)
        out = np.concatenate([self.forward(x[i:i + batch], train=False) for i in range(0, len(x), batch)])
        return out.astype(float) * self.label_scale

    def parameters(self):
        """(layer index, name, array) for every learnable array."""
        return [(i, k, v) for i, layer in enumerate(self.layers) for k, v in layer.params.items()]

    def gradients(self):
        return [(i, k, self.layers[i].grads[k]) for i, k, _ in self.parameters()]

    # ----------------------------------------------------------- storage
    def to_dict(self):
        return {
            "format": "lvadsim-cnn",
            "version": MODEL_FORMAT_VERSION,
            "input_length": self.input_length,
            "input_mean": self.input_mean,
            "input_std": self.input_std,
            "label_scale": self.label_scale,
            "padding": "valid",
            "meta": self.meta,
            "layers": [
                {"spec": layer.spec(),
                 "params": {k: {"shape": list(v.shape), "data": v.astype(float).ravel().tolist()}
                            for k, v in layer.params.items()},
                 "buffers": {k: v.astype(float).tolist() for k, v in layer.buffers.items()}}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "lvadsim-cnn" or "version" not in d:
            raise ValueError("not a model file")
        if d["version"] != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {d['version']}")
        layers = []
        for entry in d["layers"]:
            layer = layer_from_spec(entry["spec"])
            for k, p in entry["params"].items():
                arr = np.asarray(p["data"], dtype=float).reshape(p["shape"])
                if k not in layer.params or layer.params[k].shape != arr.shape:
                    raise ValueError(f"corrupt model: bad {entry['spec']['type']}.{k} shape")
                layer.params[k] = arr
            for k, v in entry["buffers"].items():
                layer.buffers[k] = np.asarray(v, dtype=float)
            layers.append(layer)
        return cls(layers, d["input_length"], d["input_mean"], d["input_std"], d["label_scale"], d.get("meta"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
