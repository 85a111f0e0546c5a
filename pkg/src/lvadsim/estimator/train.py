"""Adam training, patient-level k-fold splits and window datasets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import LABEL_SCALE, CnnModel


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 1102
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # list of arrays updated in place
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class TrainingDiverged(FloatingPointError):
    pass


def train(windows, labels, config: TrainConfig = TrainConfig(), model: CnnModel | None = None, log_every=0):
    """Fit a freshly He-initialized model; returns (model, loss curve).

    Mini-batches are drawn from a seeded permutation, reshuffled each pass.
    The batch size is capped at the dataset size.
    """
    windows = np.asarray(windows, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if windows.ndim != 2 or len(windows) != len(labels) or len(labels) == 0:
        raise ValueError("need a non-empty (n, length) window array with one label per window")
    if not (np.all(np.isfinite(windows)) and np.all(np.isfinite(labels))):
        raise ValueError("windows and labels must be finite")
    mean = float(windows.mean())
    std = float(windows.std())
    std = std if std > 1e-12 else 1.0
    if model is None:
        model = CnnModel.reference(windows.shape[1])
    model.input_mean, model.input_std = mean, std
    model.label_scale = LABEL_SCALE
    model.init(config.seed).astype(np.dtype(config.dtype))
    model.meta.update({"train_config": config.to_dict(), "train_config_hash": config.digest(),
                       "n_train": int(len(labels))})
    x_all = model.normalize(windows)
    y_all = (labels / model.label_scale).astype(model.dtype)
    params = [a for _, _, a in model.parameters()]
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([int(config.seed), 2])
    n = len(labels)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    curve = []
    for it in range(config.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        loss, _ = model.loss_and_grads(x_all[idx], y_all[idx])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it + 1}")
        opt.step([g for _, _, g in model.gradients()])
        curve.append(loss)
        if log_every and (it + 1) % log_every == 0:
            print(f"iter {it + 1:5d} loss {loss:.5f}", flush=True)
    return model, np.asarray(curve)


def kfold_split(groups, k=10, seed=0):
    """Partition item indices into ``k`` folds so that all items sharing a
    group id (patient) land in the same fold.

    ``groups`` is a sequence of group ids, or an int n meaning n singleton
    groups.  Returns a list of (train_idx, val_idx).  Folds hold a near-equal
    number of groups (sizes differ by at most one).
    """
    if isinstance(groups, (int, np.integer)):
        groups = np.arange(int(groups))
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if k < 2 or k > len(uniq):
        raise ValueError(f"k = {k} must lie in [2, number of groups = {len(uniq)}]")
    perm = np.random.default_rng(seed).permutation(len(uniq))
    fold_of_group = np.empty(len(uniq), dtype=int)
    fold_of_group[perm] = np.arange(len(uniq)) % k
    lookup = dict(zip(uniq.tolist(), fold_of_group.tolist()))
    fold = np.array([lookup[g] for g in groups.tolist()])
    out = []
    for f in range(k):
        out.append((np.flatnonzero(fold != f), np.flatnonzero(fold == f)))
    return out


# ------------------------------------------------------------------ datasets

DATASET_FIELDS = ("windows", "labels", "patient", "scenario", "speed", "cycle")


def save_dataset(path, **arrays):
    missing = [f for f in DATASET_FIELDS if f not in arrays]
    if missing:
        raise ValueError(f"dataset missing fields {missing}")
    np.savez_compressed(path, **{f: np.asarray(arrays[f]) for f in DATASET_FIELDS})


def load_dataset(path):
    with np.load(path, allow_pickle=False) as d:
        return {f: d[f] for f in DATASET_FIELDS}


def dataset_digest(ds):
    h = hashlib.sha256()
    for f in DATASET_FIELDS:
        a = np.ascontiguousarray(ds[f])
        h.update(f.encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()
