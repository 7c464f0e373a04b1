"""Feedforward regression network with rectifier hidden layers.

The loss is ``mean((f(x) - y)^2) + lam * sum(||W||_F^2)`` over weight
matrices (biases are not penalized). Inputs are standardized with
training-sample statistics stored on the model.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from volfit.errors import DivergenceDetected, ShapeMismatch

ARCHITECTURES = ((2,), (4, 2), (8, 4, 2), (16, 8, 4, 2), (32, 32), (64, 64))
PENALTIES = (0.0, 1e-4)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    architecture: tuple = (8, 4, 2)
    lam: float = 0.0
    epochs: int = 200
    batch_size: int = 64
    step_size: float = 1e-3
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.architecture or any(int(w) < 1 for w in self.architecture):
            raise ValueError("hidden widths must be >= 1")
        if self.lam < 0:
            raise ValueError("penalty must be >= 0")


@dataclass
class MlpModel:
    weights: list
    biases: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.size:
                raise ShapeMismatch(f"layer {k}: weight/bias shapes disagree")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise ShapeMismatch(f"layer {k}: input width does not chain")
        if self.weights[-1].shape[1] != 1:
            raise ShapeMismatch("output layer must have one unit")

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                arr[...] = theta[pos: pos + arr.size].reshape(arr.shape)
                pos += arr.size
        if pos != theta.size:
            raise ShapeMismatch("flat parameter vector has the wrong length")

    def predict(self, X) -> np.ndarray:
        return _forward(self, X)[0]

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "shapes": [list(W.shape) for W in self.weights],
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "MlpModel":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        W = [np.array(w, dtype=float).reshape(s) for w, s in zip(d["weights"], d["shapes"])]
        b = [np.array(x, dtype=float) for x in d["biases"]]
        return cls(W, b, np.array(d["x_mean"]), np.array(d["x_scale"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_mlp(n_inputs: int, architecture, rng, x_mean=None, x_scale=None, output_bias: float = 0.0) -> MlpModel:
    """He-style uniform hidden weights, limit ``sqrt(6 / fan_in)``, and zero biases.

    The output layer starts at zero weights, so the untrained network predicts
    ``output_bias`` everywhere.
    """
    widths = [n_inputs, *map(int, architecture), 1]
    W, b = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / fan_in)
        W.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    W[-1][:] = 0.0
    b[-1][0] = output_bias
    return MlpModel(W, b,
                    np.zeros(n_inputs) if x_mean is None else np.asarray(x_mean, dtype=float),
                    np.ones(n_inputs) if x_scale is None else np.asarray(x_scale, dtype=float))


def _forward(model: MlpModel, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.n_inputs:
        raise ShapeMismatch(f"expected {model.n_inputs} inputs, got {X.shape[1]}")
    a = (X - model.x_mean) / model.x_scale
    acts = [a]
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W + b
        a = z if k == last else np.maximum(z, 0.0)
        acts.append(a)
    return a[:, 0], acts


def mlp_forward(model: MlpModel, x):
    """Prediction for one feature vector (scalar) or a batch (1-d array)."""
    x = np.asarray(x, dtype=float)
    out = _forward(model, x)[0]
    return float(out[0]) if x.ndim == 1 else out


def mlp_gradient(model: MlpModel, X, y, lam: float = 0.0):
    """Loss and backprop gradients ``(loss, dW list, db list)`` of the penalized batch MSE."""
    y = np.asarray(y, dtype=float).ravel()
    pred, acts = _forward(model, X)
    if pred.size != y.size or y.size == 0:
        raise ShapeMismatch("batch targets do not match the inputs")
    n = y.size
    resid = pred - y
    loss = float(np.mean(resid**2) + lam * sum(np.sum(W * W) for W in model.weights))
    delta = (2.0 / n) * resid[:, None]
    dW = [None] * len(model.weights)
    db = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        dW[k] = acts[k].T @ delta + 2.0 * lam * model.weights[k]
        db[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return loss, dW, db


def flat_gradient(model: MlpModel, X, y, lam: float = 0.0) -> np.ndarray:
    _, dW, db = mlp_gradient(model, X, y, lam)
    return np.concatenate([a.ravel() for pair in zip(dW, db) for a in pair])


def mlp_train(X_train, y_train, X_val, y_val, spec: MlpSpec = MlpSpec()) -> MlpModel:
    """Mini-batch Adam; returns the parameters with the best validation MSE.

    ``model.history`` holds per-epoch ``train_loss`` and ``val_mse`` plus the
    best epoch and its validation MSE.
    """
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    n = y_train.size
    if n < spec.batch_size:
        raise ValueError(f"{n} training rows is fewer than the batch size {spec.batch_size}")
    rng = np.random.default_rng(spec.rng_seed)
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    model = init_mlp(X_train.shape[1], spec.architecture, rng, mu, sd, float(y_train.mean()))
    params = [a for pair in zip(model.weights, model.biases) for a in pair]
    m1 = [np.zeros_like(a) for a in params]
    m2 = [np.zeros_like(a) for a in params]
    step = 0
    best = (np.inf, -1, None)
    train_hist, val_hist = [], []
    for epoch in range(spec.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n - spec.batch_size + 1, spec.batch_size):
            idx = perm[s: s + spec.batch_size]
            loss, dW, db = mlp_gradient(model, X_train[idx], y_train[idx], spec.lam)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"training loss became non-finite in epoch {epoch}")
            total += loss * idx.size
            grads = [g for pair in zip(dW, db) for g in pair]
            step += 1
            c1 = 1.0 - spec.beta1**step
            c2 = 1.0 - spec.beta2**step
            for p, g, a, v in zip(params, grads, m1, m2):
                a *= spec.beta1
                a += (1.0 - spec.beta1) * g
                v *= spec.beta2
                v += (1.0 - spec.beta2) * g * g
                p -= spec.step_size * (a / c1) / (np.sqrt(v / c2) + spec.eps)
        train_hist.append(total / (n - n % spec.batch_size))
        val = float(np.mean((model.predict(X_val) - y_val) ** 2))
        if not np.isfinite(val):
            raise DivergenceDetected(f"validation loss became non-finite in epoch {epoch}")
        val_hist.append(val)
        if val < best[0]:
            best = (val, epoch, model.get_flat())
    if best[2] is not None:
        model.set_flat(best[2])
    model.history = {"train_loss": np.array(train_hist), "val_mse": np.array(val_hist),
                     "best_epoch": best[1], "best_val_mse": best[0]}
    return model


def clone(model: MlpModel) -> MlpModel:
    return copy.deepcopy(model)
