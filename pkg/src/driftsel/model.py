"""Single-hidden-layer softmax classifier with last-layer gradient extraction.

The network is x -> relu(x W1 + b1) -> softmax(h W2 + b2). Training is plain
mini-batch gradient descent with validation early stopping. The per-sample
last-layer gradient (residual and residual x hidden activations, flattened)
is the quantity all selection scores are computed from.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .datagen import Batch, SampleSet


class DivergenceError(RuntimeError):
    """Raised when a training update produces non-finite gradients."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    patience: int = 10
    seed: int = 0
    # Plain mini-batch descent cannot fit the sinusoidal decision boundaries
    # at this learning rate within the epoch budget; adam is the default.
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class MlpClassifier:
    """One hidden ReLU layer (default width 256) and a softmax output layer."""

    def __init__(self, n_features: int, n_classes: int, hidden_dim: int = 256,
                 seed: int = 0):
        if n_features < 1 or n_classes < 2 or hidden_dim < 1:
            raise ValueError("need n_features >= 1, n_classes >= 2, hidden_dim >= 1")
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        rng = np.random.default_rng(seed)
        lim1 = np.sqrt(6.0 / n_features)  # He-uniform for the ReLU layer
        self.W1 = rng.uniform(-lim1, lim1, size=(n_features, hidden_dim))
        self.b1 = np.zeros(hidden_dim)
        lim2 = np.sqrt(6.0 / (hidden_dim + n_classes))  # Xavier-uniform
        self.W2 = rng.uniform(-lim2, lim2, size=(hidden_dim, n_classes))
        self.b2 = np.zeros(n_classes)

    def hidden(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"input has {X.shape[1]} features, model expects {self.n_features}")
        return np.maximum(X @ self.W1 + self.b1, 0.0)

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.hidden(X) @ self.W2 + self.b2

    def parameters(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def snapshot(self) -> tuple[np.ndarray, ...]:
        return tuple(p.copy() for p in self.parameters())

    def restore(self, params: tuple[np.ndarray, ...]) -> None:
        self.W1, self.b1, self.W2, self.b2 = (p.copy() for p in params)

    def clone(self) -> "MlpClassifier":
        return copy.deepcopy(self)

    @property
    def gradient_dim(self) -> int:
        # bias residual (n_classes) then flattened last-layer weight gradient
        return self.n_classes + self.hidden_dim * self.n_classes


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def forward(model: MlpClassifier, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, probabilities) for one feature vector or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    z = model.logits(x)
    p = softmax(z)
    return (z[0], p[0]) if single else (z, p)


def cross_entropy(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Cross-entropy between a one-hot target and a probability vector."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("shape mismatch between target and prediction")
    if not (np.all((y == 0) | (y == 1)) and y.sum() == 1.0):
        raise ValueError("target must be one-hot")
    with np.errstate(divide="ignore"):
        logp = np.log(y_hat)
    return float(-(y * np.where(y > 0, logp, 0.0)).sum())


def mean_loss(model: MlpClassifier, X: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy from logits (log-sum-exp stable)."""
    if len(y) == 0:
        raise ValueError("empty sample set")
    logp = log_softmax(model.logits(X))
    return float(-logp[np.arange(len(y)), np.asarray(y, dtype=np.int64)].mean())


def last_layer_gradient(model: MlpClassifier, x: np.ndarray, label: int) -> np.ndarray:
    """Per-sample last-layer gradient, laid out [residual, outer(residual, hidden)].

    Entry j*hidden_dim + m of the weight part is the partial derivative with
    respect to W2[m, j].
    """
    h = model.hidden(x)[0]
    p = softmax(h @ model.W2 + model.b2)
    resid = p - one_hot(np.array([label]), model.n_classes)[0]
    return np.concatenate([resid, np.outer(resid, h).ravel()])


def mean_gradient(model: MlpClassifier, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Arithmetic mean of per-sample last-layer gradients over a sample set."""
    if len(y) == 0:
        raise ValueError("empty sample set")
    H = model.hidden(X)
    P = softmax(H @ model.W2 + model.b2)
    R = P - one_hot(y, model.n_classes)
    n = len(y)
    grad_b = R.sum(axis=0) / n
    grad_w = (R.T @ H) / n  # (n_classes, hidden_dim), class-major like the layout
    return np.concatenate([grad_b, grad_w.ravel()])


def full_gradients(model: MlpClassifier, X: np.ndarray,
                   y: np.ndarray) -> tuple[np.ndarray, ...]:
    """Backpropagated mean gradients for all parameters, (gW1, gb1, gW2, gb2)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty update batch")
    n = len(y)
    pre = X @ model.W1 + model.b1
    H = np.maximum(pre, 0.0)
    P = softmax(H @ model.W2 + model.b2)
    R = (P - one_hot(y, model.n_classes)) / n
    gW2 = H.T @ R
    gb2 = R.sum(axis=0)
    dH = R @ model.W2.T
    dH[pre <= 0.0] = 0.0
    gW1 = X.T @ dH
    gb1 = dH.sum(axis=0)
    for g in (gW1, gb1, gW2, gb2):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; training diverged")
    return gW1, gb1, gW2, gb2


def sgd_step(model: MlpClassifier, X: np.ndarray, y: np.ndarray,
             learning_rate: float) -> MlpClassifier:
    """One plain gradient-descent update averaged over the given samples."""
    grads = full_gradients(model, X, y)
    for p, g in zip(model.parameters(), grads):
        p -= learning_rate * g
    return model


class AdamState:
    """First/second moment accumulators for adaptive updates."""

    def __init__(self, model: MlpClassifier, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p) for p in model.parameters()]
        self.v = [np.zeros_like(p) for p in model.parameters()]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, model: MlpClassifier, grads: tuple[np.ndarray, ...],
             learning_rate: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(model.parameters(), grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model: MlpClassifier, config: TrainConfig) -> AdamState | None:
    return AdamState(model) if config.optimizer == "adam" else None


def _epoch_pass(model: MlpClassifier, batches: list[Batch], learning_rate: float,
                rng: np.random.Generator, opt: AdamState | None = None) -> None:
    """One update per batch in seeded-shuffled order."""
    for j in rng.permutation(len(batches)):
        if opt is None:
            sgd_step(model, batches[j].X, batches[j].y, learning_rate)
        else:
            opt.step(model, full_gradients(model, batches[j].X, batches[j].y),
                     learning_rate)


def train(model: MlpClassifier, train_batches: list[Batch], validation: SampleSet,
          config: TrainConfig) -> MlpClassifier:
    """Epoch loop with best-snapshot early stopping on validation loss."""
    config.validate()
    if not train_batches:
        raise ValueError("no training batches")
    if len(validation) == 0:
        raise ValueError("empty validation set")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model, config)
    best_loss = np.inf
    best_params = model.snapshot()
    bad = 0
    for _ in range(config.max_epochs):
        _epoch_pass(model, train_batches, config.learning_rate, rng, opt)
        loss = mean_loss(model, validation.X, validation.y)
        if loss < best_loss:
            best_loss = loss
            best_params = model.snapshot()
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.restore(best_params)
    return model


def predict(model: MlpClassifier, X: np.ndarray) -> np.ndarray:
    return np.argmax(model.logits(X), axis=-1)


def _binary_f1(y_true: np.ndarray, y_pred: np.ndarray, positive: int = 1) -> float:
    tp = np.sum((y_pred == positive) & (y_true == positive))
    fp = np.sum((y_pred == positive) & (y_true != positive))
    fn = np.sum((y_pred != positive) & (y_true == positive))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def evaluate(model: MlpClassifier, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Accuracy and F1 (positive-class F1 for binary, macro-F1 otherwise)."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    preds = predict(model, X)
    accuracy = float(np.mean(preds == y))
    if model.n_classes == 2:
        f1 = _binary_f1(y, preds)
    else:
        f1 = float(np.mean([_binary_f1(y, preds, positive=c)
                            for c in range(model.n_classes)]))
    return accuracy, f1


def save_model(model: MlpClassifier, path: str) -> None:
    np.savez(path, format_version=np.int64(1),
             W1=model.W1, b1=model.b1, W2=model.W2, b2=model.b2)


def load_model(path: str) -> MlpClassifier:
    with np.load(path) as z:
        if int(z["format_version"]) != 1:
            raise ValueError(f"unsupported checkpoint version {int(z['format_version'])}")
        W1, b1, W2, b2 = z["W1"], z["b1"], z["W2"], z["b2"]
    model = MlpClassifier(W1.shape[0], W2.shape[1], hidden_dim=W1.shape[1])
    model.W1, model.b1, model.W2, model.b2 = W1, b1, W2, b2
    return model
