"""Loss, Adam, early-stopping training loop."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DivergenceError(RuntimeError):
    pass


class Trainable(Protocol):
    def forward(self, *inputs) -> Tensor: ...
    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]: ...


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 1000
    class_weights: tuple[float, float] = (0.2, 1.0)
    early_stop_patience: int = 50
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.early_stop_patience < self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d


@dataclass
class Dataset:
    """Aligned model inputs and binary labels."""

    inputs: tuple[np.ndarray, ...]
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = tuple(np.asarray(a, dtype=np.float64) for a in self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for a in self.inputs:
            if len(a) != len(self.labels):
                raise ValueError(f"dataset inputs of length {len(a)} vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(tuple(a[idx] for a in self.inputs), self.labels[idx])


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    convergence_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def curve_rows(self) -> list[tuple[int, float, float, float]]:
        return [(i + 1, a, b, c) for i, (a, b, c) in enumerate(zip(self.train_loss, self.val_loss, self.val_acc))]


def weighted_bce(p, y, weights=(0.2, 1.0)):
    """Per-sample weighted BCE for plain floats/arrays, or a mean-reduced Tensor for Tensors."""
    if isinstance(p, Tensor):
        return T.weighted_bce(p, y, weights)
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1 - 1e-12)
    y = np.asarray(y, dtype=np.float64)
    w = np.where(y > 0.5, weights[1], weights[0])
    out = -w * (y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


@contextlib.contextmanager
def no_grad(model: Trainable) -> Iterator[None]:
    params = model.parameters()
    saved = {k: p.requires_grad for k, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = False
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def predict_logits(model: Trainable, data: Dataset, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad(model):
        for s in range(0, len(data), batch_size):
            out.append(model.forward(*(a[s:s + batch_size] for a in data.inputs)).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss(logits, labels, weights, multiclass: bool):
    if multiclass:
        return T.cross_entropy_logits(logits, labels)
    return T.weighted_bce_logits(logits, labels, weights)


def evaluate_loss(model: Trainable, data: Dataset, weights,
                  multiclass: bool = False) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, probabilities) on a dataset.

    Binary accuracy thresholds p(class 1) at 0.5; multiclass uses argmax.
    """
    logits = predict_logits(model, data)
    loss = _loss(Tensor(logits), data.labels, weights, multiclass).data.item()
    probs = softmax_np(logits)
    pred = probs.argmax(axis=1) if multiclass else (probs[:, 1] >= 0.5).astype(np.int64)
    acc = float((pred == data.labels).mean())
    return loss, acc, probs


class Adam:
    """Adam over the trainable parameters of a model; moments kept per parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise RuntimeError(f"no gradient for trainable parameter {name!r}")
            g = p.grad
            t = self.t.get(name, 0) + 1
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name], self.t[name] = m, v, t
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sgd_adam_step(model: Trainable, config: TrainConfig, optimizer: Adam | None = None) -> Adam:
    """One Adam update from the gradients currently held by the model's parameters."""
    opt = optimizer or Adam(model.parameters(), config.learning_rate)
    opt.step()
    return opt


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def train(model: Trainable, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          log=None, multiclass: bool = False) -> History:
    """Mini-batch Adam with early stopping on validation loss; best parameters are restored."""
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    params = model.parameters()
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    opt = Adam(trainable, config.learning_rate)
    rng = np.random.default_rng([config.seed, 0x5EED])
    stopper = EarlyStopping(config.early_stop_patience)
    hist = History()
    best_state = {k: p.data.copy() for k, p in trainable.items()}
    n, bs = len(train_set), config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            for p in trainable.values():
                p.grad = None
            logits = model.forward(*(a[idx] for a in train_set.inputs))
            loss = _loss(logits, train_set.labels[idx], config.class_weights, multiclass)
            lv = loss.data.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            T.backward(loss)
            opt.step()
            total += lv * len(idx)
        val_loss, val_acc, _ = evaluate_loss(model, val_set, config.class_weights, multiclass)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(total / n)
        hist.val_loss.append(val_loss)
        hist.val_acc.append(val_acc)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = {k: p.data.copy() for k, p in trainable.items()}
        if log is not None:
            log(f"epoch {epoch}: train {total / n:.4f} val {val_loss:.4f} acc {val_acc:.3f}")
        if stop:
            break
    for k, p in trainable.items():
        p.data = best_state[k]
    hist.convergence_epoch = stopper.best_epoch
    hist.stopped_epoch = len(hist.val_loss)
    return hist


def stratified_carve(labels: np.ndarray, patients: Sequence[str], fraction: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Patient-grouped stratified (fit, val) index split of a training portion."""
    from .dataio import split_indices

    rng = np.random.default_rng([seed, 0xCA4E])
    fit, val = split_indices(np.asarray(labels), list(patients), fraction, rng)
    return np.asarray(fit, dtype=np.int64), np.asarray(val, dtype=np.int64)
