"""Cross-entropy training with RMSProp and per-sublayer learning rates."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .normalization import Normalizer
from .tensor import NonFiniteError, Parameter, Tensor, as_tensor, backward, log_softmax, no_grad

log = logging.getLogger(__name__)

GROUPS = ("net", "a", "b", "c")


@dataclass(frozen=True)
class LrGroups:
    """Base rate plus multipliers for the shift, scale and gate sublayers.

    The effective rate of a normalizer parameter is ``eta * eta_<group>``;
    network weights use ``eta`` directly.
    """

    eta: float = 1e-4
    eta_a: float = 1e-6
    eta_b: float = 1e-3
    eta_c: float = 10.0

    def __post_init__(self):
        for name in ("eta", "eta_a", "eta_b", "eta_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"learning rate {name} must be non-negative")

    def rate(self, group: str) -> float:
        if group == "net":
            return self.eta
        if group in ("a", "b", "c"):
            return self.eta * getattr(self, f"eta_{group}")
        raise KeyError(f"unknown parameter group {group!r}")


# Per-architecture sublayer rates for the limit-order-book task, and the household-power rates.
PRESETS: dict[str, LrGroups] = {
    "fi2010-mlp": LrGroups(eta=1e-4, eta_a=1e-6, eta_b=1e-3, eta_c=10.0),
    "fi2010-cnn": LrGroups(eta=1e-4, eta_a=1e-2, eta_b=1e-9, eta_c=10.0),
    "fi2010-rnn": LrGroups(eta=1e-4, eta_a=1e-2, eta_b=1e-8, eta_c=10.0),
    "power": LrGroups(eta=1e-4, eta_a=1e-5, eta_b=1e-2, eta_c=10.0),
}


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels))
    n = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range [0, {n})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean(axis=0)


# -- optimizer ------------------------------------------------------------


@dataclass
class RMSPropState:
    v: np.ndarray
    rho: float = 0.9
    eps: float = 1e-8


def rmsprop_step(param: Parameter, state: RMSPropState, lr: float) -> None:
    g = param.grad
    state.v = state.rho * state.v + (1.0 - state.rho) * g * g
    if lr != 0.0:
        param.data = param.data - lr * g / (np.sqrt(state.v) + state.eps)


class RMSProp:
    def __init__(self, params: list[Parameter], lr_groups: LrGroups, rho: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr_groups = lr_groups
        self.state = [RMSPropState(np.zeros_like(p.data), rho, eps) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, s in zip(self.params, self.state):
            rmsprop_step(p, s, self.lr_groups.rate(p.group))


# -- sampling -------------------------------------------------------------


class BalancedSampler:
    """Draws indices i.i.d. with probability inversely proportional to class frequency."""

    def __init__(self, labels, seed=None):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("cannot sample from an empty label set")
        classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
        self.classes = classes
        self.counts = counts
        weights = 1.0 / counts[inverse]
        self.weights = weights / weights.sum()
        self.rng = np.random.default_rng(seed)

    def sample(self, batch_size: int) -> np.ndarray:
        return self.rng.choice(len(self.weights), size=batch_size, replace=True, p=self.weights)


def balanced_sample(sampler: BalancedSampler, batch_size: int) -> np.ndarray:
    return sampler.sample(batch_size)


# -- training loop --------------------------------------------------------


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    seconds: float = 0.0

    def log_line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} train_acc={self.accuracy:.6f} time={self.seconds:.3f}"


def trainable_parameters(model, normalizer: Normalizer) -> list[Parameter]:
    return list(normalizer.parameters()) + list(model.parameters())


def train_epoch(model, normalizer: Normalizer, windows, labels, optimizer: RMSProp, batch_size: int, rng, epoch: int = 0) -> EpochStats:
    """One pass of ``ceil(M / batch_size)`` class-balanced batches."""
    rng = np.random.default_rng(rng)
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sampler = BalancedSampler(labels, rng)
    n_batches = math.ceil(len(labels) / batch_size)
    total_loss = 0.0
    correct = 0
    seen = 0
    start = time.perf_counter()
    for b in range(n_batches):
        idx = sampler.sample(batch_size)
        yb = labels[idx]
        try:
            logits = model(normalizer(windows[idx], training=True), training=True, rng=rng)
            loss = cross_entropy_loss(logits, yb)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"non-finite forward pass at epoch {epoch}, batch {b}: {exc}") from exc
        if not np.isfinite(loss.data).all():
            raise TrainingDivergence(f"NaN loss at epoch {epoch}, batch {b}")
        backward(loss)
        optimizer.step()
        total_loss += loss.item() * len(idx)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        seen += len(idx)
    return EpochStats(epoch, total_loss / seen, correct / seen, time.perf_counter() - start)


def predict(model, normalizer: Normalizer, windows, batch_size: int = 1024) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            logits = model(normalizer(windows[start : start + batch_size], training=False))
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)


def fit(model, normalizer: Normalizer, windows, labels, lr_groups: LrGroups, epochs: int = 20, batch_size: int = 128, seed=0, log_fn=None) -> TrainResult:
    """Fit the normalizer's fixed statistics, then train for ``epochs`` epochs."""
    rng = np.random.default_rng(seed)
    normalizer.fit(windows)
    optimizer = RMSProp(trainable_parameters(model, normalizer), lr_groups)
    result = TrainResult()
    for epoch in range(1, epochs + 1):
        stats = train_epoch(model, normalizer, windows, labels, optimizer, batch_size, rng, epoch)
        result.history.append(stats)
        line = stats.log_line()
        log.info(line)
        if log_fn is not None:
            log_fn(line)
    return result
