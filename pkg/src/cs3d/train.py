"""Cross-entropy, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .events import Dataset
from .network import Model
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    target_accuracy: float | None = None  # stop once held-out accuracy reaches this

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must lie in (0, 1]")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not line up")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    n = labels.size
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def back(g):
        grad = np.exp(lsm)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor.from_op(np.array(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, cfg: TrainConfig, t: int) -> None:
    """Bias-corrected Adam update, in place, for step index ``t`` (1-based)."""
    if t < 1:
        raise ValueError("step index starts at 1")
    b1, b2 = cfg.betas
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    state.t = t


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_accuracy(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)

    @classmethod
    def from_predictions(cls, labels, preds, class_count: int) -> "Metrics":
        cm = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
        return cls(cm)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.confusion.shape[0]
        w.writerow(["accuracy", f"{self.accuracy:.6f}"])
        w.writerow(["true\\pred"] + [str(j) for j in range(k)] + ["class_accuracy"])
        for i in range(k):
            acc = self.per_class_accuracy[i]
            w.writerow([str(i)] + [str(int(c)) for c in self.confusion[i]] + ["" if np.isnan(acc) else f"{acc:.6f}"])
        return buf.getvalue()


def predict(m: Model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode argmax predictions; ties go to the lowest class index."""
    m.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            logits = m(Tensor(x[i : i + batch_size])).data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(m: Model, data: Dataset, batch_size: int = 32) -> Metrics:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return Metrics.from_predictions(data.y, predict(m, data.x, batch_size), data.class_count)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_accuracy: float | None


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_state: tuple[dict, dict] | None = None
    steps: int = 0

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_accuracy"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), "" if r.eval_accuracy is None else repr(r.eval_accuracy)])
        return buf.getvalue()


def epoch_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def train(m: Model, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None, restore_best: bool = False) -> TrainingHistory:
    """Mini-batch Adam over shuffled epochs.

    After each epoch the mean training loss and (if ``eval_data`` is given) the
    held-out accuracy are recorded; the parameters of the best epoch (highest
    accuracy, or lowest loss without eval data) are kept in the history.
    With ``cfg.target_accuracy`` set, training stops after the first epoch
    whose held-out accuracy reaches it.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = TrainingHistory()
    if cfg.epochs == 0:
        return history
    params = m.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    best = -math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        m.train()
        order = epoch_order(len(data), rng)
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            m.zero_grad()
            loss = cross_entropy(m(Tensor(data.x[idx])), data.y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step + 1}")
            loss.backward()
            step += 1
            adam_step(params, [p.grad for p in params], state, cfg, step)
            total += value * len(idx)
            seen += len(idx)
        train_loss = total / seen
        acc = evaluate(m, eval_data).accuracy if eval_data is not None and len(eval_data) else None
        history.records.append(EpochRecord(epoch, train_loss, acc))
        score = acc if acc is not None else -train_loss
        if score > best:
            best = score
            history.best_epoch = epoch
            history.best_state = m.state()
        log.info("epoch %d loss %.4f acc %s", epoch, train_loss, "-" if acc is None else f"{acc:.4f}")
        if cfg.target_accuracy is not None and acc is not None and acc >= cfg.target_accuracy:
            break
    history.steps = step
    if restore_best and history.best_state is not None:
        m.load_state(*history.best_state)
    return history
