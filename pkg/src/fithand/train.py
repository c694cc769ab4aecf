"""Mini-batch SGD training and confusion-matrix evaluation."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import Dataset
from .errors import ConfigError, InputError, NumericError
from .network import NetworkGraph
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    batch: int = 16
    loss: str | None = None  # "ce" | "kl"; None follows the graph's variant
    seed: int = 0
    momentum: float = 0.0
    variant: str = "full"
    depth_divisor: int = 1
    input_size: int = 256
    classes: int | None = None
    channels: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss not in (None, "ce", "kl"):
            raise ConfigError(f"loss must be 'ce' or 'kl', got {self.loss!r}")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,loss,accuracy\n")
        for e in self.epochs:
            buf.write(f"{e.epoch},{e.loss!r},{e.accuracy!r}\n")
        return buf.getvalue()


def _as_arrays(data, size: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.tensors(size)
    x, y = data
    return np.asarray(x), np.asarray(y, dtype=np.int64)


def batch_loss(graph: NetworkGraph, x: np.ndarray, y: np.ndarray, loss: str | None = None):
    """Forward pass under a tape; returns (tape, loss tensor, logits)."""
    fn = ops.LOSSES[loss or graph.loss]
    dtype = graph.parameters()[0].dtype
    with GradTape() as tape:
        logits = graph(Tensor(np.asarray(x, dtype=dtype)))
        value = fn(logits, y)
    return tape, value, logits


def train(graph: NetworkGraph, data, config: TrainConfig) -> tuple[NetworkGraph, TrainLog]:
    """Train ``graph`` in place; ``data`` is a :class:`Dataset` or an (x, y) pair."""
    if isinstance(data, Dataset) and data.num_classes != graph.classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, network head has {graph.classes}")
    x, y = _as_arrays(data, graph.config.input_size)
    if len(y) and y.max() >= graph.classes:
        raise ConfigError(f"label {y.max()} exceeds network head with {graph.classes} classes")
    params = graph.parameters()
    opt = ops.SGD(params, config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    history = TrainLog()
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch)):
            idx = order[start : start + config.batch]
            tape, value, logits = batch_loss(graph, x[idx], y[idx], config.loss)
            lv = value.item()
            if not np.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at epoch {epoch}, batch {b}")
            opt.step(tape.gradient(value, params))
            total += lv * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y[idx]).sum())
        entry = EpochLog(epoch, total / max(n, 1), correct / max(n, 1))
        history.epochs.append(entry)
        log.info("epoch %d loss %.5f acc %.4f", entry.epoch, entry.loss, entry.accuracy)
    return graph, history


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = truth, columns = prediction
    accuracy: float
    f1: np.ndarray
    macro_f1: float

    @classmethod
    def from_predictions(cls, truth, pred, classes: int) -> "Metrics":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.size == 0:
            raise InputError("cannot compute metrics on an empty dataset")
        cm = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(cm, (truth, pred), 1)
        tp = np.diag(cm).astype(np.float64)
        col = cm.sum(axis=0)
        row = cm.sum(axis=1)
        precision = np.divide(tp, col, out=np.zeros(classes), where=col > 0)
        recall = np.divide(tp, row, out=np.zeros(classes), where=row > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros(classes), where=denom > 0)
        return cls(cm, float(tp.sum() / cm.sum()), f1, float(f1.mean()))

    def table(self, names: list[str] | None = None) -> str:
        c = len(self.f1)
        names = names or [str(i) for i in range(c)]
        w = max(5, *(len(n) for n in names))
        head = f"{'truth':<{w}} " + " ".join(f"{n:>{w}}" for n in names) + f" {'F1':>7}"
        lines = [head]
        for i in range(c):
            cells = " ".join(f"{v:>{w}d}" for v in self.confusion[i])
            lines.append(f"{names[i]:<{w}} {cells} {self.f1[i]:>7.4f}")
        lines.append(f"accuracy {self.accuracy:.4f}   macro F1 {self.macro_f1:.4f}")
        return "\n".join(lines)

    def key_values(self) -> str:
        out = [f"accuracy={self.accuracy!r}", f"macro_f1={self.macro_f1!r}", f"samples={int(self.confusion.sum())}"]
        out += [f"f1.{i}={v!r}" for i, v in enumerate(self.f1)]
        return "\n".join(out)


def evaluate(graph: NetworkGraph, data, batch: int = 64) -> Metrics:
    x, y = _as_arrays(data, graph.config.input_size)
    if len(y) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return Metrics.from_predictions(y, graph.predict(x, batch), graph.classes)
