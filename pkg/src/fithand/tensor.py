"""Numpy-backed tensor and a minimal reverse-mode tape.

Activations are rank-4 ``(n, c, h, w)`` arrays; parameters, logits and
losses reuse the same :class:`Tensor` wrapper at whatever rank they need.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

_DTYPE = [np.dtype(np.float32)]
_TAPES: list["GradTape"] = []


def default_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters.

    ``precision("float64")`` is the gradient-check mode.
    """
    _DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad, self.name)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, dtype={self.dtype})"


def zeros(*dims: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(dims, dtype=default_dtype()), requires_grad)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class GradTape:
    """Records differentiable primitives executed inside its ``with`` block.

    Only primitives with at least one input that requires a gradient are
    recorded. :meth:`gradient` replays the records once, newest first.
    """

    records: list[_Record] = field(default_factory=list)
    visited: list[int] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp, op: str) -> None:
        self.records.append(_Record(output, tuple(inputs), vjp, op))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Return d(target)/d(source) for every source (zeros when unreachable)."""
        if seed is None:
            seed = np.ones_like(target.data)
        elif seed.shape != target.dims:
            raise ShapeError(f"seed dims {seed.shape} != target dims {target.dims}")
        grads: dict[int, np.ndarray] = {id(target): seed}
        self.visited = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g = grads.get(id(rec.output))
            if g is None:
                continue
            self.visited.append(idx)
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        out = []
        for src in sources:
            g = grads.get(id(src))
            out.append(np.zeros_like(src.data) if g is None else g)
        return out

    def backward(self, target: Tensor, params: Sequence[Tensor]) -> None:
        """Like :meth:`gradient`, but stores the results in ``param.grad``."""
        for p, g in zip(params, self.gradient(target, params)):
            p.grad = g


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Wrap an op result and register it on every active tape."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        for tape in _TAPES:
            tape.record(out, inputs, vjp, op)
    return out
