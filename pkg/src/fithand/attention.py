"""Parameter-free attention block that fuses three multi-scale responses.

For responses ``f1, f2, f3`` of identical shape, elementwise::

    phi   = (max(f) + min(f)) / 2          midrange
    gamma = |phi - f_i|                    deviation of each scale
    delta = phi + min_i gamma_i

which reduces to ``max(median, min + max - median)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record


class ScaleTriple(NamedTuple):
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray

    @classmethod
    def of(cls, f1, f2, f3) -> "ScaleTriple":
        arrs = [np.asarray(f) for f in (f1, f2, f3)]
        arrs = [a.astype(np.result_type(a, np.float32), copy=False) for a in arrs]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise ShapeError(f"scale responses must share dims, got {[a.shape for a in arrs]}")
        return cls(*arrs)

    def stack(self) -> np.ndarray:
        return np.stack(self, axis=0)


def midrange(t: ScaleTriple) -> np.ndarray:
    t = ScaleTriple.of(*t)
    return 0.5 * (np.maximum(np.maximum(t.f1, t.f2), t.f3) + np.minimum(np.minimum(t.f1, t.f2), t.f3))


def deviation(t: ScaleTriple, phi) -> ScaleTriple:
    t = ScaleTriple.of(*t)
    phi = np.asarray(phi)
    if phi.shape != t.f1.shape:
        raise ShapeError(f"phi dims {phi.shape} != response dims {t.f1.shape}")
    return ScaleTriple(*(np.abs(phi - f) for f in t))


def fuse_values(t: ScaleTriple) -> np.ndarray:
    """Forward value of the attention block (no tape)."""
    phi = midrange(t)
    gam = deviation(t, phi)
    delta = phi + np.minimum(np.minimum(gam.f1, gam.f2), gam.f3)
    # exact arithmetic keeps delta inside [min, max]; clamp away roundoff
    s = ScaleTriple.of(*t).stack()
    return np.clip(delta, s.min(axis=0), s.max(axis=0))


def fuse_jacobian(t: ScaleTriple) -> np.ndarray:
    """Elementwise partials d(delta)/d(f_i), stacked on a leading axis of 3.

    Non-smooth points use lowest-index selection for argmax, argmin and the
    smallest deviation, and sign(0) = 0.
    """
    s = ScaleTriple.of(*t).stack()
    idx = np.arange(3).reshape((3,) + (1,) * (s.ndim - 1))
    hi = np.argmax(s, axis=0)
    lo = np.argmin(s, axis=0)
    dphi = 0.5 * (idx == hi) + 0.5 * (idx == lo)
    phi = 0.5 * (s.max(axis=0) + s.min(axis=0))
    gam = np.abs(phi - s)
    pick = np.argmin(gam, axis=0)
    chosen = np.take_along_axis(s, pick[None], axis=0)[0]
    sign = np.sign(phi - chosen)
    return (1.0 + sign) * dphi - sign * (idx == pick)


def attention_fuse(f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    triple = ScaleTriple.of(f1.data, f2.data, f3.data)
    out = fuse_values(triple).astype(f1.dtype, copy=False)

    def vjp(g):
        jac = fuse_jacobian(triple)
        return g * jac[0], g * jac[1], g * jac[2]

    return record(out, (f1, f2, f3), vjp, "attention_fuse")


def _sorted_stack(*parts: Tensor) -> tuple[np.ndarray, np.ndarray]:
    s = np.stack([p.data for p in parts], axis=0)
    order = np.argsort(s, axis=0, kind="stable")
    return s, order


def median_fuse(f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    """Elementwise median of three responses; gradient flows to the median's source."""
    s, order = _sorted_stack(f1, f2, f3)
    mid = order[1]
    out = np.take_along_axis(s, mid[None], axis=0)[0]
    idx = np.arange(3).reshape((3,) + (1,) * (s.ndim - 1))
    mask = (idx == mid).astype(s.dtype)
    return record(out, (f1, f2, f3), lambda g: (g * mask[0], g * mask[1], g * mask[2]), "median_fuse")


def mean_fuse(f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    out = (f1.data + f2.data + f3.data) / 3.0
    return record(out.astype(f1.dtype, copy=False), (f1, f2, f3), lambda g: (g / 3.0,) * 3, "mean_fuse")
