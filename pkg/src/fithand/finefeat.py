"""FineFeat: three stride-1 convolutions (3x3, 5x5, 7x7) fused into one map.

The default fusion is the attention block; ``concat``, ``concat_sigmoid``,
``average`` and ``median`` are the ablation alternatives. The concat modes
project the 3*d stacked channels back to d with a 1x1 convolution so the
result can still be added to the dilated branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import attention_fuse, mean_fuse, median_fuse
from .errors import ConfigError, ShapeError
from .tensor import Tensor, default_dtype

SCALES = (3, 5, 7)
FUSIONS = ("attention", "concat", "concat_sigmoid", "average", "median")


@dataclass(frozen=True)
class FineFeatSpec:
    in_channels: int
    depth: int
    fusion: str = "attention"

    def __post_init__(self):
        if self.depth <= 0 or self.in_channels <= 0:
            raise ConfigError(f"FineFeat channel counts must be positive: {self}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")

    @property
    def has_projection(self) -> bool:
        return self.fusion.startswith("concat")

    def conv_specs(self) -> dict[str, ops.ConvSpec]:
        specs = {f"k{k}": ops.ConvSpec.same(self.in_channels, self.depth, k) for k in SCALES}
        if self.has_projection:
            specs["proj"] = ops.ConvSpec.same(3 * self.depth, self.depth, 1)
        return specs


def he_uniform(spec: ops.ConvSpec, rng: np.random.Generator, dtype=None) -> tuple[Tensor, Tensor | None]:
    """Fan-in scaled uniform weights, zero bias."""
    dtype = dtype or default_dtype()
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    bound = np.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, spec.weight_dims).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if spec.has_bias else None
    return w, b


def init_finefeat(spec: FineFeatSpec, rng: np.random.Generator, dtype=None) -> dict[str, Tensor]:
    params = {}
    for name, cs in spec.conv_specs().items():
        w, b = he_uniform(cs, rng, dtype)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def finefeat_responses(x: Tensor, spec: FineFeatSpec, params: dict[str, Tensor]) -> list[Tensor]:
    """The three raw multi-scale responses, smallest kernel first."""
    if x.data.ndim != 4 or x.dims[1] != spec.in_channels:
        raise ShapeError(f"FineFeat expects (n, {spec.in_channels}, h, w) input, got {x.dims}")
    specs = spec.conv_specs()
    return [ops.conv2d(x, params[f"k{k}.w"], params[f"k{k}.b"], specs[f"k{k}"]) for k in SCALES]


def finefeat_forward(x: Tensor, spec: FineFeatSpec, params: dict[str, Tensor]) -> Tensor:
    f3, f5, f7 = finefeat_responses(x, spec, params)
    if spec.fusion == "attention":
        return attention_fuse(f3, f5, f7)
    if spec.fusion == "average":
        return mean_fuse(f3, f5, f7)
    if spec.fusion == "median":
        return median_fuse(f3, f5, f7)
    stacked = ops.concat_channels([f3, f5, f7])
    if spec.fusion == "concat_sigmoid":
        stacked = ops.sigmoid(stacked)
    return ops.conv2d(stacked, params["proj.w"], params["proj.b"], spec.conv_specs()["proj"])


def finefeat_param_count(spec: FineFeatSpec) -> int:
    total = sum(k * k * spec.in_channels * spec.depth + spec.depth for k in SCALES)
    if spec.has_projection:
        total += 3 * spec.depth * spec.depth + spec.depth
    return total
