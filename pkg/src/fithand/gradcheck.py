"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import GradTape, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray
    checked: int

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare the reverse-mode gradient of scalar ``f`` at ``point`` to
    ``(f(x+h) - f(x-h)) / 2h``.

    Relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as
    denominator. ``max_coords`` probes a seeded random subset of coordinates
    instead of all of them.
    """
    if point.dtype != np.float64:
        raise ConfigError("grad_check needs a float64 point (run under precision('float64'))")
    if not 1e-6 <= h <= 1e-3:
        raise ConfigError(f"step h must lie in [1e-6, 1e-3], got {h}")

    x = Tensor(point.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ConfigError(f"grad_check needs a scalar function, got dims {y.dims}")
    (analytic,) = tape.gradient(y, [x])

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))

    numeric = np.zeros(flat.size)
    probe = Tensor(x.data.copy())
    pflat = probe.data.reshape(-1)
    for i in coords:
        orig = pflat[i]
        pflat[i] = orig + h
        up = f(probe).item()
        pflat[i] = orig - h
        down = f(probe).item()
        pflat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"f is not finite at probe coordinate {np.unravel_index(i, x.dims)}")
        numeric[i] = (up - down) / (2 * h)

    a = analytic.reshape(-1)[coords]
    num = numeric[coords]
    rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckResult(
        max_rel_error=float(rel[worst]) if rel.size else 0.0,
        worst_index=tuple(int(v) for v in np.unravel_index(coords[worst], x.dims)) if rel.size else (),
        analytic=analytic,
        numeric=numeric.reshape(x.dims),
        checked=int(coords.size),
    )


# -- standard suite ----------------------------------------------------------


def _spread_values(rng: np.random.Generator, shape, gap: float = 2e-2) -> np.ndarray:
    """Random values whose magnitudes stay away from 0 (ReLU / sign kinks)."""
    v = rng.uniform(gap, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _separated_triples(rng: np.random.Generator, shape, gap: float = 2e-2):
    """Three arrays kept ``gap`` away from every kink of the attention block:
    equal inputs, a zero deviation, and tied deviations."""
    from .attention import ScaleTriple, deviation, midrange

    out = np.empty((3,) + tuple(shape))
    flat = out.reshape(3, -1)
    for j in range(flat.shape[1]):
        while True:
            t = rng.uniform(-0.5, 0.5, size=3)
            d = np.abs(t[:, None] - t[None, :])[np.triu_indices(3, 1)]
            if d.min() <= gap:
                continue
            gam = np.asarray(deviation(ScaleTriple.of(*t[:, None]), midrange(ScaleTriple.of(*t[:, None])))).ravel()
            srt = np.sort(gam)
            if srt[0] > gap and srt[1] - srt[0] > gap:
                break
        flat[:, j] = t
    return out


# Piecewise-linear ops have no truncation error, so the widest allowed step
# minimises round-off; test points sit further than this from every kink.
PIECEWISE_STEP = 1e-3


def standard_checks(seed: int = 0, h: float = 1e-5, network: bool = True) -> list[tuple[str, float]]:
    """Gradient-check every primitive (and optionally a tiny full network).

    Returns ``(name, max relative error)`` rows.
    """
    from . import ops
    from .attention import attention_fuse, mean_fuse, median_fuse
    from .finefeat import FineFeatSpec, finefeat_forward, init_finefeat
    from .tensor import precision

    rows: list[tuple[str, float]] = []
    rng = np.random.default_rng(seed)

    def weighted(fn, dims):
        r = rng.normal(size=dims)
        return lambda t: _wsum(fn(t), r)

    def check(name, fn, point, step=None):
        rows.append((name, grad_check(fn, Tensor(point), h=step or h).max_rel_error))

    with precision("float64"):
        x = rng.normal(size=(2, 3, 7, 7))
        s2 = ops.ConvSpec(3, 4, 3, stride=2, padding=1)
        w = Tensor(rng.normal(size=s2.weight_dims))
        b = Tensor(rng.normal(size=4))
        out_dims = (2, 4, 4, 4)
        check("conv2d/input", weighted(lambda t: ops.conv2d(t, w, b, s2), out_dims), x)
        check("conv2d/weight", weighted(lambda t: ops.conv2d(Tensor(x), t, b, s2), out_dims), w.data)
        check("conv2d/bias", weighted(lambda t: ops.conv2d(Tensor(x), w, t, s2), out_dims), b.data)
        sd = ops.ConvSpec.same(3, 4, 3, dilation=2)
        check("conv2d_dilated/input", weighted(lambda t: ops.conv2d(t, w, b, sd), (2, 4, 7, 7)), x)
        check("conv2d_dilated/weight", weighted(lambda t: ops.conv2d(Tensor(x), t, b, sd), (2, 4, 7, 7)), w.data)

        c = rng.normal(size=(2, 6, 3, 3)) * 3.0
        check("lrn", weighted(lambda t: ops.lrn(t, k=2.0, n=5, alpha=0.05, beta=0.75), c.shape), c)
        check("l2_normalize", weighted(ops.l2_normalize, c.shape), c)
        check("relu", weighted(ops.relu, c.shape), _spread_values(rng, c.shape), PIECEWISE_STEP)
        check("sigmoid", weighted(ops.sigmoid, c.shape), c / 3.0)
        check("flatten", weighted(ops.flatten, (2, 54)), c, PIECEWISE_STEP)
        other = Tensor(rng.normal(size=c.shape))
        check("add", weighted(lambda t: ops.add(t, other), c.shape), c, PIECEWISE_STEP)
        check("concat", weighted(lambda t: ops.concat_channels([t, other]), (2, 12, 3, 3)), c, PIECEWISE_STEP)

        dw = Tensor(rng.normal(size=(54, 5)))
        db = Tensor(rng.normal(size=5))
        check("dense/input", weighted(lambda t: ops.dense(t, dw, db), (2, 5)), c)
        check("dense/weight", weighted(lambda t: ops.dense(Tensor(c), t, db), (2, 5)), dw.data)
        check("dense/bias", weighted(lambda t: ops.dense(Tensor(c), dw, t), (2, 5)), db.data)

        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 3, 4, 1])
        check("cross_entropy", lambda t: ops.cross_entropy_loss(t, labels), logits)
        check("kl_divergence", lambda t: ops.kl_divergence_loss(t, labels), logits)

        trip = _separated_triples(rng, (2, 2, 3, 3))
        for i, label in enumerate(("f1", "f2", "f3")):
            fixed = [Tensor(a) for a in trip]

            def fused(t, i=i, fn=attention_fuse, fixed=fixed):
                args = list(fixed)
                args[i] = t
                return fn(*args)

            check(f"attention_fuse/{label}", weighted(fused, trip.shape[1:]), trip[i], PIECEWISE_STEP)
            check(
                f"median_fuse/{label}",
                weighted(lambda t, i=i, fixed=fixed: fused(t, i, median_fuse, fixed), trip.shape[1:]),
                trip[i],
                PIECEWISE_STEP,
            )
        check("mean_fuse", weighted(lambda t: mean_fuse(t, Tensor(trip[1]), Tensor(trip[2])), trip.shape[1:]), trip[0], PIECEWISE_STEP)

        spec = FineFeatSpec(2, 3, "attention")
        ff = init_finefeat(spec, np.random.default_rng(seed))
        fx = rng.normal(size=(1, 2, 6, 6))
        check("finefeat/input", weighted(lambda t: finefeat_forward(t, spec, ff), (1, 3, 6, 6)), fx)
        for fusion in ("concat", "concat_sigmoid"):
            sp = FineFeatSpec(2, 3, fusion)
            pp = init_finefeat(sp, np.random.default_rng(seed))
            check(f"finefeat_{fusion}/input", weighted(lambda t, sp=sp, pp=pp: finefeat_forward(t, sp, pp), (1, 3, 6, 6)), fx)

        if network:
            rows.extend(network_checks(seed))
    return rows


def _wsum(t: Tensor, r: np.ndarray) -> Tensor:
    from .tensor import record

    return record(np.asarray((t.data * r).sum(), dtype=t.dtype), (t,), lambda g: (g * r,), "weighted_sum")


def kink_margin(graph, x: np.ndarray) -> float:
    """Distance from the nearest non-smooth point of the network at input ``x``,
    relative to each layer's largest activation.

    Covers ReLU pre-activations and the attention / median orderings inside
    every FineFeat node.
    """
    from . import ops
    from .finefeat import finefeat_responses

    _, env = graph.forward(Tensor(x), keep=True)
    margin = np.inf
    for node in graph.nodes:
        if node.kind == "conv" and node.relu:
            p = graph.node_params(node)
            pre = ops.conv2d(env[node.inputs[0]], p["w"], p.get("b"), node.conv).data
            margin = min(margin, float(np.abs(pre).min() / np.abs(pre).max()))
        elif node.kind == "finefeat" and node.finefeat.fusion in ("attention", "median"):
            s = np.sort(np.stack([t.data for t in finefeat_responses(env[node.inputs[0]], node.finefeat, graph.node_params(node))]), axis=0)
            gaps = [s[1] - s[0], s[2] - s[1]]
            if node.finefeat.fusion == "attention":
                gaps.append(np.abs(2 * s[1] - s[0] - s[2]))
            scale = np.abs(s).max()
            margin = min(margin, float(min(np.abs(gp).min() for gp in gaps) / scale))
    return margin


def network_checks(
    seed: int = 0,
    h: float = 1e-5,
    input_size: int = 16,
    coords_per_tensor: int = 12,
    variant: str = "full",
    min_margin: float = 1e-4,
) -> list[tuple[str, float]]:
    """Loss gradient of the depth-1/8 network w.r.t. its input and a seeded
    sample of every parameter tensor, at a point (input and biases) drawn
    ``min_margin`` away from every kink."""
    from . import ops
    from .network import build_variant
    from .tensor import precision

    rows = []
    with precision("float64"):
        g = build_variant(variant, classes=3, in_channels=3, depth_scale=0.125, input_size=input_size, seed=seed)
        rng = np.random.default_rng(seed + 1)
        for _ in range(200):
            # zero biases put dead-window pre-activations exactly on the ReLU kink
            for name, p in g.params.items():
                if name.endswith(".b"):
                    p.data[...] = rng.uniform(-0.1, 0.1, size=p.dims)
            x = rng.uniform(0.0, 1.0, size=(2, 3, input_size, input_size))
            if kink_margin(g, x) >= min_margin:
                break
        else:
            raise NumericError(f"no input with kink margin >= {min_margin} found")
        labels = np.array([0, 2])
        loss_fn = ops.LOSSES[g.loss]
        res = grad_check(lambda t: loss_fn(g(t), labels), Tensor(x), h=h)
        rows.append((f"network[{variant}]/input", res.max_rel_error))
        worst = 0.0
        for name, p in g.params.items():
            original = p

            def f(t, name=name):
                g.params[name] = t
                try:
                    return loss_fn(g(Tensor(x)), labels)
                finally:
                    g.params[name] = original

            res = grad_check(f, Tensor(p.data), h=h, max_coords=coords_per_tensor, seed=seed)
            worst = max(worst, res.max_rel_error)
        rows.append((f"network[{variant}]/params", worst))
    return rows
