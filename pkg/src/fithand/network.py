"""Fit-Hand network graph, its ablation variants and the complexity audit.

The default graph::

    stem1, stem2   3x3 stride-2 convs (depth 32)
    stage i        LRN(FineFeat_d(x) + DilatedConv_d(x)),  d = 32, 64, 96
    final_conv     3x3 stride-2 conv (depth 128)
    flatten -> L2 normalise -> fully connected head
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .data import write_pgm
from .errors import ConfigError, ShapeError
from .finefeat import FineFeatSpec, finefeat_forward, finefeat_param_count, he_uniform, init_finefeat
from .ops import effective_kernel  # noqa: F401  (re-exported)
from .tensor import Tensor, default_dtype

VARIANTS = ("full", "WImp", "WDil", "WL", "Stack2", "Stack4", "Kul", "Cat", "CatSig", "Avg", "DpMed")

STAGE_DEPTHS = (32, 64, 96, 128)
STEM_DEPTH = 32
FINAL_DEPTH = 128
DILATION = 2
DEPTH_DIVISORS = (1, 2, 4, 8)

# Published parameter counts in millions, for side-by-side reporting.
PUBLISHED_PARAMS_M = {
    "full": 1.8, "WImp": 0.5, "WDil": 1.4, "WL": 1.8, "Stack2": 1.0, "Stack4": 3.4,
    "Kul": 1.8, "Cat": 1.6, "CatSig": 1.6, "Avg": 1.5, "DpMed": 1.6,
}

FC_CAVEAT = (
    "note: the head flattens the final feature map directly (no global pooling); "
    "its weight count scales with input size and class count, so the total is "
    "only comparable in magnitude with the published 1.8M."
)


@dataclass(frozen=True)
class ArchConfig:
    """Everything needed to rebuild a graph (and stored in checkpoints)."""

    variant: str = "full"
    classes: int = 10
    in_channels: int = 3
    input_size: int = 256
    depth_divisor: int = 1
    activation: bool = True
    seed: int = 0
    lrn_k: float = ops.LRN_DEFAULTS["k"]
    lrn_n: int = ops.LRN_DEFAULTS["n"]
    lrn_alpha: float = ops.LRN_DEFAULTS["alpha"]
    lrn_beta: float = ops.LRN_DEFAULTS["beta"]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.depth_divisor not in DEPTH_DIVISORS:
            raise ConfigError(f"depth divisor must be one of {DEPTH_DIVISORS}, got {self.depth_divisor}")

    @property
    def loss(self) -> str:
        return "kl" if self.variant == "Kul" else "ce"

    @property
    def stage_depths(self) -> tuple[int, ...]:
        n = {"Stack2": 2, "Stack4": 4}.get(self.variant, 3)
        return tuple(d // self.depth_divisor for d in STAGE_DEPTHS[:n])

    @property
    def fusion(self) -> str:
        return {"Cat": "concat", "CatSig": "concat_sigmoid", "Avg": "average", "DpMed": "median"}.get(
            self.variant, "attention"
        )

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ArchConfig":
        kw = {}
        for f in cls.__dataclass_fields__.values():
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("bool", bool):
                kw[f.name] = raw == "True"
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def depth_divisor(depth_scale: float) -> int:
    """Map a depth scale of 1, 1/2, 1/4 or 1/8 to the channel divisor."""
    if depth_scale <= 0:
        raise ConfigError(f"depth_scale must be positive, got {depth_scale}")
    div = round(1.0 / depth_scale)
    if div not in DEPTH_DIVISORS or not np.isclose(div * depth_scale, 1.0):
        raise ConfigError(f"depth_scale must be one of 1, 1/2, 1/4, 1/8; got {depth_scale}")
    return div


@dataclass
class Node:
    name: str
    kind: str  # conv | finefeat | add | lrn | flatten | l2norm | dense
    inputs: tuple[str, ...]
    conv: ops.ConvSpec | None = None
    finefeat: FineFeatSpec | None = None
    relu: bool = False
    stage: bool = False  # exported by dump_mean_activations
    dims: tuple[int, ...] = ()  # per-sample output dims, filled at build time


@dataclass
class NetworkGraph:
    config: ArchConfig
    nodes: list[Node]
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return self.config.classes

    @property
    def loss(self) -> str:
        return self.config.loss

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def count(self, kind: str, fusion: str | None = None, dilated: bool | None = None) -> int:
        total = 0
        for n in self.nodes:
            if n.kind != kind:
                continue
            if fusion is not None and (n.finefeat is None or n.finefeat.fusion != fusion):
                continue
            if dilated is not None and (n.conv is None or (n.conv.dilation > 1) != dilated):
                continue
            total += 1
        return total

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def node_params(self, node: Node) -> dict[str, Tensor]:
        prefix = node.name + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, x: Tensor, keep: bool = False) -> Tensor | tuple[Tensor, dict[str, Tensor]]:
        """Run the graph on a (n, c, h, w) batch; ``keep`` also returns every node output."""
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or x.dims[1:] != expected:
            raise ShapeError(f"network expects (n, {', '.join(map(str, expected))}) input, got {x.dims}")
        env: dict[str, Tensor] = {"input": x}
        out = x
        for node in self.nodes:
            args = [env[i] for i in node.inputs]
            p = self.node_params(node)
            if node.kind == "conv":
                out = ops.conv2d(args[0], p["w"], p.get("b"), node.conv)
                if node.relu:
                    out = ops.relu(out)
            elif node.kind == "finefeat":
                out = finefeat_forward(args[0], node.finefeat, p)
            elif node.kind == "add":
                out = ops.add(args[0], args[1])
            elif node.kind == "lrn":
                out = ops.lrn(args[0], cfg.lrn_k, cfg.lrn_n, cfg.lrn_alpha, cfg.lrn_beta)
            elif node.kind == "flatten":
                out = ops.flatten(args[0])
            elif node.kind == "l2norm":
                out = ops.l2_normalize(args[0])
            elif node.kind == "dense":
                out = ops.dense(args[0], p["w"], p["b"])
            else:  # pragma: no cover - construction only emits the kinds above
                raise ConfigError(f"unknown node kind {node.kind}")
            env[node.name] = out
        return (out, env) if keep else out

    __call__ = forward

    def predict(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        """Argmax class for each sample of a (n, c, h, w) array."""
        preds = []
        dtype = next(iter(self.params.values())).dtype
        for i in range(0, len(x), batch):
            logits = self.forward(Tensor(np.asarray(x[i : i + batch], dtype=dtype)))
            preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _build_nodes(cfg: ArchConfig) -> list[Node]:
    use_finefeat = cfg.variant != "WImp"
    use_dilated = cfg.variant != "WDil"
    div = cfg.depth_divisor
    stem_d = STEM_DEPTH // div
    final_d = FINAL_DEPTH // div
    act = cfg.activation

    nodes = [
        Node("stem1", "conv", ("input",), ops.ConvSpec(cfg.in_channels, stem_d, 3, 2, 1, 1), relu=act, stage=True),
        Node("stem2", "conv", ("stem1",), ops.ConvSpec(stem_d, stem_d, 3, 2, 1, 1), relu=act, stage=True),
    ]
    prev, prev_d = "stem2", stem_d
    for i, d in enumerate(cfg.stage_depths, start=1):
        name = f"stage{i}"
        branches = []
        if use_finefeat:
            nodes.append(Node(f"{name}.finefeat", "finefeat", (prev,), finefeat=FineFeatSpec(prev_d, d, cfg.fusion)))
            branches.append(f"{name}.finefeat")
        if use_dilated:
            spec = ops.ConvSpec.same(prev_d, d, 3, dilation=DILATION)
            nodes.append(Node(f"{name}.dil", "conv", (prev,), spec, relu=act))
            branches.append(f"{name}.dil")
        if len(branches) == 2:
            nodes.append(Node(f"{name}.add", "add", tuple(branches)))
            branches = [f"{name}.add"]
        nodes.append(Node(name, "lrn", (branches[0],), stage=True))
        prev, prev_d = name, d
    nodes.append(Node("final_conv", "conv", (prev,), ops.ConvSpec(prev_d, final_d, 3, 2, 1, 1), relu=act, stage=True))
    nodes.append(Node("flatten", "flatten", ("final_conv",)))
    prev = "flatten"
    if cfg.variant != "WL":
        nodes.append(Node("l2norm", "l2norm", (prev,)))
        prev = "l2norm"
    nodes.append(Node("fc", "dense", (prev,)))
    return nodes


def _infer_dims(cfg: ArchConfig, nodes: list[Node]) -> None:
    dims: dict[str, tuple[int, ...]] = {"input": (cfg.in_channels, cfg.input_size, cfg.input_size)}
    for node in nodes:
        src = [dims[i] for i in node.inputs]
        if node.kind == "conv":
            c, h, w = src[0]
            if c != node.conv.in_channels:
                raise ShapeError(f"{node.name}: expects {node.conv.in_channels} channels, gets {c}")
            out = (node.conv.out_channels, node.conv.output_size(h), node.conv.output_size(w))
        elif node.kind == "finefeat":
            out = (node.finefeat.depth,) + src[0][1:]
        elif node.kind == "add":
            if src[0] != src[1]:
                raise ShapeError(f"{node.name}: cannot add {src[0]} and {src[1]}")
            out = src[0]
        elif node.kind == "flatten":
            out = (int(np.prod(src[0])),)
        elif node.kind == "dense":
            out = (cfg.classes,)
        else:
            out = src[0]
        node.dims = out
        dims[node.name] = out


def _init_params(cfg: ArchConfig, nodes: list[Node], dtype=None) -> dict[str, Tensor]:
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}
    dims = {n.name: n.dims for n in nodes}
    for node in nodes:
        if node.kind == "conv":
            w, b = he_uniform(node.conv, rng, dtype)
            params[f"{node.name}.w"] = w
            if b is not None:
                params[f"{node.name}.b"] = b
        elif node.kind == "finefeat":
            for k, v in init_finefeat(node.finefeat, rng, dtype).items():
                params[f"{node.name}.{k}"] = v
        elif node.kind == "dense":
            feats = dims[node.inputs[0]][0]
            bound = np.sqrt(6.0 / feats)
            params["fc.w"] = Tensor(rng.uniform(-bound, bound, (feats, cfg.classes)).astype(dtype), requires_grad=True)
            params["fc.b"] = Tensor(np.zeros(cfg.classes, dtype=dtype), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return params


def build_graph(cfg: ArchConfig, dtype=None) -> NetworkGraph:
    nodes = _build_nodes(cfg)
    _infer_dims(cfg, nodes)
    return NetworkGraph(cfg, nodes, _init_params(cfg, nodes, dtype))


def build_fithand(
    classes: int,
    in_channels: int = 3,
    depth_scale: float = 1.0,
    input_size: int = 256,
    seed: int = 0,
    **kw,
) -> NetworkGraph:
    cfg = ArchConfig("full", classes, in_channels, input_size, depth_divisor(depth_scale), seed=seed, **kw)
    return build_graph(cfg)


def build_variant(
    variant: str,
    classes: int,
    in_channels: int = 3,
    depth_scale: float = 1.0,
    input_size: int = 256,
    seed: int = 0,
    **kw,
) -> NetworkGraph:
    cfg = ArchConfig(variant, classes, in_channels, input_size, depth_divisor(depth_scale), seed=seed, **kw)
    return build_graph(cfg)


def iter_variants(base: ArchConfig) -> Iterator[ArchConfig]:
    for v in VARIANTS:
        yield replace(base, variant=v)


# -- audit -----------------------------------------------------------------


@dataclass
class Audit:
    rows: list[tuple[str, str, int]]  # (layer, kind, parameter count)
    total: int
    nbytes: int

    def table(self) -> str:
        width = max(len(r[0]) for r in self.rows) if self.rows else 5
        lines = [f"{'layer':<{width}}  {'kind':<9} {'params':>11}"]
        lines.append("-" * len(lines[0]))
        for name, kind, count in self.rows:
            lines.append(f"{name:<{width}}  {kind:<9} {count:>11,}")
        lines.append("-" * len(lines[0]))
        lines.append(f"{'total':<{width}}  {'':<9} {self.total:>11,}")
        lines.append(f"{'bytes':<{width}}  {'':<9} {self.nbytes:>11,}")
        return "\n".join(lines)

    def key_values(self) -> str:
        out = [f"param.{name}={count}" for name, _, count in self.rows]
        out += [f"total_params={self.total}", f"checkpoint_bytes={self.nbytes}"]
        return "\n".join(out)


def node_param_count(node: Node, feats_in: int | None = None, classes: int | None = None) -> int:
    if node.kind == "conv":
        return node.conv.param_count()
    if node.kind == "finefeat":
        return finefeat_param_count(node.finefeat)
    if node.kind == "dense":
        return feats_in * classes + classes
    return 0


def audit_parameters(g: NetworkGraph) -> Audit:
    from .checkpoint import encode_checkpoint

    rows = []
    for node in g.nodes:
        feats = g.node(node.inputs[0]).dims[0] if node.kind == "dense" else None
        count = node_param_count(node, feats, g.classes)
        if count:
            rows.append((node.name, node.kind, count))
    total = sum(r[2] for r in rows)
    return Audit(rows, total, len(encode_checkpoint(g)))


def variant_comparison(base: ArchConfig) -> list[dict]:
    """Parameter totals for every variant, next to the published figure."""
    out = []
    for cfg in iter_variants(base):
        nodes = _build_nodes(cfg)
        _infer_dims(cfg, nodes)
        g = NetworkGraph(cfg, nodes)
        total = sum(
            node_param_count(n, g.node(n.inputs[0]).dims[0] if n.kind == "dense" else None, cfg.classes)
            for n in nodes
        )
        out.append(
            dict(
                variant=cfg.variant,
                params=total,
                float32_mb=4 * total / 2**20,
                published_m=PUBLISHED_PARAMS_M[cfg.variant],
                attention_nodes=g.count("finefeat", fusion="attention"),
                loss=cfg.loss,
            )
        )
    return out


def format_variant_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<8} {'params':>11} {'MB(f32)':>8} {'publ.(M)':>9} {'loss':>5}"]
    for r in rows:
        lines.append(
            f"{r['variant']:<8} {r['params']:>11,} {r['float32_mb']:>8.2f} {r['published_m']:>9.1f} {r['loss']:>5}"
        )
    return "\n".join(lines)


# -- activation maps -------------------------------------------------------


def mean_map_to_gray(m: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8; constant maps become mid-gray 128."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def dump_mean_activations(g: NetworkGraph, image: Tensor, out_dir: str | os.PathLike) -> list[Path]:
    """Write the channel-mean response of every stage output as ``<stage>.pgm``."""
    data = image.data if image.data.ndim == 4 else image.data[None]
    dtype = next(iter(g.params.values())).dtype
    _, env = g.forward(Tensor(np.asarray(data[:1], dtype=dtype)), keep=True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for node in g.nodes:
        if not node.stage:
            continue
        mean = env[node.name].data[0].mean(axis=0)
        path = out_dir / f"{node.name}.pgm"
        write_pgm(path, mean_map_to_gray(mean))
        written.append(path)
    return written
