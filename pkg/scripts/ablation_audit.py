"""Parameter and footprint comparison of every ablation variant.

Prints the per-layer audit of the chosen base build followed by one row per
variant (parameter count, float32 megabytes, checkpoint bytes and the
published figure for reference). Optionally times a forward pass per variant.

    python3 scripts/ablation_audit.py --classes 10 --input-size 256
    python3 scripts/ablation_audit.py --input-size 64 --depth-scale 4 --time
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fithand.network import (
    FC_CAVEAT,
    PUBLISHED_PARAMS_M,
    ArchConfig,
    audit_parameters,
    build_graph,
    iter_variants,
)
from fithand.tensor import Tensor


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--channels", type=int, default=3)
    ap.add_argument("--input-size", type=int, default=256)
    ap.add_argument("--depth-scale", type=int, default=1, choices=(1, 2, 4, 8))
    ap.add_argument("--time", action="store_true", help="time one single-image forward pass per variant")
    args = ap.parse_args()

    base = ArchConfig("full", args.classes, args.channels, args.input_size, args.depth_scale)
    print(audit_parameters(build_graph(base)).table())
    print()
    head = f"{'variant':<8} {'params':>11} {'MB(f32)':>8} {'ckpt bytes':>11} {'publ.(M)':>9}"
    print(head + (f" {'fwd ms':>8}" if args.time else ""))
    x = np.random.default_rng(0).uniform(size=(1, args.channels, args.input_size, args.input_size))
    for cfg in iter_variants(base):
        g = build_graph(cfg)
        a = audit_parameters(g)
        line = f"{cfg.variant:<8} {a.total:>11,} {4 * a.total / 2**20:>8.2f} {a.nbytes:>11,} {PUBLISHED_PARAMS_M[cfg.variant]:>9.1f}"
        if args.time:
            t = Tensor(x.astype(np.float32))
            start = time.perf_counter()
            g(t)
            line += f" {1e3 * (time.perf_counter() - start):>8.1f}"
        print(line)
    print(FC_CAVEAT)


if __name__ == "__main__":
    main()
