"""Desk-scale training run on the synthetic gesture set.

Trains the depth-1/4 network on 64x64 synthetic images (4 classes, 2 subjects,
50 images per class per subject), reports SD and SI test metrics and writes
the epoch logs next to the checkpoint.

    python3 scripts/desk_scale_training.py --out runs/desk
"""

from __future__ import annotations

import argparse
import logging
import tempfile
import time
from pathlib import Path

from fithand.checkpoint import save_checkpoint
from fithand.data import SplitPlan, load_dataset, split, synth_dataset
from fithand.network import ArchConfig, build_graph
from fithand.train import TrainConfig, evaluate, train

DESK = dict(classes=4, per_class=50, size=64, synth_seed=7, depth_divisor=4, lr=0.5, epochs=30, batch=16, seed=0)


def run_protocol(ds, plan: SplitPlan, cfg: TrainConfig, arch: ArchConfig):
    train_ds, test_ds = split(ds, plan)
    g = build_graph(arch)
    start = time.perf_counter()
    g, history = train(g, train_ds, cfg)
    seconds = time.perf_counter() - start
    return g, history, evaluate(g, test_ds), test_ds, seconds


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--epochs", type=int, default=DESK["epochs"])
    ap.add_argument("--lr", type=float, default=DESK["lr"])
    ap.add_argument("--protocol", choices=("sd", "si", "both"), default="both")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        root = synth_dataset(Path(tmp) / "synth", DESK["classes"], DESK["per_class"], DESK["size"], DESK["synth_seed"])
        ds = load_dataset(root)

    arch = ArchConfig("full", DESK["classes"], ds.channels, DESK["size"], DESK["depth_divisor"], seed=DESK["seed"])
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch=DESK["batch"], seed=DESK["seed"])
    plans = {"sd": SplitPlan("SD", seed=DESK["seed"]), "si": SplitPlan("SI", ("A",), DESK["seed"])}
    for name in ("sd", "si") if args.protocol == "both" else (args.protocol,):
        g, history, metrics, test_ds, seconds = run_protocol(ds, plans[name], cfg, arch)
        save_checkpoint(g, args.out / f"{name}.fith")
        (args.out / f"{name}.csv").write_text(history.to_csv())
        print(f"[{name}] {seconds:.1f}s  train acc {history.epochs[-1].accuracy:.4f}  "
              f"test subjects {test_ds.subjects()}")
        print(metrics.table(ds.classes))


if __name__ == "__main__":
    main()
