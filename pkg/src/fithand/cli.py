"""``fithand`` command line.

Settings resolve as built-in defaults < ``--config`` file < flags. Exit
codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


from .errors import FitHandError

log = logging.getLogger("fithand")

DEFAULTS = {
    "variant": "full",
    "split": "sd",
    "train_subjects": "",
    "classes": None,
    "channels": None,
    "input_size": 256,
    "depth_scale": 1,
    "lr": 1e-4,
    "momentum": 0.0,
    "epochs": 30,
    "batch": 16,
    "loss": None,
    "seed": 0,
    "per_class": 50,
}

CASTS = {
    "classes": int, "channels": int, "input_size": int, "depth_scale": int, "epochs": int,
    "batch": int, "seed": int, "per_class": int, "lr": float, "momentum": float,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    settings = dict(DEFAULTS)
    sources = {k: "default" for k in settings}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            settings[k], sources[k] = v, "config"
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            settings[k], sources[k] = v, "flag"
    for k, cast in CASTS.items():
        if settings.get(k) is not None:
            try:
                settings[k] = cast(settings[k])
            except ValueError:
                raise UsageError(f"invalid value for {k}: {settings[k]!r}") from None
    if settings["depth_scale"] not in (1, 2, 4, 8):
        raise UsageError(f"--depth-scale must be 1, 2, 4 or 8, got {settings['depth_scale']}")
    if getattr(args, "verbose", False):
        log.info("settings (precedence: default < config < flag):")
        for k in sorted(settings):
            log.info("  %-15s = %-12s [%s]", k, settings[k], sources[k])
    settings["_sources"] = sources
    return settings


def _explicit(settings, key) -> bool:
    return settings["_sources"][key] != "default"


# -- subcommand bodies ------------------------------------------------------


def _arch(settings, classes, channels, variant=None):
    from .network import ArchConfig

    return ArchConfig(
        variant=variant or settings["variant"],
        classes=classes,
        in_channels=channels,
        input_size=settings["input_size"],
        depth_divisor=settings["depth_scale"],
        seed=settings["seed"],
    )


def _split(ds, settings):
    from .data import SplitPlan, split

    mode = settings["split"].lower()
    if mode not in ("sd", "si"):
        raise UsageError(f"--split must be sd or si, got {settings['split']!r}")
    subjects = tuple(s for s in str(settings["train_subjects"]).split(",") if s)
    if mode == "si" and not subjects:
        raise UsageError("--split si requires --train-subjects")
    return split(ds, SplitPlan(mode.upper(), subjects, settings["seed"]))


def cmd_synth(args, settings):
    from .data import synth_dataset

    classes = settings["classes"] or 4
    size = settings["input_size"] if _explicit(settings, "input_size") else 64
    root = synth_dataset(args.out, classes, settings["per_class"], size, settings["seed"])
    print(f"wrote {classes * settings['per_class'] * 2} images to {root}")


def cmd_augment(args, settings):
    from .data import AUGMENT_NAMES, augment, augment_dataset, read_image, write_image

    if args.inp:
        out_dir = Path(args.outdir or args.out or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        src = Path(args.inp)
        img = read_image(src)
        ext = ".pgm" if img.ndim == 2 else ".ppm"
        for name, im in zip(AUGMENT_NAMES, augment(img)):
            write_image(out_dir / f"{src.stem}_{name}{ext}", im)
        print(f"wrote {len(AUGMENT_NAMES)} images to {out_dir}")
    elif args.data:
        out = args.out or args.outdir
        if not out:
            raise UsageError("augment --data requires --out DIR")
        n = augment_dataset(args.data, out)
        print(f"wrote {n} images to {out}")
    else:
        raise UsageError("augment requires --in FILE or --data DIR")


def cmd_train(args, settings):
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .network import build_graph
    from .train import TrainConfig, evaluate, train

    ds = load_dataset(args.data)
    classes = settings["classes"] or ds.num_classes
    channels = settings["channels"] or ds.channels
    if classes != ds.num_classes:
        raise FitHandError(f"--classes {classes} does not match the {ds.num_classes} classes found in {args.data}")
    if channels != ds.channels:
        raise FitHandError(f"--channels {channels} does not match the dataset's {ds.channels}-channel images")
    train_ds, test_ds = _split(ds, settings)
    arch = _arch(settings, classes, channels)
    g = build_graph(arch)
    cfg = TrainConfig(
        lr=settings["lr"],
        epochs=settings["epochs"],
        batch=settings["batch"],
        loss=settings["loss"],
        seed=settings["seed"],
        momentum=settings["momentum"],
        variant=arch.variant,
        depth_divisor=arch.depth_divisor,
        input_size=arch.input_size,
        classes=classes,
        channels=channels,
    )
    g, history = train(g, train_ds, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(g, out)
    log_path = out.with_suffix(".csv")
    log_path.write_text(history.to_csv())
    print(f"checkpoint: {out}\nlog: {log_path}")
    if len(test_ds):
        m = evaluate(g, test_ds)
        print(f"test ({settings['split']}, {len(test_ds)} samples)")
        print(m.table(ds.classes))
        print(m.key_values())


def cmd_eval(args, settings):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .train import evaluate

    g = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if _explicit(settings, "split"):
        _, ds = _split(ds, settings)
    m = evaluate(g, ds)
    print(m.table(ds.classes))
    print(m.key_values())


def cmd_audit(args, settings):
    from .network import FC_CAVEAT, audit_parameters, build_graph, format_variant_table, variant_comparison

    arch = _arch(settings, settings["classes"] or 10, settings["channels"] or 3)
    g = build_graph(arch)
    a = audit_parameters(g)
    print(f"variant={arch.variant} classes={arch.classes} channels={arch.in_channels} "
          f"input={arch.input_size} depth_divisor={arch.depth_divisor}")
    print(a.table())
    print(a.key_values())
    print()
    print(format_variant_table(variant_comparison(arch)))
    print(FC_CAVEAT)


def cmd_gradcheck(args, settings):
    from .gradcheck import standard_checks

    threshold = 1e-4
    rows = standard_checks(settings["seed"])
    width = max(len(r[0]) for r in rows)
    failed = 0
    for name, err in rows:
        ok = err < threshold
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"worst={max(r[1] for r in rows):.3e} threshold={threshold:g}")
    if failed:
        raise FitHandError(f"{failed} gradient check(s) exceeded {threshold:g}")


def cmd_dump(args, settings):
    from .checkpoint import load_checkpoint
    from .data import read_image, resize_and_normalize
    from .network import build_graph, dump_mean_activations
    from .tensor import Tensor

    img = read_image(args.inp)
    channels = 1 if img.ndim == 2 else 3
    if args.checkpoint:
        g = load_checkpoint(args.checkpoint)
    else:
        g = build_graph(_arch(settings, settings["classes"] or 10, settings["channels"] or channels))
    if g.config.in_channels != channels:
        raise FitHandError(f"image has {channels} channel(s), network expects {g.config.in_channels}")
    x = Tensor(resize_and_normalize(img, g.config.input_size)[None])
    for p in dump_mean_activations(g, x, args.out):
        print(p)


# -- parser -------------------------------------------------------------------


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fithand", description="Fit-Hand compact gesture CNN toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p, arch=True):
        _add(p, "--config", metavar="FILE", help="key=value defaults file")
        _add(p, "--seed", metavar="N", help="random seed (default 0)")
        p.add_argument("--verbose", action="store_true", help="log settings and progress")
        if arch:
            _add(p, "--variant", metavar="NAME", help="full, WImp, WDil, WL, Stack2, Stack4, Kul, Cat, CatSig, Avg, DpMed")
            _add(p, "--classes", metavar="N", help="number of classes")
            _add(p, "--channels", metavar="1|3", help="input channels")
            _add(p, "--input-size", metavar="N", help="square input side (default 256)")
            _add(p, "--depth-scale", metavar="1|2|4|8", help="divisor applied to channel depths")

    p = sub.add_parser("synth", help="write a synthetic gesture dataset")
    common(p, arch=False)
    _add(p, "--out", metavar="DIR", required=True, help="output root")
    _add(p, "--classes", metavar="N", help="number of classes (default 4)")
    _add(p, "--per-class", metavar="N", help="images per class per subject (default 50)")
    _add(p, "--input-size", metavar="N", help="image side (default 64)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="write the 10 offline augmentations")
    common(p, arch=False)
    _add(p, "--in", dest="inp", metavar="FILE", help="single image to augment")
    _add(p, "--outdir", metavar="DIR", help="output directory for --in")
    _add(p, "--data", metavar="DIR", help="augment a whole dataset tree")
    _add(p, "--out", metavar="DIR", help="output root for --data")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train and write checkpoint + CSV log")
    common(p)
    _add(p, "--data", metavar="DIR", required=True, help="dataset root")
    _add(p, "--out", metavar="PATH", required=True, help="checkpoint path (log goes to PATH.csv)")
    _add(p, "--split", metavar="sd|si", help="evaluation protocol (default sd)")
    _add(p, "--train-subjects", metavar="S1,S2", help="training subjects for --split si")
    _add(p, "--lr", metavar="F", help="learning rate (default 1e-4)")
    _add(p, "--momentum", metavar="F", help="SGD momentum (default 0)")
    _add(p, "--epochs", metavar="N", help="epochs (default 30)")
    _add(p, "--batch", metavar="N", help="batch size (default 16)")
    _add(p, "--loss", metavar="ce|kl", choices=("ce", "kl"), help="loss (default follows variant)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, arch=False)
    _add(p, "--checkpoint", metavar="PATH", required=True, help="checkpoint file")
    _add(p, "--data", metavar="DIR", required=True, help="dataset root")
    _add(p, "--split", metavar="sd|si", help="evaluate only the test side of this split")
    _add(p, "--train-subjects", metavar="S1,S2", help="training subjects for --split si")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter audit and variant comparison")
    common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and the network")
    common(p, arch=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-activations", help="write per-stage mean activation maps as PGM")
    common(p)
    _add(p, "--in", dest="inp", metavar="FILE", required=True, help="input image")
    _add(p, "--out", metavar="DIR", required=True, help="output directory")
    _add(p, "--checkpoint", metavar="PATH", help="trained checkpoint (default: fresh weights)")
    p.set_defaults(func=cmd_dump)
    return parser


def _limit_threads() -> None:
    n = os.environ.get("FITHAND_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(int(n))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(message)s",
            stream=sys.stderr,
        )
        settings = resolve_settings(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _limit_threads()
    try:
        args.func(args, settings)
    except UsageError as exc:
        print(f"fithand {args.command}: {exc}", file=sys.stderr)
        return 1
    except (FitHandError, OSError) as exc:
        print(f"fithand {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
