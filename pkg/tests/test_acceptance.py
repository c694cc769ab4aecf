"""Acceptance gate: one PASS/FAIL line per criterion, printed in the pytest summary."""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from fithand.attention import ScaleTriple, fuse_values, midrange
from fithand.checkpoint import decode_checkpoint, encode_checkpoint, graph_from_checkpoint
from fithand.cli import main
from fithand.data import (
    SplitPlan,
    augment,
    flip_horizontal,
    histogram_equalize,
    load_dataset,
    split,
    synth_dataset,
)
from fithand.errors import ChecksumError
from fithand.gradcheck import standard_checks
from fithand.network import FC_CAVEAT, ArchConfig, audit_parameters, build_fithand, build_graph, effective_kernel
from fithand.ops import lrn
from fithand.tensor import Tensor
from fithand.train import TrainConfig, evaluate, train

DESK = dict(classes=4, per_class=50, size=64, synth_seed=7, depth_divisor=4, lr=0.5, epochs=30, batch=16, seed=0)


def report(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


def closed_form(s):
    lo, mid, hi = np.sort(s, axis=0)
    return np.maximum(mid, lo + hi - mid)


def random_triples(n, seed):
    r = np.random.default_rng(seed)
    t = r.normal(scale=r.choice([1e-3, 1.0, 10.0], size=n), size=(3, n))
    # a fifth of the triples carry ties
    tied = r.random(n) < 0.2
    t[1, tied] = t[0, tied]
    return t


# -- 1, 2: attention block ------------------------------------------------


def test_c01_attention_oracle():
    t = random_triples(100_000, 0)
    start = time.perf_counter()
    got = fuse_values(ScaleTriple.of(*t))
    want = closed_form(t)
    seconds = time.perf_counter() - start
    worst = float(np.max(np.abs(got - want)))
    report(1, "attention oracle equivalence", worst <= 1e-12 and seconds < 5.0,
           f"1e5 triples, max |diff| {worst:.1e} (<= 1e-12), {seconds:.2f}s (< 5s)")


def test_c02_attention_algebra():
    t = random_triples(10_000, 1)
    d = fuse_values(ScaleTriple.of(*t))
    perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    perm_ok = all(np.array_equal(fuse_values(ScaleTriple.of(*t[list(p)])), d) for p in perms)
    bound_ok = bool(np.all((t.min(axis=0) <= d) & (d <= t.max(axis=0))))
    phi_ok = bool(np.all(d >= midrange(ScaleTriple.of(*t))))
    # power-of-two scales are exact in binary floating point
    homog_ok = all(np.array_equal(fuse_values(ScaleTriple.of(*(s * t))), s * d) for s in (0.25, 0.5, 2.0, 8.0))
    report(2, "attention algebraic suite", perm_ok and bound_ok and phi_ok and homog_ok,
           f"1e4 triples; permutation={perm_ok} bounds={bound_ok} delta>=phi={phi_ok} homogeneity={homog_ok}")


# -- 3: gradient checks ---------------------------------------------------


def test_c03_gradient_checks():
    start = time.perf_counter()
    rows = standard_checks(seed=0)
    seconds = time.perf_counter() - start
    name, worst = max(rows, key=lambda r: r[1])
    has_net = any(n.startswith("network") for n, _ in rows)
    report(3, "gradient checks", worst < 1e-4 and seconds < 60 and has_net,
           f"{len(rows)} checks incl. depth-1/8 16x16 network, worst {worst:.2e} ({name}) < 1e-4, {seconds:.1f}s (< 60s)")


# -- 4, 5: architecture audit ---------------------------------------------


def test_c04_effective_kernel():
    got = [effective_kernel(3, 2), effective_kernel(3, 1), effective_kernel(7, 2)]
    report(4, "dilated effective kernel", got == [5, 3, 13], f"(3,2),(3,1),(7,2) -> {got}")


def hand_rows(classes=10, cin=3, size=256):
    def conv(i, o, k):
        return k * k * i * o + o

    rows = {"stem1": conv(cin, 32, 3), "stem2": conv(32, 32, 3)}
    prev = 32
    for i, d in enumerate((32, 64, 96), start=1):
        rows[f"stage{i}.finefeat"] = conv(prev, d, 3) + conv(prev, d, 5) + conv(prev, d, 7)
        rows[f"stage{i}.dil"] = conv(prev, d, 3)
        prev = d
    rows["final_conv"] = conv(prev, 128, 3)
    rows["fc"] = (size // 8) ** 2 * 128 * classes + classes
    return rows


def test_c05_parameter_audit(capsys):
    audit = audit_parameters(build_fithand(10, 3))
    rows_ok = {n: c for n, _, c in audit.rows} == hand_rows()
    window_ok = 1.2e6 <= audit.total <= 2.4e6
    code = main(["audit", "--variant", "full", "--classes", "10", "--channels", "3"])
    out = capsys.readouterr().out
    caveat_ok = code == 0 and FC_CAVEAT in out
    totals = {}
    for line in out.splitlines():
        parts = line.split()
        if len(parts) == 5 and parts[0] in ("WImp", "Stack2", "WDil", "full", "Stack4"):
            totals[parts[0]] = int(parts[1].replace(",", ""))
    order_ok = totals["WImp"] < totals["Stack2"] < totals["WDil"] < totals["full"] < totals["Stack4"]
    report(5, "parameter audit", rows_ok and window_ok and caveat_ok and order_ok,
           f"per-layer == closed form: {rows_ok}; total {audit.total:,} in [1.2M, 2.4M]; caveat printed: {caveat_ok}; "
           + " < ".join(f"{k} {v / 1e6:.2f}M" for k, v in sorted(totals.items(), key=lambda kv: kv[1])))


# -- 6: augmentation ------------------------------------------------------


def test_c06_augmentation():
    r = np.random.default_rng(6)
    inputs = [r.integers(0, 256, shape, dtype=np.uint8) for shape in [(7, 9), (32, 32), (20, 15, 3), (1, 1)]]
    counts_ok = all(len(augment(im)) == 10 for im in inputs)
    orig_ok = all(np.array_equal(augment(im)[0], im) for im in inputs)
    flip_ok = all(np.array_equal(flip_horizontal(flip_horizontal(im)), im) for im in inputs)
    eq_ok = (
        np.array_equal(histogram_equalize(np.array([[10, 10], [20, 20]], np.uint8)), [[0, 0], [255, 255]])
        and np.array_equal(histogram_equalize(np.array([[0, 0], [0, 255]], np.uint8)), [[0, 0], [0, 255]])
        and np.array_equal(histogram_equalize(np.full((3, 3), 9, np.uint8)), np.full((3, 3), 9))
    )
    report(6, "augmentation", counts_ok and orig_ok and flip_ok and eq_ok,
           f"10 outputs each: {counts_ok}; original bit-exact: {orig_ok}; double flip: {flip_ok}; histeq examples: {eq_ok}")


# -- 7, 8, 9: training, SI protocol, checkpoint ----------------------------


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "synth"
    synth_dataset(root, DESK["classes"], DESK["per_class"], DESK["size"], DESK["synth_seed"])
    return load_dataset(root)


def desk_arch(ds):
    return ArchConfig("full", DESK["classes"], ds.channels, DESK["size"], DESK["depth_divisor"], seed=DESK["seed"])


def desk_train(ds, epochs=DESK["epochs"]):
    cfg = TrainConfig(lr=DESK["lr"], epochs=epochs, batch=DESK["batch"], seed=DESK["seed"])
    start = time.perf_counter()
    g, history = train(build_graph(desk_arch(ds)), ds, cfg)
    return g, history, time.perf_counter() - start


@pytest.fixture(scope="module")
def sd_run(desk_data):
    train_ds, test_ds = split(desk_data, SplitPlan("SD", seed=DESK["seed"]))
    g, history, seconds = desk_train(train_ds)
    return g, history, seconds, train_ds, test_ds


@pytest.mark.slow
def test_c07_desk_training(sd_run):
    g, history, seconds, train_ds, test_ds = sd_run
    train_acc = evaluate(g, train_ds).accuracy
    test_acc = evaluate(g, test_ds).accuracy
    _, rerun, _ = desk_train(train_ds)
    same_log = rerun.to_csv() == history.to_csv()
    ok = train_acc >= 0.95 and test_acc >= 0.80 and seconds < 600 and same_log and len(history.epochs) == 30
    report(7, "desk-scale training", ok,
           f"4 classes, 400 images 64x64, depth 1/4, 30 epochs in {seconds:.0f}s (< 600s); train acc {train_acc:.4f} "
           f"(>= 0.95), SD test acc {test_acc:.4f} (>= 0.80); rerun log byte-identical: {same_log}")


@pytest.mark.slow
def test_c08_subject_independent(desk_data):
    train_ds, test_ds = split(desk_data, SplitPlan("SI", ("A",), DESK["seed"]))
    disjoint = set(train_ds.subjects()) == {"A"} and set(test_ds.subjects()) == {"B"}
    g, _, _ = desk_train(train_ds, epochs=5)
    m = evaluate(g, test_ds)
    n_b = sum(s.subject == "B" for s in desk_data.samples)
    counted_ok = int(m.confusion.sum()) == n_b == len(test_ds)
    report(8, "SI protocol", disjoint and counted_ok,
           f"train subjects {train_ds.subjects()}, test subjects {test_ds.subjects()}; metrics over {int(m.confusion.sum())} "
           f"samples == {n_b} subject-B samples; test acc {m.accuracy:.4f} after 5 epochs")


@pytest.mark.slow
def test_c09_serialization(sd_run):
    g, _, _, _, test_ds = sd_run
    buf = encode_checkpoint(g)
    g2 = graph_from_checkpoint(*decode_checkpoint(buf))
    bytes_ok = encode_checkpoint(g2) == buf
    a, b = evaluate(g, test_ds), evaluate(g2, test_ds)
    eval_ok = np.array_equal(a.confusion, b.confusion) and a.accuracy == b.accuracy and a.macro_f1 == b.macro_f1
    r = np.random.default_rng(9)
    cfg_len = int.from_bytes(buf[8:12], "little")
    detected = 0
    trials = r.choice(np.arange(12 + cfg_len, len(buf) - 4), 50, replace=False)
    for pos in trials:
        bad = bytearray(buf)
        bad[pos] ^= 1 << int(r.integers(0, 8))
        try:
            decode_checkpoint(bytes(bad))
        except ChecksumError:
            detected += 1
    report(9, "checkpoint serialization", bytes_ok and eval_ok and detected == len(trials),
           f"round trip byte-identical: {bytes_ok}; evaluate equal: {eval_ok}; "
           f"single-bit payload corruptions caught by CRC: {detected}/{len(trials)}")


# -- 10: LRN --------------------------------------------------------------


def test_c10_lrn_spot_check():
    x = np.zeros((1, 5, 1, 1))
    x[0, 2] = 1.0
    got = float(lrn(Tensor(x), k=2.0, n=5, alpha=1e-4, beta=0.75).data[0, 2, 0, 0])
    oracle = 1.0 / (2.0 + 1e-4 * 1.0**2) ** 0.75
    ok = abs(got - 0.59459) <= 1e-5 and abs(got - oracle) <= 1e-12
    report(10, "LRN spot check", ok, f"single active channel -> {got:.7f} (0.59459 +- 1e-5; direct formula {oracle:.7f})")
