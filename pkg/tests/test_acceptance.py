"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The ablation test
trains twelve toy models and takes several minutes.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from pam import accounting, checks
from pam import tensor as T
from pam.backbone import BackboneConfig, PamOptions, build_model, forward_extract, parse_placement
from pam.blocks import CAM, PAM, soft_gate, soft_gates
from pam.harness.ablation import ordering_holds, run_ablation
from pam.harness.data import generate_dataset
from pam.harness.evaluate import make_pairs
from pam.harness.train import TrainConfig, train
from pam.tensor import ConvSpec, Tensor

ABLATION_SEEDS = (0, 1, 2, 3)
GRAD_SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def _report(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return _report


def test_parameter_tables(report):
    t0 = time.perf_counter()
    rows = accounting.check_published()
    elapsed = time.perf_counter() - t0
    wrong = [(n, e, c) for n, e, c in rows if e != c]
    detail = ", ".join(f"{n}={c:,}" for n, _, c in rows) + f" ({elapsed:.3f}s)"
    report("parameter tables", len(rows) == 8 and not wrong and elapsed < 1.0, detail)


def test_mac_ratio(report):
    t0 = time.perf_counter()
    ratios = {}
    for c in (64, 128, 256, 512):
        dw = accounting.count_macs(ConvSpec(c, c, 3, padding=1, groups=c), 28, 28)
        full = accounting.count_macs(ConvSpec(c, c, 3, padding=1), 28, 28)
        ratios[c] = Fraction(dw, full)
    elapsed = time.perf_counter() - t0
    ok = all(r == Fraction(1, c) for c, r in ratios.items()) and elapsed < 1.0
    report("MAC ratio", ok, ", ".join(f"C={c}: {r}" for c, r in ratios.items()) + f" ({elapsed:.3f}s)")


def test_gate_analytics(report):
    t0 = time.perf_counter()
    grid = np.arange(901) * 0.1
    pos, neg = soft_gates(grid), soft_gates(-grid)
    e45 = abs(soft_gate(45.0) - 0.5)
    e90 = abs(soft_gate(90.0) - 1.0 / (1.0 + math.exp(-10.0)))
    even = bool(np.array_equal(pos, neg))
    mono = bool(np.all(np.diff(pos) > 0))
    elapsed = time.perf_counter() - t0
    ok = e45 <= 1e-12 and e90 <= 1e-12 and even and mono and elapsed < 1.0
    report("gate analytics", ok,
           f"|S(45)-0.5|={e45:.1e} |S(90)-ref|={e90:.1e} even={even} increasing={mono} ({elapsed:.3f}s)")


def test_gradient_suite(report):
    t0 = time.perf_counter()
    results = checks.run("all", GRAD_SEEDS)
    elapsed = time.perf_counter() - t0
    worst = {name: max(g.values()) for name, g in results.items()}
    top = max(worst, key=worst.get)
    required = {"conv2d", "depthwise", "batch_norm", "prelu", "global_pool", "affine", "drm", "cam-cbam",
                "cam-cbam-identity", "cam-se", "cam-se-identity", "pam", "dream", "margin_loss"}
    ok = required <= set(results) and worst[top] <= checks.TOLERANCE and elapsed < 300
    report("gradient suite", ok, f"{len(results)} checks x {len(GRAD_SEEDS)} seeds, "
           f"max rel err {worst[top]:.2e} ({top}) ({elapsed:.1f}s)")


def test_depthwise_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n_shapes = 0.0, 120
    for _ in range(n_shapes):
        c, k = int(rng.integers(1, 9)), int(rng.choice([1, 3, 5]))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h, w = int(rng.integers(k, 12)), int(rng.integers(k, 12))
        x = Tensor(rng.normal(size=(int(rng.integers(1, 4)), c, h, w)))
        wd = rng.normal(size=(c, 1, k, k))
        dense = np.zeros((c, c, k, k))
        dense[np.arange(c), np.arange(c)] = wd[:, 0]
        a = T.conv2d(x, Tensor(wd), None, ConvSpec(c, c, k, s, p, groups=c)).data
        b = T.conv2d(x, Tensor(dense), None, ConvSpec(c, c, k, s, p)).data
        worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    report("depthwise oracle", worst <= 1e-10 and elapsed < 60,
           f"{n_shapes} shapes, max abs diff {worst:.1e} ({elapsed:.2f}s)")


def test_structural_identities(report):
    rng = np.random.default_rng(5)
    pam = PAM(32, rng)
    for name, p in pam.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
    x = Tensor(rng.normal(size=(4, 32, 6, 6)))
    zero_gate = bool(np.array_equal(pam(x, np.zeros(4)).data, pam.cam(x).data))

    cfg = BackboneConfig.toy()
    soft = build_model(cfg, parse_placement("PAM12"), 3)
    fixed = build_model(cfg, parse_placement("PAM12"), 3, PamOptions(gate="one"))
    for m in (soft, fixed):
        for s in (1, 2):
            m.pam(s).drm.bn2.gamma.data[...] = 0.7
    imgs, yaws = rng.normal(size=(4, 3, 32, 32)), rng.uniform(-90, 90, size=4)
    one_gate = bool(np.array_equal(forward_extract(soft, imgs, yaws, gates=np.ones(4)).data,
                                   forward_extract(fixed, imgs, yaws).data))

    bounded = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        cam = CAM(16, r, variant=("cbam", "se")[seed % 2])
        xi = r.normal(scale=4.0, size=(3, 16, 5, 5))
        bounded &= bool(np.all(np.abs(cam(Tensor(xi)).data) <= np.abs(xi)))
    report("structural identities", zero_gate and one_gate and bounded,
           f"gate 0 -> CAM: {zero_gate}; gate 1 -> fixed-gate model: {one_gate}; |CAM(x)| <= |x|: {bounded}")


@pytest.mark.slow
def test_gate_ablation_ordering(report):
    t0 = time.perf_counter()
    res = run_ablation(ABLATION_SEEDS)
    elapsed = time.perf_counter() - t0
    ok, text = ordering_holds(res)
    per_run = elapsed / (len(ABLATION_SEEDS) * 3)
    report("gate ablation", ok and per_run < 600,
           f"{len(ABLATION_SEEDS)} seeds: {text} ({per_run:.0f}s per run)")


def test_determinism(report, tmp_path):
    def once(name):
        ds = generate_dataset(7, 20, 50, "frontal-skewed")
        ev = generate_dataset(8, 6, 5, "uniform")
        model = build_model(BackboneConfig.toy(), parse_placement("PAM12"), 7, dtype=np.float32)
        params = b"".join(p.data.tobytes() for p in model.parameters())
        train(model, ds.subset(np.arange(0, 1000, 4)), TrainConfig(epochs=2, seed=7), ev, make_pairs(ev, 7),
              out_dir=tmp_path / name)
        out = tmp_path / name
        return (ds.images.tobytes() + ds.yaws.tobytes(), params, (out / "checkpoint.npz").read_bytes(),
                (out / "metrics.csv").read_bytes())

    a, b = once("a"), once("b")
    same = [x == y for x, y in zip(a, b)]
    report("determinism", all(same), f"datasets {same[0]}, initial parameters {same[1]}, "
           f"trained checkpoint {same[2]}, metrics CSV {same[3]}")
