"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criterion 7 runs the default benchmark end to end (three seeds, four modes)
and takes roughly a quarter of an hour on one core.
"""

import csv
import hashlib
import io
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from lfc import cli
from lfc.adaptation import AdaptConfig, adapt, branch_hash, ema_update
from lfc.curriculum import alpha, batch_weights, expected_weight_sum, kl_divergence
from lfc.metrics import asd, dice
from lfc.core import Parameter, Tensor, conv2d
from lfc.model import SegNetConfig, build
from lfc.synth import Dataset
from lfc.transforms import TransformOp, apply, invert, sample_transform
from oracles import asd_all_pairs, conv2d_loops, dice_sets
from test_core import LAYER_KINDS, gradcheck_layer
import test_metrics


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree(root):
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def mean_dice(path):
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return float(np.mean([float(r["mean"]) for r in rows if r["metric"] == "dice"]))


@contextmanager
def cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield path
    finally:
        os.chdir(old)


def test_criterion_1_numerical_core(verdict):
    t0 = time.perf_counter()
    worst = {k: max(gradcheck_layer(k, 5000 + s) for s in range(20)) for k in LAYER_KINDS}
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(20):
        k, stride, pad = int(rng.choice([1, 2, 3])), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.integers(-5, 6, size=(2, 3, 6, 6)).astype(float)
        w = rng.integers(-3, 4, size=(4, 3, k, k)).astype(float)
        b = rng.integers(-2, 3, size=4).astype(float)
        got = conv2d(Tensor(x), Parameter(w), Parameter(b), stride, pad).data
        exact &= np.array_equal(got, conv2d_loops(x, w, b, stride, pad))
    elapsed = time.perf_counter() - t0
    worst_err = max(worst.values())
    ok = worst_err < 1e-4 and exact and elapsed < 30
    verdict(1, ok, f"max rel err {worst_err:.2e} over {len(LAYER_KINDS)} layers x 20 configs; conv exact={exact}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_curriculum_algebra(verdict):
    rng = np.random.default_rng(2)
    max_dev, anti = 0.0, True
    for _ in range(1000):
        B = int(rng.choice([1, 2, 4, 8]))
        d = rng.exponential(size=B) * rng.uniform(0.01, 5)
        a = rng.uniform(0, 1)
        w = batch_weights(d, a, 1.5)
        max_dev = max(max_dev, abs(w.sum() - expected_weight_sum(B, a, 1.5)))
        # strictly larger weight for strictly smaller difficulty
        for i in range(B):
            for j in range(B):
                if d[i] < d[j]:
                    anti &= w[i] > w[j]
    a0, a5 = alpha(0, 5), alpha(5, 5)
    ok = max_dev <= 1e-12 and anti and a0 == 0.5 and abs(a5 - (1 - 1 / (1 + math.exp(-1)))) <= 1e-12
    verdict(2, ok, f"max |sum w - identity| {max_dev:.1e}; anti-monotone={anti}; alpha(0)={a0}; alpha(5)={a5:.12f}")
    assert ok


def test_criterion_3_kl_properties(verdict):
    rng = np.random.default_rng(3)
    min_d, max_self = math.inf, 0.0
    for _ in range(1000):
        c, h, w = int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        z1, z2 = rng.normal(size=(2, c, h, w)) * rng.uniform(0.1, 5)
        p, q = np.exp(z1) / np.exp(z1).sum(0), np.exp(z2) / np.exp(z2).sum(0)
        min_d = min(min_d, kl_divergence(p, q))
        max_self = max(max_self, kl_divergence(p, p))
    closed = kl_divergence(np.array([0.5, 0.5]).reshape(2, 1, 1), np.array([0.25, 0.75]).reshape(2, 1, 1))
    ok = min_d >= 0 and max_self <= 1e-12 and abs(closed - 0.14384) <= 1e-5
    verdict(3, ok, f"min KL {min_d:.2e}; max KL(p,p) {max_self:.1e}; closed form {closed:.6f}")
    assert ok


def test_criterion_4_ema_and_frozen_branches(verdict):
    cfg = SegNetConfig(base_width=4, depth=2)
    t, m = build(cfg, 1), build(cfg, 2, role="momentum")
    init = {k: v.copy() for k, v in m.state_arrays().items()}
    for _ in range(100):
        ema_update(m, t, 0.99)
    decay = 0.99 ** 100
    ema_dev = max(float(np.max(np.abs(v - (decay * init[k] + (1 - decay) * tv))))
                  for (k, v), tv in zip(m.state_arrays().items(), t.state_arrays().values()))

    f_s = build(cfg, 3)
    f_s.role, f_s.trainable = "source", False
    before = branch_hash(f_s)
    rng = np.random.default_rng(4)
    data = Dataset(np.arange(6), rng.random((6, 1, 16, 16)))
    clean = []

    def check(rec, f_t, f_m):
        clean.append(all(not p.grad.any() for p in f_s.parameters + f_m.parameters))

    res = adapt(f_s, data, AdaptConfig(seed=0), on_step=check)
    steps_ok = len(clean) == 10 * 3 and all(clean)
    ok = ema_dev <= 1e-10 and steps_ok and branch_hash(f_s) == before and res.y_src_hash[0] == res.y_src_hash[1]
    verdict(4, ok, f"EMA max dev {ema_dev:.1e}; grads zero on f_s/f_m at all {len(clean)} steps={steps_ok}; "
                   f"f_s hash unchanged={branch_hash(f_s) == before}")
    assert ok


def test_criterion_5_transform_contract(verdict):
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(1000):
        h, w = (int(v) * 8 for v in rng.integers(1, 9, size=2))
        T = sample_transform(rng, h, w, 8)
        x = rng.normal(size=(1, int(rng.integers(1, 4)), h, w))
        back, mask = invert(T, apply(T, x))
        valid = np.broadcast_to(mask, x.shape).astype(bool)
        exact &= np.array_equal(back[valid], x[valid])
    x = rng.normal(size=(2, 3, 16, 24))
    flips = all(np.array_equal(apply(TransformOp(k, 16, 24), apply(TransformOp(k, 16, 24), x)), x)
                for k in ("hflip", "vflip"))
    ok = exact and flips
    verdict(5, ok, f"1000 round trips exact={exact}; flip involution exact={flips}")
    assert ok


def test_criterion_6_metric_oracles(verdict):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(200):
        p = (rng.random((16, 16)) < rng.uniform(0.05, 0.9)).astype(int) * int(rng.integers(1, 3))
        g = (rng.random((16, 16)) < rng.uniform(0.05, 0.9)).astype(int) * int(rng.integers(1, 3))
        for c in (1, 2):
            mismatches += dice(p, g, c) != dice_sets(p, g, c)
            mismatches += asd(p, g, c) != asd_all_pairs(p, g, c)
    examples = True
    try:
        test_metrics.test_dice_examples()
        test_metrics.test_asd_examples()
        test_metrics.test_report_population_std()
    except AssertionError:
        examples = False
    ok = mismatches == 0 and examples
    verdict(6, ok, f"{mismatches} oracle mismatches over 200 pairs x 2 classes; closed-form examples hold={examples}")
    assert ok


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline_a")
    t0 = time.perf_counter()
    with cwd(root):
        assert cli.main(["gen-data", "--out", "data", "--seed", "0"]) == 0
        assert cli.main(["train-source", "--data", "data", "--out", "src"]) == 0
        assert cli.main(["ablate-suite", "--data", "data", "--source-model", "src/source.ckpt", "--seeds", "3",
                         "--out", "suite"]) == 0
        assert cli.main(["evaluate", "--model", "suite/full/seed_0/target.ckpt", "--data", "data",
                         "--out", "eval.csv"]) == 0
    return root, time.perf_counter() - t0


def test_criterion_7_end_to_end(pipeline, verdict):
    root, elapsed = pipeline
    src_val = mean_dice(root / "src" / "metrics_source_val.csv")
    src_tgt = mean_dice(root / "src" / "metrics_target_test.csv")
    runs = list(csv.DictReader(io.StringIO((root / "suite" / "ablation_runs.csv").read_text())))
    by_mode = {}
    for r in runs:
        by_mode.setdefault(r["mode"], []).append(float(r["mean_dice"]))
    mean = {k: float(np.mean(v)) for k, v in by_mode.items()}
    gap = src_val - src_tgt
    gain = mean["full"] - mean["no_adaptation"]
    a, b = gap >= 0.10, gain >= 0.05
    c = mean["full"] >= mean["no_easy2hard"] and mean["full"] >= mean["no_src2tgt"]
    fast = elapsed < 30 * 60
    ok = a and b and c and fast
    modes = ", ".join(f"{k} {100 * v:.2f}" for k, v in mean.items())
    verdict(7, ok, f"(a) gap {100 * gap:.2f} pts [{'ok' if a else 'fail'}]; (b) gain {100 * gain:.2f} pts "
                   f"[{'ok' if b else 'fail'}]; (c) {'ok' if c else 'fail'}; 3-seed mean Dice: {modes}; "
                   f"{elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_reproducibility(pipeline, tmp_path_factory, verdict):
    first, _ = pipeline
    second = tmp_path_factory.mktemp("pipeline_b")
    with cwd(second):
        assert cli.main(["gen-data", "--out", "data", "--seed", "0"]) == 0
        assert cli.main(["train-source", "--data", "data", "--out", "src"]) == 0
        assert cli.main(["adapt", "--source-model", "src/source.ckpt", "--data", "data", "--out",
                         "suite/full/seed_0"]) == 0
        assert cli.main(["evaluate", "--model", "suite/full/seed_0/target.ckpt", "--data", "data",
                         "--out", "eval.csv"]) == 0
    compared, differing = 0, []
    for sub in ("data", "src", "suite/full/seed_0"):
        a, b = tree(first / sub), tree(second / sub)
        compared += len(a)
        differing += [f"{sub}/{k}" for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
    same_eval = digest(first / "eval.csv") == digest(second / "eval.csv")
    ok = not differing and same_eval and compared > 0
    verdict(8, ok, f"{compared + 1} files compared (checkpoints, CSVs, data); differing: {differing[:3] or 'none'}")
    assert ok
