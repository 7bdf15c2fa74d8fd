import math

import numpy as np
import pytest

from lfc.adaptation import (
    AdaptConfig,
    LossBreakdown,
    ablate,
    adapt,
    array_hash,
    branch_hash,
    ema_update,
    pseudo_label_momentum,
    pseudo_label_source,
    total_loss,
)
from lfc.core import Tensor, cross_entropy_soft, softmax_channels
from lfc.errors import ConfigurationError, DegenerateInputError, DivergenceError
from lfc.model import SegNetConfig, adabn_init, build, forward, to_bytes
from lfc.synth import Dataset
from lfc.transforms import TransformOp

SMALL = SegNetConfig(base_width=4, depth=2)


def make_source(seed=0):
    m = build(SMALL, seed)
    m.role = "source"
    m.trainable = False
    return m


def make_data(n=5, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return Dataset(ids=np.arange(n) + 100, images=rng.random((n, 1, size, size)))


FAST = dict(epochs=2, batch_size=2, adabn_batch_size=4)


@pytest.fixture(scope="module")
def run():
    f_s = make_source()
    before = branch_hash(f_s)
    seen = []

    def check(rec, f_t, f_m):
        grads = [p.grad for p in f_s.parameters + f_m.parameters]
        seen.append(all(not g.any() for g in grads))

    res = adapt(f_s, make_data(), AdaptConfig(seed=3, **FAST), on_step=check)
    return f_s, before, res, seen


# ---------------------------------------------------------------- EMA


def test_ema_endpoints():
    t, m = build(SMALL, 1), build(SMALL, 2, role="momentum")
    keep = to_bytes(m)
    ema_update(m, t, 1.0)
    assert to_bytes(m) == keep
    ema_update(m, t, 0.0)
    for a, b in zip(m.state_arrays().values(), t.state_arrays().values()):
        np.testing.assert_array_equal(a, b)


def test_ema_geometric_series():
    t, m = build(SMALL, 1), build(SMALL, 2, role="momentum")
    init = {k: v.copy() for k, v in m.state_arrays().items()}
    tau = 0.99
    for _ in range(100):
        ema_update(m, t, tau)
    decay = tau ** 100
    for (k, v), tv in zip(m.state_arrays().items(), t.state_arrays().values()):
        np.testing.assert_allclose(v, decay * init[k] + (1 - decay) * tv, rtol=0, atol=1e-10)


def test_ema_scalar_view():
    t, m = build(SMALL, 1), build(SMALL, 2, role="momentum")
    for arr in t.state_arrays().values():
        arr[...] = 1.0
    for arr in m.state_arrays().values():
        arr[...] = 0.0
    for k in range(1, 51):
        ema_update(m, t, 0.99)
        assert abs(m.params["head.bias"].data[0] - (1 - 0.99 ** k)) <= 1e-12


def test_ema_architecture_mismatch():
    with pytest.raises(ConfigurationError):
        ema_update(build(SMALL, 0), build(SegNetConfig(base_width=2, depth=2), 0), 0.9)


# ---------------------------------------------------------------- pseudo labels


def test_source_labels_one_hot_and_cached_equal():
    f_s, x = make_source(), make_data().images
    y = pseudo_label_source(f_s, x)
    assert set(np.unique(y)) <= {0.0, 1.0}
    np.testing.assert_array_equal(y.sum(axis=1), 1.0)
    np.testing.assert_array_equal(pseudo_label_source(f_s, x), y)


def test_source_label_ties_go_to_lowest_class():
    f_s = make_source()
    f_s.params["head.weight"].data[...] = 0.0
    f_s.params["head.bias"].data[...] = 0.25
    y = pseudo_label_source(f_s, make_data(2).images)
    assert np.all(y[:, 0] == 1.0)


def test_momentum_labels_normalized_on_valid_pixels():
    f_m = build(SMALL, 4, role="momentum")
    x = make_data(1).images
    y, mask = pseudo_label_momentum(f_m, x, TransformOp("crop", 16, 16, 4, 0, 12, 12))
    valid = mask[0, 0].astype(bool)
    np.testing.assert_allclose(y[0].sum(axis=0)[valid], 1.0, atol=1e-12)
    assert valid.sum() == 144


def test_momentum_labels_flip_equivariance():
    f_m = build(SMALL, 5, role="momentum")
    for name, p in f_m.params.items():
        if p.data.ndim == 4 and p.data.shape[-1] == 3:
            p.data[...] = (p.data + p.data[..., ::-1]) / 2
    x = make_data(2).images
    y, mask = pseudo_label_momentum(f_m, x, TransformOp("hflip", 16, 16))
    direct = softmax_channels(forward(f_m, x, "eval")).data
    np.testing.assert_allclose(y, direct, rtol=0, atol=1e-12)
    assert mask.all()


def test_identity_consistency_is_self_entropy():
    f_t = build(SMALL, 6)
    x = make_data(2).images
    f_m = f_t.copy(role="momentum")
    y, mask = pseudo_label_momentum(f_m, x, TransformOp("identity", 16, 16))
    p = softmax_channels(forward(f_t, x, "eval")).data
    l_sl = cross_entropy_soft(Tensor(p), y, mask, per_sample=True).data
    entropy = -(p * np.log(p)).sum(axis=1).mean(axis=(1, 2))
    np.testing.assert_allclose(l_sl, entropy, rtol=1e-12)


def test_momentum_labels_carry_no_graph():
    f_m = build(SMALL, 7, role="momentum")
    y, _ = pseudo_label_momentum(f_m, make_data(1).images, TransformOp("vflip", 16, 16))
    assert isinstance(y, np.ndarray)
    assert all(not p.grad.any() for p in f_m.parameters)


# ---------------------------------------------------------------- loss


def _single_pixel_case():
    # one pixel per sample with C=2: l_fix = (0.2, 0.4), l_sl = (0.6, 0.8)
    q = np.exp([-0.2, -0.4])
    p = np.stack([q, 1 - q], axis=1).reshape(2, 2, 1, 1)
    y_src = np.zeros_like(p)
    y_src[:, 0] = 1.0
    logs = -np.log(p[:, :, 0, 0])
    w1 = (np.array([0.6, 0.8]) - logs[:, 0]) / (logs[:, 1] - logs[:, 0])
    y_psd = np.stack([1 - w1, w1], axis=1).reshape(2, 2, 1, 1)
    return Tensor(p, requires_grad=True), y_src, y_psd, np.ones((2, 1, 1, 1))


def test_total_loss_example():
    p, y_src, y_psd, mask = _single_pixel_case()
    loss, bd = total_loss(p, y_src, y_psd, mask, np.ones(2), 0.5)
    np.testing.assert_allclose(bd.l_fix, [0.2, 0.4], atol=1e-12)
    np.testing.assert_allclose(bd.l_sl, [0.6, 0.8], atol=1e-12)
    assert loss.item() == pytest.approx(0.5, abs=1e-12)
    assert LossBreakdown(np.array([0.2, 0.4]), np.array([0.6, 0.8]), np.ones(2), 0.5, 0.0).recompute_total() == pytest.approx(0.5, abs=1e-15)


def test_total_loss_endpoints():
    p, y_src, y_psd, mask = _single_pixel_case()
    omega = np.array([0.8, 1.2])
    _, pure_fix = total_loss(p, y_src, y_psd, mask, omega, 1.0)
    assert pure_fix.l_total == pytest.approx(np.mean(omega * np.array([0.2, 0.4])), abs=1e-12)
    _, pure_sl = total_loss(p, y_src, y_psd, mask, omega, 0.0)
    assert pure_sl.l_total == pytest.approx(np.mean(omega * np.array([0.6, 0.8])), abs=1e-12)
    _, no_sl = total_loss(p, y_src, None, None, omega, 0.3, mode="no_src2tgt")
    assert no_sl.l_sl is None and no_sl.l_total == pytest.approx(np.mean(omega * np.array([0.2, 0.4])), abs=1e-12)


# ---------------------------------------------------------------- adapt


def test_zero_epochs_returns_adabn():
    f_s, data = make_source(), make_data()
    res = adapt(f_s, data, AdaptConfig(seed=0, epochs=0, adabn_batch_size=4))
    assert to_bytes(res.target) == to_bytes(adabn_init(f_s, data.images, 4))
    assert res.steps == [] and res.epochs == []


def test_frozen_branches_and_hashes(run):
    f_s, before, res, seen = run
    assert len(seen) == len(res.steps) == 2 * 3 and all(seen)
    assert branch_hash(f_s) == before
    assert all(not p.grad.any() for p in f_s.parameters + res.momentum.parameters)
    assert res.y_src_hash[0] == res.y_src_hash[1]
    assert res.y_src_hash[0] == array_hash(pseudo_label_source(f_s, make_data().images))


def test_target_moves_and_ema_counted(run):
    f_s, _, res, _ = run
    assert res.ema_updates == len(res.steps)
    assert branch_hash(res.target) != branch_hash(adabn_init(f_s, make_data().images, 4))


def test_loss_decomposition(run):
    for rec in run[2].steps:
        assert abs(rec.loss.l_total - rec.loss.recompute_total()) <= 1e-12


def test_logs(run):
    res = run[2]
    assert [r["epoch"] for r in res.epochs] == [0, 1]
    assert res.epochs[0]["alpha"] == 0.5
    assert math.isnan(res.epochs[0]["dice_val"])
    for ranking in res.rankings:
        d = [v for _, v in ranking]
        assert sorted(ranking, key=lambda t: (t[1], t[0])) == ranking and min(d) >= 0
    assert all(len(rec.transforms) == len(rec.sample_ids) for rec in res.steps)


def test_every_sample_once_per_epoch(run):
    res = run[2]
    for epoch in (0, 1):
        ids = np.concatenate([r.sample_ids for r in res.steps if r.epoch == epoch])
        assert sorted(ids.tolist()) == list(range(100, 105))


def test_deterministic_and_full_equals_adapt(run):
    f_s, _, res, _ = run
    again = ablate("full", f_s, make_data(), AdaptConfig(seed=3, ablation="no_easy2hard", **FAST))
    assert to_bytes(again.target) == to_bytes(res.target)
    assert to_bytes(again.momentum) == to_bytes(res.momentum)


def test_seed_changes_run(run):
    f_s, _, res, _ = run
    other = adapt(f_s, make_data(), AdaptConfig(seed=4, **FAST))
    assert to_bytes(other.target) != to_bytes(res.target)


def test_no_easy2hard_weights_are_one():
    res = ablate("no_easy2hard", make_source(), make_data(), AdaptConfig(**FAST))
    assert all(np.array_equal(r.loss.omega, np.ones(len(r.sample_ids))) for r in res.steps)
    assert all(row["omega"] == 1.0 for row in res.epochs)


def test_no_src2tgt_has_no_momentum():
    res = ablate("no_src2tgt", make_source(), make_data(), AdaptConfig(**FAST))
    assert res.momentum is None and res.ema_updates == 0
    assert all(r.loss.l_sl is None and r.transforms == [] for r in res.steps)
    assert all(math.isnan(row["l_sl"]) for row in res.epochs)


def test_divergence_guard_dumps_state(tmp_path):
    data = make_data()
    data.images[2, 0, 3, 3] = np.nan
    with pytest.raises(DivergenceError) as info:
        adapt(make_source(), data, AdaptConfig(**FAST), out_dir=tmp_path)
    assert info.value.state["epoch"] == 0
    assert "alpha=0.5" in (tmp_path / "divergence_dump.txt").read_text()


def test_adapt_preconditions():
    with pytest.raises(DegenerateInputError):
        adapt(make_source(), make_data().subset(np.array([], dtype=int)), AdaptConfig())
    with pytest.raises(ConfigurationError):
        adapt(build(SMALL, 0), make_data(), AdaptConfig())


@pytest.mark.parametrize("kwargs", [dict(ablation="none"), dict(tau=1.0), dict(epochs=-1), dict(batch_size=0),
                                    dict(bn_mode="recalibrate")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        AdaptConfig(**kwargs)
