import dataclasses

import numpy as np
import pytest

from poselab import synthdata as sd
from poselab.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint
from poselab.errors import (BadMagicError, ChecksumError, ConfigError, TruncatedFileError,
                            VersionMismatchError)
from poselab.grouping import RoutingTable
from poselab.losses import LossWeights
from poselab.numgrad import NumericalError
from poselab.posenet import ModelConfig, PoseNet
from poselab.trainer import (EvalReport, TrainConfig, cyclic_lr, epoch_batches, evaluate,
                             evaluate_checkpoint, pilot_scorer, pose_errors, pose_success,
                             rotation_error_deg, subset_indices, train)

TINY = ModelConfig(D=8, K_kpt=4, K_n=4, heads=2, enc_widths=(8, 8), head_width=8,
                   recon_points=4, geo_dim=4)


@pytest.fixture(scope="module")
def data():
    return sd.generate_dataset(sd.make_category_specs(3, "graded", 0), 6, 16, 0.0, 1, "train")


@pytest.fixture(scope="module")
def val():
    return sd.generate_dataset(sd.make_category_specs(3, "graded", 0), 4, 16, 0.0, 1, "val")


def cfg(**kw):
    base = dict(model=TINY, epochs=1, batch_size=4, seed=0)
    return TrainConfig(**{**base, **kw})


SPLIT = RoutingTable({0: 1, 1: 2, 2: 2}, {1: "H", 2: "L"})


# --------------------------------------------------------------------------- #
# Config and schedule
# --------------------------------------------------------------------------- #

def test_cyclic_lr_triangle():
    assert cyclic_lr(0, 2e-5, 5e-4, 600) == 2e-5
    assert cyclic_lr(300, 2e-5, 5e-4, 600) == pytest.approx(5e-4)
    assert cyclic_lr(150, 2e-5, 5e-4, 600) == pytest.approx((2e-5 + 5e-4) / 2)
    assert cyclic_lr(600, 2e-5, 5e-4, 600) == 2e-5
    lrs = [cyclic_lr(s, 1.0, 2.0, 10) for s in range(30)]
    assert min(lrs) >= 1.0 and max(lrs) <= 2.0


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.lr_min, c.lr_max, c.beta1, c.beta2, c.adam_eps) == (2e-5, 5e-4, 0.9, 0.999, 1e-8)
    assert (c.epochs, c.batch_size, c.thresholds) == (30, 16, (10.0, 0.1, 0.15))


def test_config_json_round_trip():
    c = cfg(routing="quantile", G=2, weights=LossWeights(lambda_g=0.5))
    assert TrainConfig.from_json({"v": 1, **c.to_json()}) == c


@pytest.mark.parametrize("bad", [{"epochz": 3}, {"lr_min": 1.0, "lr_max": 0.5},
                                 {"routing": "kmeans"}, {"data_fraction": 0.0}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_json(bad)


# --------------------------------------------------------------------------- #
# Batching
# --------------------------------------------------------------------------- #

def test_batches_are_single_category_and_cover_everything(data):
    by_cat = subset_indices(data, 1.0, 0)
    batches = epoch_batches(by_cat, 4, 0, 1)
    seen = []
    for c, idx in batches:
        assert all(data.instances[i].category == c for i in idx)
        seen += list(idx)
    assert sorted(seen) == list(range(len(data.instances)))
    assert [len(i) for _, i in epoch_batches(by_cat, 4, 0, 1)] == [len(i) for _, i in batches]


def test_batches_reshuffle_per_epoch(data):
    by_cat = subset_indices(data, 1.0, 0)
    a = [list(i) for _, i in epoch_batches(by_cat, 4, 0, 1)]
    b = [list(i) for _, i in epoch_batches(by_cat, 4, 0, 2)]
    assert a != b


def test_subset_fraction(data):
    sub = subset_indices(data, 0.5, 3)
    assert all(len(v) == 3 for v in sub.values())
    assert sub == subset_indices(data, 0.5, 3)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #

def test_zero_weights_leave_parameters_unchanged(data):
    zero = LossWeights(lambda_cd=0, lambda_div=0, lambda_recon=0, lambda_nocs=0,
                       lambda_main=0, lambda_g=0)
    c = cfg(weights=zero, batch_size=100)
    res = train(c, data, RoutingTable.shared(range(3)))
    init = PoseNet(res.config).init_params(0)
    init.round_to_f32()
    assert all(np.array_equal(res.params[n], init[n]) for n in init.names())


def test_training_is_deterministic(data, tmp_path):
    a = train(cfg(epochs=2), data, SPLIT, out_dir=tmp_path / "a")
    b = train(cfg(epochs=2), data, SPLIT, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    for x, y in zip(a.checkpoints, b.checkpoints):
        assert x.read_bytes() == y.read_bytes()
    assert len(a.checkpoints) == 2 and [r["epoch"] for r in a.metrics] == [1, 2]


def test_loss_decreases_over_fifty_steps():
    d = sd.generate_dataset(sd.make_category_specs(2, "graded", 0), 4, 16, 0.0, 2, "train")
    res = train(cfg(epochs=25, batch_size=4, lr_min=1e-3, lr_max=3e-3), d,
                RoutingTable.shared(range(2)))
    loss = [r["mean_loss"] for r in res.metrics]
    assert np.isfinite(loss).all()
    assert np.mean(loss[-3:]) < 0.8 * np.mean(loss[:3])


def test_inactive_branches_untouched(data):
    checked = []

    def on_step(info):
        for n in info.store.names():
            blk = info.store.block_of(n)
            if blk.startswith("phi_") and blk != f"phi_{info.group}":
                assert not info.grads[n].any()
                assert np.array_equal(info.store.m[n], info.m_before[n])
                assert np.array_equal(info.store.v[n], info.v_before[n])
        checked.append(info.group)

    train(cfg(epochs=2), data, SPLIT, on_step=on_step)
    assert set(checked) == {1, 2}


def test_non_finite_loss_raises(data):
    bad = dataclasses.replace(data, instances=list(data.instances))
    inst = bad.instances[0]
    bad.instances[0] = dataclasses.replace(inst, observed=np.full_like(inst.observed, np.nan))
    with pytest.raises(NumericalError):
        train(cfg(batch_size=100), bad, RoutingTable.shared(range(3)))


def test_routing_must_cover_categories(data):
    with pytest.raises(ConfigError):
        train(cfg(), data, RoutingTable({0: 1}, {1: "H"}))


def test_eval_columns(data, val):
    res = train(cfg(epochs=2, eval_every=1), data, SPLIT, eval_data=val)
    assert {"rate_c0", "rate_c1", "rate_c2"} <= set(res.metrics[0])


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #

def test_rotation_error():
    Rz = lambda a: np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    assert rotation_error_deg(np.eye(3), np.eye(3)) == pytest.approx(0.0, abs=1e-6)
    assert rotation_error_deg(Rz(np.radians(30)), np.eye(3)) == pytest.approx(30.0)
    assert rotation_error_deg(np.diag([1.0, -1, -1]), np.eye(3)) == pytest.approx(180.0)


def test_success_is_strict():
    th = (10.0, 0.1, 0.15)
    assert not pose_success(np.array([10.0]), np.array([0.0]), np.array([0.0]), th)[0]
    assert not pose_success(np.array([0.0]), np.array([0.1]), np.array([0.0]), th)[0]
    assert not pose_success(np.array([0.0]), np.array([0.0]), np.array([0.15]), th)[0]
    assert pose_success(np.array([9.99]), np.array([0.099]), np.array([0.149]), th)[0]


def test_scale_error_is_max_relative():
    gt = sd.Pose(np.eye(3)[None], np.zeros((1, 3)), np.array([[1.0, 2.0, 4.0]]))
    _, _, s = pose_errors(np.eye(3)[None], np.zeros((1, 3)), np.array([[1.1, 2.0, 3.0]]), gt)
    assert s[0] == pytest.approx(0.25)


def test_evaluate_report(data, val, tmp_path):
    res = train(cfg(), data, SPLIT, out_dir=tmp_path)
    rep = evaluate(PoseNet(res.config), res.params, val, SPLIT)
    assert set(rep.rate) == {0, 1, 2} and all(0 <= r <= 1 for r in rep.rate.values())
    assert rep.count == {0: 4, 1: 4, 2: 4}
    assert EvalReport.from_json(rep.to_json()).to_json() == rep.to_json()
    back = evaluate_checkpoint(res.checkpoints[-1], val)
    assert back.to_json() == rep.to_json()
    missing = evaluate(PoseNet(res.config), res.params, val, SPLIT, categories=[0, 5])
    assert missing.missing == [5]


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

def test_checkpoint_round_trip(data, tmp_path):
    res = train(cfg(), data, SPLIT, out_dir=tmp_path)
    path = res.checkpoints[0]
    ck = load_checkpoint(path)
    assert ck.epoch == 1 and ck.config == res.config
    assert RoutingTable.from_json(ck.routing).gamma == SPLIT.gamma
    assert all(np.array_equal(ck.params[n], res.params[n]) for n in res.params.names())
    assert all(ck.params.block_of(n) == res.params.block_of(n) for n in res.params.names())
    assert checkpoint_bytes(ck) == path.read_bytes()


def test_checkpoint_corruption(data, tmp_path):
    res = train(cfg(), data, SPLIT, out_dir=tmp_path)
    buf = res.checkpoints[0].read_bytes()
    cases = {
        BadMagicError: b"NOPE" + buf[4:],
        VersionMismatchError: buf[:4] + (7).to_bytes(2, "little") + buf[6:],
        TruncatedFileError: buf[: len(buf) // 2],
        ChecksumError: buf[:-40] + bytes([buf[-40] ^ 1]) + buf[-39:],
    }
    for err, bad in cases.items():
        with pytest.raises(err):
            parse_checkpoint(bad)


# --------------------------------------------------------------------------- #
# Pilots
# --------------------------------------------------------------------------- #

def test_pilot_scorer_caches_and_is_deterministic(data, val):
    calls = []
    alpha = lambda gamma: (calls.append(1), {g: "H" for g in range(1, 3)})[1]  # noqa: E731
    score = pilot_scorer(cfg(), data, val, alpha, seed=5)
    gamma = {0: 1, 1: 1, 2: 2}
    a = score(gamma, 1, 1)
    b = score(gamma, 1, 1)
    assert a == b and len(calls) == 1 and a < 0
    again = pilot_scorer(cfg(), data, val, alpha, seed=5)(gamma, 1, 1)
    assert again == a
