import json
import math

import numpy as np
import pytest

from vslowfast.autodiff import Tensor
from vslowfast.data import SpectralDataset, ToyConfig, generate_split, write_dataset
from vslowfast.dsp import StftConfig
from vslowfast.losses import LossWeights
from vslowfast.model import ConfigError, ModelConfig, VSlowFast
from vslowfast.train import (CheckpointMismatch, OptimizerState, TrainConfig, evaluate, evaluate_model, load_model,
                             save_model, sgd_step, step_loss, train)

SMALL = StftConfig(sample_rate=8000, window_len=62, hop_len=31, frames=32)
MICRO = ModelConfig(category_count=4, vision_channels=(4, 4, 4), slow_layers=5, fast_layers=4,
                    slow_alpha=2, fast_alpha=1, unet_channels=(4, 8), image_size=16)
TOY = ToyConfig(image_size=16)


@pytest.fixture(scope="module")
def small_data():
    return SpectralDataset(generate_split("train", 4, 0, SMALL, TOY), SMALL)


@pytest.fixture(scope="module")
def disjoint_test():
    return SpectralDataset(generate_split("test", 4, 0, SMALL, ToyConfig(image_size=16, shared_band=False)), SMALL)


# ---------------------------------------------------------------- sgd

def test_sgd_examples():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    sgd_step([p], [np.zeros(2)], OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    q = Tensor(np.array(1.0), requires_grad=True)
    sgd_step([q], [np.array(1.0)], OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert q.data == 0.9


def test_sgd_three_step_recurrence():
    p = Tensor(np.array(1.0), requires_grad=True)
    state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=1e-4)
    grads = [0.5, -0.25, 1.0]
    ref_p, ref_v = 1.0, 0.0
    for g in grads:
        sgd_step([p], [np.array(g)], state)
        ref_v = 0.9 * ref_v + g + 1e-4 * ref_p
        ref_p = ref_p - 0.1 * ref_v
        assert abs(p.data - ref_p) < 1e-15
    assert state.buffers[0].shape == p.shape


def test_sgd_uses_and_clears_accumulated_grads():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step([p], None, OptimizerState(lr=0.5, momentum=0.0, weight_decay=0.0))
    assert p.data[0] == 1.5 and (p.grad is None or not np.any(p.grad))


def test_sgd_rejects_nan_before_touching_anything():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(FloatingPointError):
        sgd_step([a, b], [np.ones(2), np.array([np.nan, 0.0])], OptimizerState(lr=0.1))
    np.testing.assert_array_equal(a.data, 1.0)


# ---------------------------------------------------------------- config

def test_train_config_defaults_and_json():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay) == (10, 1e-3, 0.9, 1e-4)
    d = json.loads(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_dict(d) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"batchsize": 3})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- training

def test_initial_separation_loss_is_baseline(small_data, rng):
    model = VSlowFast(MICRO).train()
    mixtures = [small_data.draw_mixture(rng, 2) for _ in range(3)]
    _, l_sep, _, _ = step_loss(model, small_data.batch(mixtures, rng), LossWeights())
    assert abs(l_sep - 2 * 2 * math.log(2)) < 1e-9


def test_lr_zero_leaves_parameters_unchanged(small_data):
    cfg = TrainConfig(steps=3, lr=0.0, weight_decay=0.0, batch_size=2, model=MICRO)
    model, _ = train(cfg, small_data)
    fresh = VSlowFast(MICRO, seed=0)
    for (n, p), (_, q) in zip(model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_same_seed_same_trace(small_data):
    cfg = TrainConfig(steps=4, lr=1e-2, batch_size=2, model=MICRO)
    (m1, r1), (m2, r2) = train(cfg, small_data), train(cfg, small_data)
    assert [r.to_dict() for r in r1] == [r.to_dict() for r in r2]
    assert all(np.array_equal(p.data, q.data) for p, q in zip(m1.parameters(), m2.parameters()))
    _, r3 = train(cfg.replace(seed=1), small_data)
    assert [r.total for r in r3] != [r.total for r in r1]


def test_training_beats_half_mask_baseline_on_two_categories():
    data = SpectralDataset(generate_split("train", 8, 0, SMALL, ToyConfig(categories=2, image_size=16)), SMALL)
    cfg = TrainConfig(steps=200, lr=3e-2, batch_size=4, model=MICRO.replace(category_count=2))
    _, records = train(cfg, data)
    first = records[0]
    baseline = 2 * 2 * math.log(2) + 0.1 * first.l_e + 0.1 * first.l_M
    assert abs(first.l_sep - 4 * math.log(2)) < 1e-9
    assert np.mean([r.total for r in records[-20:]]) < baseline


def test_writes_log_and_checkpoints(tmp_path, small_data):
    cfg = TrainConfig(steps=3, lr=1e-2, batch_size=2, eval_every=2, model=MICRO)
    model, records = train(cfg, small_data, out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train.ndjson").read_text().splitlines()]
    assert [set(x) for x in lines] == [{"step", "l_sep", "l_e", "l_M", "total"}] * 3
    assert lines[-1] == records[-1].to_dict()
    for x in lines:
        assert abs(x["total"] - (x["l_sep"] + 0.1 * x["l_e"] + 0.1 * x["l_M"])) < 1e-12
    loaded = load_model(tmp_path / "checkpoint.vsf")
    assert all(np.array_equal(p.data, q.data) for p, q in zip(model.state_dict().values(),
                                                                loaded.state_dict().values()))


# ---------------------------------------------------------------- evaluation

def test_ideal_masks_exceed_20_db(disjoint_test):
    report = evaluate_model(None, disjoint_test, disjoint_test.fixed_mixtures(6, 2, 0))
    assert report["model"]["sdr"] > 20
    assert min(s["sdr"] for s in report["per_source"]) > 20


def test_copy_paste_is_near_zero_db(disjoint_test):
    report = evaluate_model(None, disjoint_test, disjoint_test.fixed_mixtures(20, 2, 0))
    assert abs(report["copy_paste"]["sdr"]) < 1.0


def test_zero_logit_model_scores_equal_copy_paste(disjoint_test):
    model = VSlowFast(MICRO).eval()
    report = evaluate_model(model, disjoint_test, disjoint_test.fixed_mixtures(4, 2, 0))
    for k in ("sdr", "sir", "sar"):
        assert abs(report["model"][k] - report["copy_paste"][k]) < 1e-9
    assert abs(report["sdr_gain_over_copy_paste"]) < 1e-9


def test_checkpoint_round_trip_reproduces_evaluation(tmp_path):
    manifest = write_dataset(tmp_path / "data", {"train": 2, "test": 2}, 0, SMALL, TOY)
    cfg = TrainConfig(steps=2, lr=1e-2, batch_size=2, model=MICRO)
    model, _ = train(cfg, manifest, out_dir=tmp_path / "run")
    a = evaluate(tmp_path / "run" / "checkpoint.vsf", manifest, mixtures=3)
    save_model(load_model(tmp_path / "run" / "checkpoint.vsf"), tmp_path / "copy.vsf")
    b = evaluate(tmp_path / "copy.vsf", manifest, mixtures=3)
    assert a["per_source"] == b["per_source"] and a["model"] == b["model"]


def test_checkpoint_mismatch(tmp_path):
    save_model(VSlowFast(MICRO), tmp_path / "m.vsf")
    with pytest.raises(CheckpointMismatch):
        load_model(tmp_path / "m.vsf", MICRO.replace(unet_channels=(4, 4)))
    with pytest.raises(CheckpointMismatch):
        load_model(tmp_path / "missing.vsf")
