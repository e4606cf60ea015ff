import json
import math

import numpy as np
import pytest

import modalfuse

SMALL = {
    "backbone": {"depth": 2, "embed_dim": 16, "num_heads": 2, "patch_size": 4, "mlp_ratio": 2, "taps": [1, 2]},
    "decoder": {"channels": 8, "ppm_bins": [1, 2]},
    "data": {"crop": 16, "train_tiles": 2, "test_tiles": 1, "synthetic": {"tile_size": 32, "cell": 8}},
    "schedule": {"batch_size": 2, "epochs": 1, "steps_per_epoch": 2, "warmup_epochs": 0},
    "eval": {"stride": 8},
}


def test_resolved_config_round_trips():
    c = modalfuse.resolve_config(modalfuse.default_config())
    assert modalfuse.resolve_config(c) == c
    assert c["schedule"]["base_lr"] == pytest.approx(3e-4)
    assert c["eval"]["stride"] == c["data"]["crop"] // 2


def test_overrides_and_unknown_keys():
    c = modalfuse.resolve_config({}, ["--schedule.base_lr=0.002"])
    assert c["schedule"]["base_lr"] == pytest.approx(0.002)
    with pytest.raises(modalfuse.ConfigError):
        modalfuse.resolve_config({"schedule": {"epochz": 3}})
    with pytest.raises(ValueError):
        modalfuse.resolve_config({}, ["mcrm.ratio=1.5"])


def test_param_report_partitions_the_total():
    r = modalfuse.param_report()
    assert r["trainable"] + r["frozen"] == r["total"]
    assert 0 < r["trainable"] < r["total"]


def test_schedule_endpoints():
    cfg = {"schedule": {"base_lr": 3e-4, "lr_min": 0.0, "warmup_epochs": 1, "epochs": 2, "steps_per_epoch": 10}}
    assert modalfuse.lr_at(0, cfg) == 0.0
    assert modalfuse.lr_at(10, cfg) == pytest.approx(3e-4, abs=1e-15)
    assert modalfuse.lr_at(15, cfg) == pytest.approx(1.5e-4 * (1 + math.cos(math.pi / 2)), abs=1e-15)
    assert modalfuse.lr_at(20, cfg) == pytest.approx(0.0, abs=1e-15)


def test_masked_sample_count():
    assert modalfuse.masked_sample_count(8, 0.5) == 4
    assert modalfuse.masked_sample_count(5, 1.0) == 5


def test_metrics_worked_example():
    pairs = {(0, 0): 2, (0, 1): 1, (1, 1): 3, (2, 0): 1, (2, 2): 3}
    gt = np.array([g for (g, _), n in pairs.items() for _ in range(n)])
    pred = np.array([p for (_, p), n in pairs.items() for _ in range(n)])
    r = modalfuse.metrics(pred, gt, 3, foreground=[0, 1, 2])
    assert r["oa"] == pytest.approx(0.8)
    assert r["miou"] == pytest.approx((0.5 + 0.75 + 0.75) / 3)
    with pytest.raises(IndexError):
        modalfuse.metrics(np.array([0]), np.array([7]), 3)


def test_model_predict_shape_and_determinism():
    m = modalfuse.Model(SMALL, seed=3)
    rng = np.random.default_rng(0)
    rgb = rng.standard_normal((1, 3, 16, 16))
    aux = rng.standard_normal((1, 1, 16, 16))
    out = m.predict(rgb, aux)
    assert out.shape == (1, 6, 16, 16)
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, modalfuse.Model(SMALL, seed=3).predict(rgb, aux))
    assert 0 < m.parameter_count(trainable_only=True) < m.parameter_count()
    with pytest.raises(modalfuse.ShapeError):
        m.predict(rgb[:, :, :15, :15], aux[:, :, :15, :15])


def test_train_and_reload_checkpoint(tmp_path):
    doc = modalfuse.train(SMALL, 7, tmp_path)
    assert doc["seed"] == 7
    assert (tmp_path / "metrics.json").exists()
    on_disk = json.loads((tmp_path / "metrics.json").read_text())
    assert on_disk == doc
    model = modalfuse.Model.from_checkpoint(tmp_path / "checkpoint")
    assert not model.has_aux_heads
    rgb = np.zeros((1, 3, 16, 16))
    assert model.predict(rgb, np.zeros((1, 1, 16, 16))).shape == (1, 6, 16, 16)
    with pytest.raises(modalfuse.FormatError):
        modalfuse.Model.from_checkpoint(tmp_path / "missing")
