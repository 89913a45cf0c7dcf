import csv

import numpy as np
import pytest

from pvnet.model import ModelConfig, PVNet
from pvnet.train import ConfigError, Optimizer, TrainConfig, TrainingError, cosine_lr, evaluate, train


def quick(epochs=4, **kw):
    return TrainConfig(**{"epochs": epochs, "k": 6, "n_points": 64, "n_views": 4, "batch_size": 4, **kw})


class TestConfig:
    def test_phase_a_default(self):
        assert TrainConfig(epochs=60).phase_a_epochs == 18
        assert TrainConfig(epochs=10).phase_a_epochs == 3

    @pytest.mark.parametrize("kw", [dict(phase_a_epochs=11, epochs=10), dict(k=1024), dict(k=0),
                                    dict(optimizer="rmsprop"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_cosine_schedule():
    assert cosine_lr(0.01, 0, 100) == 0.01
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0)


def test_optimizer_skips_frozen(tiny_model_config):
    model = PVNet(tiny_model_config)
    for _, p in model.params.items():
        p.grad = np.ones_like(p.data)
    model.params.set_trainable("view_cnn", False)
    before = model.params.digest("view_cnn")
    point_before = model.params.digest("point")
    Optimizer(model.params).step()
    assert model.params.digest("view_cnn") == before
    assert model.params.digest("point") != point_before


def test_freeze_contract(tiny_sets, tiny_model_config):
    train_set, _ = tiny_sets
    result = train(quick(epochs=4, phase_a_epochs=2), tiny_model_config, train_set)
    d = result.view_digests
    # digests at the start of epochs 0..3, then after training
    assert d[0] == d[1] == d[2]
    assert d[3] != d[2] and d[4] != d[3]


def test_phase_a_still_trains_points(tiny_sets, tiny_model_config):
    train_set, _ = tiny_sets
    init = PVNet(tiny_model_config, seed=0).params.digest("point")
    result = train(quick(epochs=1, phase_a_epochs=1), tiny_model_config, train_set)
    assert result.model.params.digest("point") != init


@pytest.mark.filterwarnings("ignore:classes .* have no samples")
def test_overfit_two_shapes(tiny_sets, tiny_model_config):
    train_set, _ = tiny_sets
    pair = [train_set[0], train_set[1]]
    result = train(quick(epochs=50, lr=0.02, batch_size=2), tiny_model_config, pair)
    losses = [float(r["loss"]) for r in result.log]
    assert losses[-1] < 0.5 * losses[0]
    assert evaluate(result.model, pair, retrieval=False).overall == 1.0


def test_same_seed_bitwise(tiny_sets, tiny_model_config, tmp_path):
    train_set, test_set = tiny_sets
    for name in ("a", "b"):
        train(quick(epochs=2, seed=5), tiny_model_config, train_set, test_set, tmp_path / name)
    for f in ("metrics.csv", "checkpoint_final.pvck", "checkpoint_best.pvck"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train(quick(epochs=2, seed=6), tiny_model_config, train_set, test_set, tmp_path / "c")
    assert (tmp_path / "a" / "checkpoint_final.pvck").read_bytes() != (tmp_path / "c" / "checkpoint_final.pvck").read_bytes()


def test_metrics_log(tiny_sets, tiny_model_config, tmp_path):
    train_set, test_set = tiny_sets
    train(quick(epochs=3, phase_a_epochs=1), tiny_model_config, train_set, test_set, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "phase", "loss", "overall", "mean_class"]
    assert [r["phase"] for r in rows] == ["A", "B", "B"]


@pytest.mark.parametrize("arm", ["point_only", "view_only", "late_fusion"])
def test_other_arms_train(tiny_sets, arm):
    train_set, test_set = tiny_sets
    from conftest import TINY_MODEL

    result = train(quick(epochs=1), ModelConfig(arm=arm, **TINY_MODEL), train_set, test_set)
    assert len(result.log) == 1
    if arm == "point_only":
        assert result.view_digests == []


def test_divergence_reported(tiny_sets, tiny_model_config):
    train_set, _ = tiny_sets
    with pytest.raises(TrainingError, match="non-finite loss"):
        with np.errstate(all="ignore"):
            train(quick(epochs=3, lr=1e30, optimizer="sgd"), tiny_model_config, train_set)


def test_empty_training_set(tiny_model_config):
    with pytest.raises(ConfigError):
        train(quick(), tiny_model_config, [])
