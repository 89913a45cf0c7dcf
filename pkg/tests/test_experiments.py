import csv

import numpy as np
import pytest

from conftest import TINY_MODEL
from pvnet.experiments import (
    median_by_arm,
    ring_renderer,
    robustness_sweep,
    run_ablation,
    with_points,
    with_views,
)
from pvnet.model import ModelConfig, PVNet
from pvnet.train import TrainConfig


def test_with_points(tiny_sets):
    _, test = tiny_sets
    sub = with_points(test, 16, seed=0)
    for s, orig in zip(sub, test):
        assert s.points.shape == (16, 3)
        assert s.id == orig.id and s.views is orig.views
        rows = {tuple(p) for p in orig.points}
        assert all(tuple(p) in rows for p in s.points)
    again = with_points(test, 16, seed=0)
    assert all(np.array_equal(a.points, b.points) for a, b in zip(sub, again))


def test_with_views_subset_and_render(tiny_corpus, tiny_sets):
    root, manifest = tiny_corpus
    _, test = tiny_sets
    two = with_views(test, 2)
    np.testing.assert_array_equal(two[0].views, test[0].views[[0, 2]])
    with pytest.raises(ValueError, match="no renderer"):
        with_views(test, 3)
    render = ring_renderer(manifest, 16, 16)
    three = with_views(test, 3, render)
    assert three[0].views.shape == (3, 16, 16)
    # camera 0 of any ring sits at azimuth 0, matching the stored first view
    np.testing.assert_allclose(three[0].views[0], test[0].views[0], atol=1e-6)


def test_sweep_rows(tiny_sets, tmp_path):
    _, test = tiny_sets
    models = {"full": PVNet(ModelConfig(**TINY_MODEL)), "point_only": PVNet(ModelConfig(arm="point_only", **TINY_MODEL))}
    rows = robustness_sweep(models, test, "points", levels=(8, 64), out_path=tmp_path / "s.csv")
    assert [(r["model"], r["level"]) for r in rows] == [("full", 8), ("point_only", 8), ("full", 64),
                                                        ("point_only", 64)]
    with open(tmp_path / "s.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    with pytest.raises(ValueError):
        robustness_sweep(models, test, "colour")


def test_ablation_small(tiny_sets, tmp_path):
    train, test = tiny_sets
    tc = TrainConfig(epochs=1, k=6, n_points=64, n_views=4, batch_size=4)
    rows, models = run_ablation(tc, train, test, arms=("point_only", "view_only"), seeds=(0, 1),
                                model_config=ModelConfig(**TINY_MODEL), out_dir=tmp_path)
    assert len(rows) == 4 and set(models) == {("point_only", 0), ("view_only", 0), ("point_only", 1),
                                              ("view_only", 1)}
    assert (tmp_path / "ablation.csv").exists()
    assert set(median_by_arm(rows)) == {"point_only", "view_only"}
