"""Ablation runs across arms and robustness sweeps over point and view counts."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from pvnet import geometry
from pvnet.dataset import DatasetManifest, Shape
from pvnet.metrics import EvalReport
from pvnet.model import ARMS, ModelConfig, PVNet
from pvnet.train import TrainConfig, TrainResult, evaluate, train
from pvnet.view_branch import subsample_views

log = logging.getLogger(__name__)

POINT_LEVELS = (128, 256, 384, 512, 768, 1024)
VIEW_LEVELS = (4, 8, 12)

# narrower than the library defaults so four arms times three seeds fit a CPU hour
BENCH_MODEL = ModelConfig(edge_widths=(32, 32), block_widths=(64, 128), embed_dim=32)

ABLATION_FIELDS = ("arm", "seed", "overall", "mean_class", "mAP", "best_epoch", "seconds", "cpu_seconds")
SWEEP_FIELDS = ("model", "axis", "level", "overall", "mean_class")


def shape_seed(seed: int, shape_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{shape_id}".encode()).digest()[:8], "little")


def run_arm(arm: str, train_config: TrainConfig, train_set: list[Shape], test_set: list[Shape],
            model_config: ModelConfig = BENCH_MODEL, out_dir: str | os.PathLike | None = None
            ) -> tuple[TrainResult, EvalReport, dict]:
    """Train one arm and evaluate its final weights on ``test_set``.

    Returns (result, report, timing) with wall and CPU seconds of training.
    """
    cfg = replace(model_config, arm=arm, k=train_config.k)
    wall, cpu = time.perf_counter(), time.process_time()
    result = train(train_config, cfg, train_set, test_set, out_dir)
    timing = {"seconds": time.perf_counter() - wall, "cpu_seconds": time.process_time() - cpu}
    report = evaluate(result.model, test_set)
    log.info("%s seed %d: overall %.4f mean class %.4f mAP %.4f (%.0fs)", arm, train_config.seed,
             report.overall, report.mean_class, report.mAP, timing["seconds"])
    return result, report, timing


def run_ablation(train_config: TrainConfig, train_set: list[Shape], test_set: list[Shape],
                 arms=ARMS, seeds=(0,), model_config: ModelConfig = BENCH_MODEL,
                 out_dir: str | os.PathLike | None = None) -> tuple[list[dict], dict]:
    """Every arm under the same data, seeds and training budget.

    Returns (rows, results) where ``results[(arm, seed)]`` is the :class:`TrainResult`.
    Writes ``ablation.csv`` when ``out_dir`` is given.
    """
    rows, models = [], {}
    for seed in seeds:
        for arm in arms:
            tc = replace(train_config, seed=int(seed))
            sub = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            result, report, timing = run_arm(arm, tc, train_set, test_set, model_config, sub)
            models[(arm, int(seed))] = result
            rows.append({"arm": arm, "seed": int(seed), "overall": report.overall, "mean_class": report.mean_class,
                         "mAP": report.mAP, "best_epoch": result.best_epoch,
                         "seconds": round(timing["seconds"], 1), "cpu_seconds": round(timing["cpu_seconds"], 1)})
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation.csv", rows, ABLATION_FIELDS)
    return rows, models


def median_by_arm(rows: list[dict], metric: str = "overall") -> dict[str, float]:
    arms = dict.fromkeys(r["arm"] for r in rows)
    return {a: float(np.median([r[metric] for r in rows if r["arm"] == a])) for a in arms}


def with_points(shapes: list[Shape], m: int, seed: int = 0) -> list[Shape]:
    """Each shape reduced to ``m`` of its points (uniform, per-shape seeded, no rescaling)."""
    out = []
    for s in shapes:
        if m == len(s.points):
            out.append(s)
            continue
        pc = geometry.subsample_points(geometry.PointCloud(s.points), m, shape_seed(seed, s.id))
        out.append(Shape(s.id, s.label, pc.points.astype(np.float32), s.views))
    return out


Renderer = Callable[[Shape, int], np.ndarray]


def ring_renderer(manifest: DatasetManifest, height: int = 64, width: int = 64) -> Renderer:
    """Render a fresh evenly spaced camera ring from each shape's source mesh."""
    entries = {e.id: e for e in manifest.entries}

    def render(shape: Shape, count: int) -> np.ndarray:
        mesh = geometry.normalize_mesh(geometry.read_off(manifest.mesh_file(entries[shape.id])))
        return geometry.render_views(mesh, geometry.camera_ring(count), height, width).views
    return render


def with_views(shapes: list[Shape], count: int, render: Renderer | None = None) -> list[Shape]:
    """Each shape seen from ``count`` cameras.

    Counts dividing the stored ring take an evenly strided subset; any other
    count is re-rendered as a new ring through ``render``.
    """
    out = []
    for s in shapes:
        stored = len(s.views)
        if count == stored:
            out.append(s)
            continue
        if stored % count == 0:
            views = subsample_views(s.views, count)
        elif render is not None:
            views = render(s, count).astype(np.float32)
        else:
            raise ValueError(f"{count} views is not a subset of the stored {stored}-camera ring and no renderer given")
        out.append(Shape(s.id, s.label, s.points, views, s.neighbors))
    return out


def robustness_sweep(models: dict[str, PVNet], test_set: list[Shape], axis: str, levels=None, seed: int = 0,
                     render: Renderer | None = None, k: int | None = None,
                     out_path: str | os.PathLike | None = None) -> list[dict]:
    """Accuracy of each model as test inputs are degraded along ``axis`` ("points" or "views")."""
    if axis not in ("points", "views"):
        raise ValueError(f"axis must be 'points' or 'views', got {axis!r}")
    levels = tuple(levels or (POINT_LEVELS if axis == "points" else VIEW_LEVELS))
    rows = []
    for level in levels:
        shapes = with_points(test_set, level, seed) if axis == "points" else with_views(test_set, level, render)
        for name, model in models.items():
            kk = min(k or model.config.k, level - 1) if axis == "points" else (k or model.config.k)
            report = evaluate(model, shapes, k=kk, retrieval=False)
            rows.append({"model": name, "axis": axis, "level": int(level), "overall": report.overall,
                         "mean_class": report.mean_class})
            log.info("%s %s=%d overall %.4f", name, axis, level, report.overall)
    if out_path is not None:
        write_csv(out_path, rows, SWEEP_FIELDS)
    return rows


def accuracy_drop(rows: list[dict], model: str, low: int, high: int) -> float:
    acc = {r["level"]: r["overall"] for r in rows if r["model"] == model}
    return acc[high] - acc[low]


def write_csv(path: str | os.PathLike, rows: list[dict], fields) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
