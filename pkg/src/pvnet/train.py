"""Optimizers, the two-phase training loop and batched evaluation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pvnet import tensor as T
from pvnet.dataset import Shape
from pvnet.metrics import EvalReport
from pvnet.model import ModelConfig, PVNet
from pvnet.nn import ParamStore

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "loss", "overall", "mean_class")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    phase_a_epochs: int | None = None  # default: 30% of epochs
    lr: float = 0.01
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    ortho_weight: float = 1e-3
    k: int = 20
    n_points: int = 1024
    n_views: int = 12

    def __post_init__(self):
        if self.phase_a_epochs is None:
            self.phase_a_epochs = int(round(0.3 * self.epochs))
        if not 0 <= self.phase_a_epochs <= self.epochs:
            raise ConfigError(f"phase_a_epochs={self.phase_a_epochs} must lie in [0, epochs={self.epochs}]")
        if not 1 <= self.k < self.n_points:
            raise ConfigError(f"k={self.k} must satisfy 1 <= k < n_points={self.n_points}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """SGD with momentum or Adam over a :class:`ParamStore`; skips frozen parameters.

    Moment buffers are keyed by parameter name so they survive checkpointing.
    """

    def __init__(self, params: ParamStore, kind: str = "sgd", lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict[str, np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.kind == "sgd":
                buf = self.state.get(f"{name}.momentum")
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[f"{name}.momentum"] = buf.astype(p.dtype, copy=False)
                p.data = (p.data - lr * buf).astype(p.dtype, copy=False)
            else:
                b1, b2 = self.betas
                m = self.state.get(f"{name}.m", np.zeros_like(p.data))
                v = self.state.get(f"{name}.v", np.zeros_like(p.data))
                m = (b1 * m + (1 - b1) * g).astype(p.dtype, copy=False)
                v = (b2 * v + (1 - b2) * g * g).astype(p.dtype, copy=False)
                self.state[f"{name}.m"], self.state[f"{name}.v"] = m, v
                mhat = m / (1 - b1 ** self.step_count)
                vhat = v / (1 - b2 ** self.step_count)
                p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * step / total))


def _batches(shapes: list[Shape], batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(len(shapes)) if order is None else order
    # shapes in one batch must share a point count
    for start in range(0, len(idx), batch_size):
        chunk = [shapes[i] for i in idx[start:start + batch_size]]
        by_n: dict[int, list[Shape]] = {}
        for s in chunk:
            by_n.setdefault(len(s.points), []).append(s)
        yield from by_n.values()


def run_batch(model: PVNet, shapes: list[Shape], k: int, mask_override: float | None = None):
    clouds = [s.points for s in shapes] if model.config.uses_points else None
    graphs = [s.knn(k) for s in shapes] if model.config.uses_points else None
    views = [s.views for s in shapes] if model.config.uses_views else None
    return model.forward_shapes(clouds, views, graphs=graphs, k=k, mask_override=mask_override)


def predict(model: PVNet, shapes: list[Shape], batch_size: int = 16, k: int | None = None,
            mask_override: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(logits, retrieval features, labels) for ``shapes`` in their given order."""
    k = k or model.config.k
    logits, feats, labels = [], [], []
    with T.no_grad():
        for chunk in _batches(shapes, batch_size):
            res = run_batch(model, chunk, k, mask_override)
            logits.append(res.logits.data)
            feats.append(res.feature.data)
            labels.extend(s.label for s in chunk)
    return np.concatenate(logits), np.concatenate(feats), np.asarray(labels)


def evaluate(model: PVNet, shapes: list[Shape], batch_size: int = 16, k: int | None = None,
             retrieval: bool = True) -> EvalReport:
    logits, feats, labels = predict(model, shapes, batch_size, k)
    preds = logits.argmax(axis=1)
    return EvalReport.build(preds, labels, model.config.n_classes, feats if retrieval else None)


@dataclass
class TrainResult:
    model: PVNet
    optimizer: Optimizer
    log: list[dict] = field(default_factory=list)
    best_overall: float = -1.0
    best_epoch: int = -1
    view_digests: list[str] = field(default_factory=list)


def train(config: TrainConfig, model_config: ModelConfig, train_set: list[Shape],
          val_set: list[Shape] | None = None, out_dir: str | os.PathLike | None = None,
          run_config: dict | None = None) -> TrainResult:
    """Train with the view CNN frozen for the first ``phase_a_epochs`` epochs, then jointly.

    Loss is cross entropy plus ``ortho_weight`` times the transform penalty.
    When ``out_dir`` is given, ``metrics.csv`` gains one row per epoch and
    ``checkpoint_best.pvck`` / ``checkpoint_final.pvck`` are written.
    """
    from pvnet.checkpoint import save_checkpoint

    if not train_set:
        raise ConfigError("training split is empty")
    model = PVNet(model_config, seed=config.seed)
    opt = Optimizer(model.params, config.optimizer, config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = sum(1 for _ in _batches(train_set, config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    result = TrainResult(model, opt)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
    has_views = model.view_cnn is not None
    step = 0
    try:
        for epoch in range(config.epochs):
            phase = "A" if epoch < config.phase_a_epochs else "B"
            if has_views:
                model.params.set_trainable("view_cnn", phase == "B")
                result.view_digests.append(model.params.digest("view_cnn"))
            order = rng.permutation(len(train_set))
            total_loss, seen = 0.0, 0
            for chunk in _batches(train_set, config.batch_size, order):
                model.params.zero_grad()
                res = run_batch(model, chunk, config.k)
                loss = model.loss(res, [s.label for s in chunk], config.ortho_weight)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step} "
                                        f"(lr {cosine_lr(config.lr, step, total_steps):.3g}, batch "
                                        f"{[s.id for s in chunk]})")
                T.backward(loss)
                opt.step(cosine_lr(config.lr, step, total_steps))
                step += 1
                total_loss += value * len(chunk)
                seen += len(chunk)
            report = evaluate(model, val_set or train_set, retrieval=False)
            row = {"epoch": epoch, "phase": phase, "loss": f"{total_loss / seen:.6f}",
                   "overall": f"{report.overall:.6f}", "mean_class": f"{report.mean_class:.6f}"}
            result.log.append(row)
            log.info("epoch %d phase %s loss %s overall %s", epoch, phase, row["loss"], row["overall"])
            if writer is not None:
                writer.writerow(row)
                log_fh.flush()
            if report.overall > result.best_overall:
                result.best_overall, result.best_epoch = report.overall, epoch
                if out is not None:
                    save_checkpoint(out / "checkpoint_best.pvck", model, opt, epoch + 1, run_config)
        if has_views:
            model.params.set_trainable("view_cnn", True)
            result.view_digests.append(model.params.digest("view_cnn"))
        if out is not None:
            save_checkpoint(out / "checkpoint_final.pvck", model, opt, config.epochs, run_config)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
