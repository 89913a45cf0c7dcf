"""``pvnet`` command-line tool.

Exit codes: 0 success, 2 invalid input (config, checkpoint mismatch, failed
gradient check), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("prep", "train", "eval", "retrieve", "ablate", "sweep", "gradcheck", "dump-masks")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

log = logging.getLogger("pvnet")


class UsageError(Exception):
    pass


def _limit_threads() -> None:
    value = os.environ.get("PVNET_THREADS")
    if not value:
        return
    if not value.isdigit() or int(value) < 1:
        raise UsageError(f"PVNET_THREADS must be a positive integer, got {value!r}")
    # only effective before numpy/numba start their pools, hence the lazy imports below
    for var in _THREAD_VARS:
        os.environ[var] = value
    if "numba" in sys.modules:
        import numba

        numba.set_num_threads(min(int(value), numba.config.NUMBA_NUM_THREADS))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvnet", description="Point cloud + multi-view shape recognition")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="RunConfig JSON (required except for gradcheck)")
    p.add_argument("--checkpoint", help="checkpoint file for eval/retrieve/sweep/dump-masks")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# --- helpers -------------------------------------------------------------------------

def _load_config(args):
    from pvnet.config import RunConfig

    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must fit in an unsigned 64-bit integer")
        cfg.seed = args.seed
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out_dir = args.out
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return cfg, out


def _splits(cfg, names=("train", "test")):
    from pvnet.dataset import DatasetManifest, load_split

    manifest = DatasetManifest.load(cfg.manifest)
    classes = manifest.classes
    loaded = []
    for name in names:
        try:
            loaded.append(load_split(manifest, cfg.cache_dir, name, classes))
        except FileNotFoundError as exc:
            raise UsageError(f"cache incomplete ({exc.filename}); run `pvnet prep` first") from None
    return manifest, classes, loaded


def _load_model(args, cfg, n_classes):
    from pvnet.checkpoint import load_checkpoint, read_header
    from pvnet.config import config_diff

    if args.checkpoint is None:
        raise UsageError(f"{args.command} needs --checkpoint")
    header, _ = read_header(args.checkpoint)
    saved = header["model_config"]
    wanted = cfg.model_config(n_classes, arm=saved.get("arm")).to_dict()
    diff = config_diff(wanted, saved)
    if diff:
        raise UsageError("checkpoint does not match config:\n  " + "\n  ".join(diff))
    return load_checkpoint(args.checkpoint).model


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# --- commands ------------------------------------------------------------------------

def cmd_prep(args) -> int:
    from pvnet.dataset import DatasetManifest, prepare_cache

    cfg, out = _load_config(args)
    manifest = DatasetManifest.load(cfg.manifest)
    summary = prepare_cache(manifest, cfg.cache_dir, cfg.n_points, cfg.n_views, cfg.height, cfg.width, cfg.seed)
    _write_json(out / "prep.json", summary)
    print(f"prepared {len(summary['written'])}, up to date {len(summary['skipped'])}, "
          f"failed {len(summary['failed'])}")
    for sid, err in summary["failed"].items():
        print(f"  failed {sid}: {err}")
    return 1 if summary["failed"] else 0


def cmd_train(args) -> int:
    from pvnet.train import train

    cfg, out = _load_config(args)
    _, classes, (train_set, test_set) = _splits(cfg)
    result = train(cfg.train_config(), cfg.model_config(len(classes)), train_set, test_set, out, cfg.to_dict())
    last = result.log[-1]
    print(f"trained {cfg.arm} for {cfg.epochs} epochs: final overall {last['overall']}, "
          f"best {result.best_overall:.6f} at epoch {result.best_epoch}")
    print(f"checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    from pvnet.experiments import write_csv
    from pvnet.plots import pr_figure
    from pvnet.train import evaluate

    cfg, out = _load_config(args)
    _, classes, (test_set,) = _splits(cfg, ("test",))
    model = _load_model(args, cfg, len(classes))
    report = evaluate(model, test_set)
    doc = {"classes": classes, **report.to_dict()}
    _write_json(out / "eval.json", doc)
    row = {"overall": f"{report.overall:.6f}", "mean_class": f"{report.mean_class:.6f}",
           "mAP": f"{report.mAP:.6f}"}
    write_csv(out / "eval.csv", [row], ("overall", "mean_class", "mAP"))
    write_csv(out / "pr_curve.csv", [{"recall": r, "precision": p} for r, p in
                                     zip(report.pr_recall, report.pr_precision)], ("recall", "precision"))
    pr_figure({model.config.arm: (report.pr_recall, report.pr_precision)}, out / "pr_curve.png")
    print(f"overall {row['overall']}  mean_class {row['mean_class']}  mAP {row['mAP']}")
    for name, acc in zip(classes, report.per_class):
        print(f"  {name:>10s} {acc:.4f}")
    return 0


def cmd_retrieve(args) -> int:
    import numpy as np

    from pvnet.experiments import write_csv
    from pvnet.metrics import map_score, rank_all
    from pvnet.plots import pr_figure
    from pvnet.train import predict

    cfg, out = _load_config(args)
    _, classes, (test_set,) = _splits(cfg, ("test",))
    model = _load_model(args, cfg, len(classes))
    _, feats, labels = predict(model, test_set)
    rankings = rank_all(feats, exclude_self=True)
    report = map_score(rankings, [labels == labels[i] for i in range(len(labels))])
    ids = [s.id for s in test_set]
    top = cfg.retrieve_top
    write_csv(out / "rankings.csv",
              [{"query": ids[i], "ap": f"{ap:.6f}", "top": " ".join(ids[j] for j in r[:top])}
               for i, (r, ap) in enumerate(zip(rankings, report.ap))], ("query", "ap", "top"))
    _write_json(out / "retrieval.json", {"mAP": report.mAP, "n_queries": len(ids),
                                         "pr_curve": {"recall": report.recall.tolist(),
                                                      "precision": report.precision.tolist()}})
    pr_figure({model.config.arm: (report.recall, report.precision)}, out / "retrieval_pr.png")
    print(f"mAP {report.mAP:.6f} over {len(ids)} queries (self-matches excluded)")
    print(f"median AP {np.median(report.ap):.4f}, worst {report.ap.min():.4f}")
    return 0


def cmd_ablate(args) -> int:
    from pvnet.experiments import median_by_arm, run_ablation
    from pvnet.plots import ablation_figure

    cfg, out = _load_config(args)
    _, classes, (train_set, test_set) = _splits(cfg)
    base = cfg.model_config(len(classes))
    rows, _ = run_ablation(cfg.train_config(), train_set, test_set, cfg.arms, cfg.seeds, base, out)
    medians = median_by_arm(rows)
    _write_json(out / "ablation.json", {"median_overall": medians, "median_mAP": median_by_arm(rows, "mAP"),
                                        "seeds": cfg.seeds})
    ablation_figure(rows, out / "ablation.png")
    for arm, acc in medians.items():
        print(f"{arm:>12s} median overall {acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from pvnet.checkpoint import load_checkpoint
    from pvnet.experiments import ring_renderer, robustness_sweep
    from pvnet.plots import sweep_figure

    cfg, out = _load_config(args)
    manifest, classes, (test_set,) = _splits(cfg, ("test",))
    model = _load_model(args, cfg, len(classes))
    models = {model.config.arm: model}
    if cfg.compare_checkpoint:
        other = load_checkpoint(cfg.compare_checkpoint).model
        models[f"{other.config.arm} (compare)" if other.config.arm in models else other.config.arm] = other
    rows = robustness_sweep(models, test_set, cfg.sweep_axis, cfg.sweep_levels, cfg.seed,
                            render=ring_renderer(manifest, cfg.height, cfg.width), out_path=out / "sweep.csv")
    sweep_figure(rows, out / "sweep.png")
    for r in rows:
        print(f"{r['model']:>12s} {cfg.sweep_axis}={r['level']:<5d} overall {r['overall']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from pvnet.experiments import write_csv
    from pvnet.gradcheck import TOLERANCE, run_all

    out = Path(args.out or ".")
    if args.config is not None:
        _, out = _load_config(args)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else range(10)
    rows = run_all(seeds)
    write_csv(out / "gradcheck.csv", rows, ("op", "seed", "max_rel_err", "passed"))
    worst: dict[str, float] = {}
    for r in rows:
        worst[r["op"]] = max(worst.get(r["op"], 0.0), r["max_rel_err"])
    for op, err in worst.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {op:<24s} {err:.2e}")
    failed = [op for op, err in worst.items() if not err < TOLERANCE]
    print(f"{len(worst) - len(failed)}/{len(worst)} checks under {TOLERANCE:g}")
    return 2 if failed else 0


def cmd_dump_masks(args) -> int:
    from pvnet.fusion import export_masks

    cfg, out = _load_config(args)
    _, classes, (test_set,) = _splits(cfg, ("test",))
    model = _load_model(args, cfg, len(classes))
    if model.config.arm != "full":
        raise UsageError(f"checkpoint arm {model.config.arm!r} has no attention masks")
    dest = out / "masks"
    for shape in test_set[:cfg.mask_shapes]:
        files = export_masks(model, shape.points, shape.views, dest, shape.id, k=cfg.k)
        print(f"{shape.id}: {', '.join(f.name for f in files)}")
    return 0


HANDLERS = {"prep": cmd_prep, "train": cmd_train, "eval": cmd_eval, "retrieve": cmd_retrieve,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "dump-masks": cmd_dump_masks}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _limit_threads()
    except UsageError as exc:
        print(f"pvnet: {exc}", file=sys.stderr)
        return 2
    from pvnet.checkpoint import CheckpointError
    from pvnet.train import ConfigError

    try:
        return HANDLERS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"pvnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"pvnet {args.command}: runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
