"""``atfs-lab`` command line: train, eval, analyze, sweep.

Every run lives in ``<output_dir>/<config digest>/`` and holds::

    config.json            canonical config echo
    status.json            running | complete | failed
    metrics.csv            one row per epoch (METRIC_COLUMNS)
    checkpoint_best.pt     parameters + RNG state
    checkpoint_best.json   format version, epoch, metrics, config echo
    report.json            written by ``eval``
    features_2d.csv, features_raw.csv, similarity.csv, similarity_adv.csv,
    thickness.json         written by ``analyze``
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import torch

from . import config as config_mod
from .analysis import (boundary_thickness, export_features_2d, extract_features,
                       similarity_report, write_matrix_csv)
from .config import ConfigError, RunConfig
from .data import DataError, load_dataset
from .files import read_json, write_csv, write_json
from .models import build_model
from .training import (CheckpointError, TrainingDiverged, evaluate_robust, load_checkpoint,
                       save_checkpoint, train)

logger = logging.getLogger("atfs_lab")

METRIC_COLUMNS = ("epoch", "lr", "loss_adv", "loss_fs", "val_clean_acc", "val_robust_acc")
SWEEP_ALIASES = {"lambda_fs": "train.lambda_fs", "lambda_adv": "train.lambda_adv",
                 "eta1": "train.eta1", "eta2": "train.eta2", "seed": "train.seed"}


class RunLocked(RuntimeError):
    pass


@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for the lifetime of one process."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise RunLocked(f"{run_dir} is owned by process {pid}")
            lock.unlink(missing_ok=True)  # stale
    else:
        raise RunLocked(f"could not lock {run_dir}")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _status(run_dir: Path, state: str, **extra) -> None:
    write_json(run_dir / "status.json", {"state": state, **extra})


def _resolve_config(args) -> RunConfig:
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
    if getattr(args, "seed", None) is not None:
        raw = config_mod.set_path(raw, "train.seed", args.seed)
    if getattr(args, "epochs", None) is not None:
        raw = config_mod.set_path(raw, "train.epochs", args.epochs)
    if getattr(args, "output_dir", None) is not None:
        raw = config_mod.set_path(raw, "output_dir", args.output_dir)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        raw = config_mod.set_path(raw, key, config_mod.parse_value(value))
    return config_mod.from_dict(raw)


def _model_for(cfg: RunConfig, splits):
    return build_model(cfg.model, splits.input_shape, splits.num_classes, seed=cfg.train.seed)


def run_training(cfg: RunConfig) -> Path:
    run_dir = Path(cfg.output_dir) / cfg.digest()
    echo = cfg.to_dict()
    with run_lock(run_dir):
        _status(run_dir, "running")
        write_json(run_dir / "config.json", echo)
        splits = load_dataset(cfg.dataset)
        model = _model_for(cfg, splits)
        rows = []

        def on_epoch(row, state, model):
            rows.append(row)
            write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, rows)

        try:
            state, best = train(cfg.train, splits.train.x, splits.train.y, splits.val.x, splits.val.y,
                                model, splits.num_classes, config_echo=echo, on_epoch=on_epoch)
        except TrainingDiverged as e:
            _status(run_dir, "failed", reason=str(e), epoch=e.epoch)
            raise
        if not rows:
            write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, rows)
        save_checkpoint(best, run_dir / "checkpoint_best")
        _status(run_dir, "complete", best_epoch=state.best_epoch, best_val_robust_acc=state.best_robust,
                epochs=state.epoch)
    return run_dir


def _load_run(checkpoint_path) -> tuple[RunConfig, object, object, Path]:
    ckpt = load_checkpoint(checkpoint_path)
    cfg = config_mod.from_dict(ckpt.config)
    splits = load_dataset(cfg.dataset)
    model = _model_for(cfg, splits)
    try:
        model.load_state_dict(ckpt.state_dict)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not fit the configured model: {e}") from e
    model.eval()
    return cfg, ckpt, (model, splits), Path(checkpoint_path).parent


def _checkpoint_arg(args) -> Path:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "checkpoint_best"
    return path.with_suffix("")


def run_eval(checkpoint_path, suite=None, out=None) -> dict:
    cfg, ckpt, (model, splits), run_dir = _load_run(checkpoint_path)
    split = getattr(splits, cfg.eval.split)
    suite = suite if suite is not None else list(cfg.eval.suite)
    report = evaluate_robust(model, split.x, split.y, suite, cfg.eval.batch_size, seed=cfg.train.seed)
    payload = {"split": cfg.eval.split, "checkpoint_epoch": ckpt.epoch, **report.to_dict(),
               "suite": [s.__dict__ for s in suite], "config": ckpt.config}
    write_json(Path(out) if out else run_dir / "report.json", payload)
    return payload


def run_analysis(checkpoint_path, out_dir=None, plot: bool = False) -> dict:
    cfg, ckpt, (model, splits), run_dir = _load_run(checkpoint_path)
    out_dir = Path(out_dir) if out_dir else run_dir
    split = getattr(splits, cfg.analysis.split)
    x, y = split.x, split.y
    if cfg.analysis.max_samples is not None:
        x, y = x[:cfg.analysis.max_samples], y[:cfg.analysis.max_samples]
    x_adv = cfg.analysis.attack.run(model, x, y).inputs
    sims = similarity_report(model, x, x_adv, y, splits.num_classes)
    write_matrix_csv(out_dir / "similarity.csv", sims["clean"].values)
    write_matrix_csv(out_dir / "similarity_adv.csv", sims["adversarial"].values)

    feats = torch.cat([extract_features(model, x), extract_features(model, x_adv)])
    labels = torch.cat([y, y]).tolist()
    kinds = ["clean"] * len(y) + ["adversarial"] * len(y)
    export_features_2d(feats, labels, kinds, path=out_dir / "features_2d.csv")
    dim = feats.shape[1]
    raw_cols = ["node_id", "label", "kind"] + [f"f{j}" for j in range(dim)]
    raw_rows = [{"node_id": i, "label": labels[i], "kind": kinds[i],
                 **{f"f{j}": float(v) for j, v in enumerate(feats[i].tolist())}} for i in range(len(labels))]
    write_csv(out_dir / "features_raw.csv", raw_cols, raw_rows)

    thick = boundary_thickness(model, x, cfg.analysis.thickness)
    summary = {"value": thick.to_dict()["value"], "defined": thick.defined, "pairs_used": thick.pairs_used,
               "attempts": thick.attempts, "thickness_config": thick.config,
               "similarity": {k: {"intra_mean": m.diagonal_mean(), "inter_mean": m.off_diagonal_mean(),
                                  "undefined": m.undefined} for k, m in sims.items()},
               "checkpoint_epoch": ckpt.epoch, "config": ckpt.config}
    write_json(out_dir / "thickness.json", summary)
    if plot:
        _plot_heatmaps(out_dir, sims)
    return summary


def _plot_heatmaps(out_dir: Path, sims) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (name, m) in zip(axes, sims.items()):
        im = ax.imshow(m.values, vmin=-1, vmax=1, cmap="viridis")
        ax.set_title(f"{name} features")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_dir / "similarity.png", dpi=120)
    plt.close(fig)


def _parse_grid(items) -> list[tuple[str, list]]:
    axes = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        axes.append((SWEEP_ALIASES.get(key, key), [config_mod.parse_value(v) for v in values.split(",")]))
    return axes


SWEEP_COLUMNS_BASE = ("run", "best_epoch", "best_val_robust_acc", "clean_acc")


def run_sweep(args) -> Path:
    with open(args.config) as fh:
        base = json.load(fh)
    if args.output_dir:
        base = config_mod.set_path(base, "output_dir", args.output_dir)
    axes = _parse_grid(args.grid)
    rows, attack_names = [], []
    for combo in itertools.product(*[values for _, values in axes]):
        raw = base
        for (path, _), value in zip(axes, combo):
            raw = config_mod.set_path(raw, path, value)
        cfg = config_mod.from_dict(raw)
        run_dir = run_training(cfg)
        status = read_json(run_dir / "status.json")
        report = run_eval(run_dir / "checkpoint_best")
        attack_names = list(report["robust_acc"])
        rows.append({**{path: value for (path, _), value in zip(axes, combo)},
                     "run": run_dir.name, "best_epoch": status["best_epoch"],
                     "best_val_robust_acc": status["best_val_robust_acc"],
                     "clean_acc": report["clean_acc"], **report["robust_acc"]})
    out = Path(base.get("output_dir", "runs")) / "sweep_summary.csv"
    write_csv(out, [p for p, _ in axes] + list(SWEEP_COLUMNS_BASE) + attack_names, rows)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atfs-lab", description="Adversarial training with feature separability")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lambda_fs=0.5")

    e = sub.add_parser("eval", help="robust accuracy of a checkpoint on the configured split")
    e.add_argument("--checkpoint", required=True, help="checkpoint path (without suffix) or run directory")
    e.add_argument("--epsilon", type=float, help="override every attack's budget")
    e.add_argument("--out")

    a = sub.add_parser("analyze", help="similarity matrices, 2-D features and boundary thickness")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out-dir")
    a.add_argument("--plot", action="store_true", help="also render similarity.png")

    s = sub.add_parser("sweep", help="train + eval over a grid of config values")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("--output-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            run_dir = run_training(_resolve_config(args))
            print(run_dir)
        elif args.command == "eval":
            suite = None
            if args.epsilon is not None:
                cfg = config_mod.from_dict(load_checkpoint(_checkpoint_arg(args)).config)
                suite = [replace(s, epsilon=args.epsilon) for s in cfg.eval.suite]
            report = run_eval(_checkpoint_arg(args), suite, args.out)
            print(json.dumps({k: report[k] for k in ("clean_acc", "robust_acc", "violations")}))
        elif args.command == "analyze":
            summary = run_analysis(_checkpoint_arg(args), args.out_dir, args.plot)
            print(json.dumps({"thickness": summary["value"], "pairs_used": summary["pairs_used"]}))
        elif args.command == "sweep":
            print(run_sweep(args))
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, RunLocked, TrainingDiverged, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
