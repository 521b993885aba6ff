"""Desk-scale comparison of plain adversarial training against AT + FS loss."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import attacks
from .analysis import ThicknessConfig, boundary_thickness, similarity_report
from .data import DatasetSpec, load_dataset
from .models import ModelSpec, build_model
from .training import AttackSpec, TrainConfig, evaluate_robust, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectionalSetup:
    dataset: DatasetSpec = DatasetSpec("mnist-subset", 2000, 500, 1000, num_classes=10, seed=0)
    model: ModelSpec = ModelSpec("small-cnn", width=8, feature_dim=64)
    train: TrainConfig = TrainConfig(epochs=10, batch_size=64)
    lambda_fs: float = 0.1
    seeds: tuple = (0, 1, 2)
    thickness: ThicknessConfig = ThicknessConfig()
    eval_attack: AttackSpec = AttackSpec("PGD-20", "pgd", attacks.EPS_8, attacks.STEP_2, 20)


def run_arm(setup: DirectionalSetup, splits, seed: int, lambda_fs: float) -> dict:
    """Train one model and measure similarity, thickness and PGD-20 accuracy on the test split."""
    t0 = time.time()
    cfg = replace(setup.train, lambda_fs=lambda_fs, seed=seed)
    model = build_model(setup.model, splits.input_shape, splits.num_classes, seed=seed)
    state, best = train(cfg, splits.train.x, splits.train.y, splits.val.x, splits.val.y, model,
                        splits.num_classes)
    model.load_state_dict(best.state_dict)
    model.eval()
    test = splits.test
    report = evaluate_robust(model, test.x, test.y, [setup.eval_attack])
    x_adv = setup.eval_attack.run(model, test.x, test.y).inputs
    sims = similarity_report(model, test.x, x_adv, test.y, splits.num_classes)
    thick = boundary_thickness(model, test.x, replace(setup.thickness, seed=seed))
    diag = float(np.mean([m.diagonal_mean() for m in sims.values()]))
    off = float(np.mean([m.off_diagonal_mean() for m in sims.values()]))
    out = {
        "seed": seed, "lambda_fs": lambda_fs, "best_epoch": best.epoch,
        "clean_acc": report.clean_acc, "pgd20_acc": report.robust_acc[setup.eval_attack.name],
        "intra_similarity": diag, "inter_similarity": off,
        "intra_clean": sims["clean"].diagonal_mean(), "inter_clean": sims["clean"].off_diagonal_mean(),
        "intra_adv": sims["adversarial"].diagonal_mean(), "inter_adv": sims["adversarial"].off_diagonal_mean(),
        "thickness": thick.value, "thickness_pairs": thick.pairs_used,
        "seconds": time.time() - t0,
    }
    logger.info("arm %s", out)
    return out


def run_directional(setup: DirectionalSetup | None = None) -> dict:
    setup = setup or DirectionalSetup()
    splits = load_dataset(setup.dataset)
    rows = []
    for seed in setup.seeds:
        rows.append(run_arm(setup, splits, seed, 0.0))
        rows.append(run_arm(setup, splits, seed, setup.lambda_fs))
    return summarize(rows, setup.lambda_fs)


def summarize(rows: list[dict], lambda_fs: float) -> dict:
    base = [r for r in rows if r["lambda_fs"] == 0.0]
    fs = [r for r in rows if r["lambda_fs"] == lambda_fs]
    base_by_seed = {r["seed"]: r for r in base}

    def mean(rs, key):
        return float(np.mean([r[key] for r in rs]))

    thicker = sum(r["thickness"] > base_by_seed[r["seed"]]["thickness"] for r in fs)
    return {
        "rows": rows,
        "intra_gain": mean(fs, "intra_similarity") - mean(base, "intra_similarity"),
        "inter_drop": mean(base, "inter_similarity") - mean(fs, "inter_similarity"),
        "thicker_seeds": int(thicker),
        "seeds": len(fs),
        "pgd20_change_pp": 100 * (mean(fs, "pgd20_acc") - mean(base, "pgd20_acc")),
    }
