"""Adversarial training with the feature-separability regulariser.

Each step: draw a minibatch, craft adversarial inputs with PGD, extract the
minibatch subgraph, and take one SGD step (momentum, weight decay) on::

    lambda_adv * L_adv  -  lambda_fs * L_FS

After every epoch the model is scored on the validation split with PGD and
the epoch with the best robust accuracy is kept.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from . import attacks
from .atg import LinkWeights, build_atg, subgraph_for_batch
from .attacks import AttackConfig
from .files import atomic_write
from .fs_loss import FsLossValue, fs_loss_from_features

logger = logging.getLogger(__name__)

VARIANTS = ("AT", "TRADES", "MART")
CHECKPOINT_FORMAT = 1
FULL_EPOCHS = 120
FULL_MILESTONES = (75, 90)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, state: "TrainState"):
        super().__init__(f"non-finite objective at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.state = state


class CheckpointError(RuntimeError):
    pass


def _inner_loss_kind(variant: str) -> str:
    return "kl" if variant == "TRADES" else "ce"


@dataclass(frozen=True)
class TrainConfig:
    lambda_adv: float = 1.0
    lambda_fs: float = 0.1
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0
    adv_variant: str = "AT"
    trades_beta: float = 5.0  # 1/lambda in the TRADES objective
    mart_beta: float = 5.0
    temperature: float = 1.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    select_attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(steps=10, random_start=False))
    epochs: int = FULL_EPOCHS
    batch_size: int = 128
    lr: float = 0.1
    lr_divisor: float = 10.0
    milestones: tuple | None = None  # None: scale 75/90 of 120 to `epochs`
    momentum: float = 0.9
    weight_decay: float = 2e-4
    eval_batch_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.adv_variant not in VARIANTS:
            raise ValueError(f"unknown adv_variant {self.adv_variant!r}, expected one of {VARIANTS}")
        if self.lambda_adv < 0 or self.lambda_fs < 0:
            raise ValueError("lambda_adv and lambda_fs must be >= 0")
        LinkWeights(self.eta1, self.eta2, self.eta3)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.milestones is not None:
            m = tuple(self.milestones)
            if any(b <= a for a, b in zip(m, m[1:])) or any(e >= self.epochs or e < 0 for e in m):
                raise ValueError(f"milestones {m} must be strictly increasing and inside [0, {self.epochs})")
            object.__setattr__(self, "milestones", m)
        wanted = _inner_loss_kind(self.adv_variant)
        if self.attack.loss_kind != wanted:
            object.__setattr__(self, "attack", replace(self.attack, loss_kind=wanted))

    @property
    def link_weights(self) -> LinkWeights:
        return LinkWeights(self.eta1, self.eta2, self.eta3)

    def schedule(self) -> tuple:
        if self.milestones is not None:
            return self.milestones
        return scaled_milestones(self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones) if self.milestones is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("attack", "select_attack"):
            if key in d and isinstance(d[key], dict):
                d[key] = AttackConfig(**d[key])
        if d.get("milestones") is not None:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


def scaled_milestones(epochs: int) -> tuple:
    """The 75/90-of-120 decay points rescaled to ``epochs``; exact for 120."""
    if epochs == FULL_EPOCHS:
        return FULL_MILESTONES
    out = []
    for m in FULL_MILESTONES:
        e = round(m * epochs / FULL_EPOCHS)
        if 0 < e < epochs and (not out or e > out[-1]):
            out.append(e)
    return tuple(out)


def lr_at(epoch: int, base_lr: float = 0.1, milestones: Sequence[int] = FULL_MILESTONES,
          divisor: float = 10.0) -> float:
    """Piecewise-constant rate: ``base_lr`` divided by ``divisor`` at each milestone passed."""
    k = sum(epoch >= m for m in milestones)
    return base_lr / divisor ** k


# ---------------------------------------------------------------- objective

def mart_loss(logits_clean, logits_adv, y, beta: float) -> torch.Tensor:
    """MART: boosted CE on adversarial logits + beta * confidence-weighted KL."""
    adv_probs = F.softmax(logits_adv, dim=1)
    top2 = torch.argsort(adv_probs, dim=1)[:, -2:]
    runner_up = torch.where(top2[:, -1] == y, top2[:, -2], top2[:, -1])
    boosted = F.cross_entropy(logits_adv, y) + F.nll_loss(torch.log(1.0001 - adv_probs + 1e-12), runner_up)
    nat_probs = F.softmax(logits_clean, dim=1)
    true_probs = nat_probs.gather(1, y[:, None]).squeeze(1)
    kl = F.kl_div(torch.log(adv_probs + 1e-12), nat_probs, reduction="none").sum(dim=1)
    return boosted + beta * (kl * (1.0 - true_probs)).mean()


def adv_loss(variant: str, logits_clean, logits_adv, y, trades_beta: float = 5.0,
             mart_beta: float = 5.0) -> torch.Tensor:
    """Adversarial loss from precomputed logits.

    ``logits_clean`` may be None for plain AT.
    """
    if variant == "AT":
        return F.cross_entropy(logits_adv, y)
    if variant == "TRADES":
        kl = attacks.kl_to_clean(logits_adv, logits_clean).mean()
        return F.cross_entropy(logits_clean, y) + trades_beta * kl
    if variant == "MART":
        return mart_loss(logits_clean, logits_adv, y, mart_beta)
    raise ValueError(f"unknown adversarial-loss variant {variant!r}")


def total_objective(adv, fs: FsLossValue | torch.Tensor | float, lambda_adv: float, lambda_fs: float):
    fs_total = fs.total if isinstance(fs, FsLossValue) else fs
    for v in (adv, fs_total):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise ValueError("non-finite objective input")
    return lambda_adv * adv - lambda_fs * fs_total


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    best_robust: float = -1.0
    best_epoch: int = -1
    history: list = field(default_factory=list)

    def record(self, row: dict) -> bool:
        """Append an epoch row; True when it becomes the new best (ties keep the earlier)."""
        self.history.append(row)
        self.epoch = len(self.history)
        if row["val_robust_acc"] > self.best_robust:
            self.best_robust = row["val_robust_acc"]
            self.best_epoch = row["epoch"]
            return True
        return False


@dataclass
class Checkpoint:
    state_dict: dict
    config: dict
    epoch: int
    metrics: dict
    rng_state: torch.Tensor | None = None
    format_version: int = CHECKPOINT_FORMAT

    def metadata(self) -> dict:
        return {"format_version": self.format_version, "epoch": self.epoch,
                "metrics": self.metrics, "config": self.config}


def save_checkpoint(ckpt: Checkpoint, path) -> tuple[Path, Path]:
    """Write ``<path>.pt`` (parameters, RNG) and ``<path>.json`` (metadata)."""
    path = Path(path)
    blob, meta = path.with_suffix(".pt"), path.with_suffix(".json")
    payload = {"format_version": ckpt.format_version, "state_dict": ckpt.state_dict,
               "rng_state": ckpt.rng_state}
    atomic_write(blob, lambda fh: torch.save(payload, fh))
    text = json.dumps(ckpt.metadata(), indent=2, sort_keys=True).encode()
    atomic_write(meta, lambda fh: fh.write(text))
    return blob, meta


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob, meta_path = path.with_suffix(".pt"), path.with_suffix(".json")
    if not blob.exists() or not meta_path.exists():
        raise CheckpointError(f"checkpoint {path} needs both {blob.name} and {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    payload = torch.load(blob, map_location="cpu", weights_only=True)
    for version in (meta.get("format_version"), payload.get("format_version")):
        if version != CHECKPOINT_FORMAT:
            raise CheckpointError(f"checkpoint format {version} != supported {CHECKPOINT_FORMAT}")
    return Checkpoint(state_dict=payload["state_dict"], config=meta["config"], epoch=meta["epoch"],
                      metrics=meta["metrics"], rng_state=payload.get("rng_state"))


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class AttackSpec:
    name: str
    kind: str  # fgsm | pgd | cw
    epsilon: float = attacks.EPS_8
    step_size: float = attacks.STEP_2
    steps: int = 20
    random_start: bool = False

    def run(self, model, x, y, generator=None):
        if self.kind == "fgsm":
            return attacks.fgsm(model, x, y, self.epsilon)
        cfg = AttackConfig(self.epsilon, self.step_size, self.steps, self.random_start,
                           "cw" if self.kind == "cw" else "ce")
        if self.kind in ("pgd", "cw"):
            return attacks.pgd(model, x, y, cfg, generator)
        raise ValueError(f"unknown attack kind {self.kind!r}")


def default_suite(epsilon: float = attacks.EPS_8, step_size: float = attacks.STEP_2) -> list[AttackSpec]:
    return [
        AttackSpec("FGSM", "fgsm", epsilon),
        AttackSpec("PGD-20", "pgd", epsilon, step_size, 20),
        AttackSpec("CW-inf", "cw", epsilon, step_size, 20),
    ]


@dataclass
class RobustReport:
    n: int
    clean_acc: float
    robust_acc: dict
    violations: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _accuracy(model, x, y, batch_size) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            correct += int((model(x[i:i + batch_size]).argmax(1) == y[i:i + batch_size]).sum())
    return correct / len(y)


def evaluate_robust(model, x, y, suite: Sequence[AttackSpec], batch_size: int = 500,
                    seed: int = 0) -> RobustReport:
    """Clean accuracy plus accuracy under each attack; every attack output is re-checked for feasibility."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    clean = _accuracy(model, x, y, batch_size)
    robust, violations = {}, {}
    for spec in suite:
        correct = bad = 0
        for i in range(0, len(y), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            adv = spec.run(model, xb, yb, gen).inputs
            bad += attacks.feasibility_violations(adv, xb, spec.epsilon)
            with torch.no_grad():
                correct += int((model(adv).argmax(1) == yb).sum())
        robust[spec.name] = correct / len(y)
        violations[spec.name] = bad
    model.train(was_training)
    return RobustReport(n=len(y), clean_acc=clean, robust_acc=robust, violations=violations)


def _robust_accuracy(model, x, y, cfg: AttackConfig, batch_size: int) -> float:
    correct = 0
    for i in range(0, len(y), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        adv = attacks.pgd(model, xb, yb, cfg).inputs
        with torch.no_grad():
            correct += int((model(adv).argmax(1) == yb).sum())
    return correct / len(y)


# ---------------------------------------------------------------- training loop

def train_step(model, optimizer, cfg: TrainConfig, graph, idx, x, y, generator) -> dict:
    """One minibatch of the training loop; returns the step's loss values."""
    model.eval()
    x_adv = attacks.pgd(model, x, y, cfg.attack, generator).inputs
    sub = subgraph_for_batch(graph, idx)
    model.train()

    needs_clean = cfg.lambda_fs > 0 or cfg.adv_variant != "AT"
    if needs_clean:
        logits_clean, feat_clean = model.forward_with_features(x)
        logits_adv, feat_adv = model.forward_with_features(x_adv)
        fs = fs_loss_from_features(feat_clean, feat_adv, sub, cfg.link_weights, cfg.temperature)
        fs_total = fs.total
    else:
        # keep the plain adversarial-training compute path; FS value is only logged
        logits_clean = None
        logits_adv = model(x_adv)
        with torch.no_grad():
            model.eval()
            _, fc = model.forward_with_features(x)
            _, fa = model.forward_with_features(x_adv)
            model.train()
            fs_total = fs_loss_from_features(fc, fa, sub, cfg.link_weights, cfg.temperature).total

    adv = adv_loss(cfg.adv_variant, logits_clean, logits_adv, y, cfg.trades_beta, cfg.mart_beta)
    if cfg.lambda_fs > 0:
        objective = cfg.lambda_adv * adv - cfg.lambda_fs * fs_total
    else:
        objective = cfg.lambda_adv * adv
    if not torch.isfinite(objective):
        return {"finite": False}
    optimizer.zero_grad()
    objective.backward()
    optimizer.step()
    return {"finite": True, "loss_adv": adv.item(), "loss_fs": fs_total.item(),
            "objective": objective.item(), "size": len(y)}


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def train(cfg: TrainConfig, train_x, train_y, val_x, val_y, model, num_classes: int | None = None,
          config_echo: dict | None = None, on_epoch: Callable | None = None,
          max_steps: int | None = None, on_step: Callable | None = None):
    """Run the training loop; returns ``(TrainState, best Checkpoint)``.

    ``on_epoch(row, state, model)`` is called after each epoch's validation
    and ``on_step(step, out, model)`` after each optimizer step.
    ``max_steps`` stops early after that many optimizer steps (tests only;
    the partial epoch is neither validated nor recorded).
    """
    graph = build_atg(train_y.numpy(), cfg.link_weights, num_classes)
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    milestones = cfg.schedule()
    echo = config_echo if config_echo is not None else cfg.to_dict()
    state = TrainState()
    best = Checkpoint(copy.deepcopy(model.state_dict()), echo, epoch=-1, metrics={},
                      rng_state=generator.get_state())
    n = len(train_y)
    steps = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, milestones, cfg.lr_divisor)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=generator)
        sums = {"loss_adv": 0.0, "loss_fs": 0.0, "objective": 0.0}
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out = train_step(model, optimizer, cfg, graph, idx.numpy(), train_x[idx], train_y[idx], generator)
            if not out["finite"]:
                raise TrainingDiverged(epoch, start // cfg.batch_size, state)
            for k in sums:
                sums[k] += out[k] * out["size"]
            seen += out["size"]
            steps += 1
            if on_step is not None:
                on_step(steps, out, model)
            if max_steps is not None and steps >= max_steps:
                return state, best

        model.eval()
        row = {"epoch": epoch, "lr": lr,
               "loss_adv": sums["loss_adv"] / seen, "loss_fs": sums["loss_fs"] / seen,
               "val_clean_acc": _accuracy(model, val_x, val_y, cfg.eval_batch_size),
               "val_robust_acc": _robust_accuracy(model, val_x, val_y, cfg.select_attack, cfg.eval_batch_size)}
        model.train()
        if state.record(row):
            best = Checkpoint(copy.deepcopy(model.state_dict()), echo, epoch=epoch,
                              metrics=dict(row), rng_state=generator.get_state())
        logger.info("epoch %d lr %.4g adv %.4f fs %.4f val clean %.4f robust %.4f", epoch, lr,
                    row["loss_adv"], row["loss_fs"], row["val_clean_acc"], row["val_robust_acc"])
        if on_epoch is not None:
            on_epoch(row, state, model)
    return state, best
