"""L-infinity attacks: FGSM, PGD (cross-entropy / CW margin / TRADES KL) and L2 PGD.

All attacks keep the model's parameters untouched and return inputs inside
both the epsilon ball around ``x`` and the [0, 1] box.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "cw", "kl")
EPS_8 = 8 / 255
STEP_2 = 2 / 255


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = EPS_8
    step_size: float = STEP_2
    steps: int = 10
    random_start: bool = True
    loss_kind: str = "ce"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when steps > 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}, expected one of {LOSS_KINDS}")


@dataclass
class PerturbedBatch:
    inputs: torch.Tensor
    loss: torch.Tensor  # per-example attack loss at the returned inputs


def margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-example ``max_{j != y} z_j - z_y``; positive means misclassified."""
    true = logits.gather(1, y[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    return others.max(dim=1).values - true


def kl_to_clean(adv_logits: torch.Tensor, clean_logits: torch.Tensor) -> torch.Tensor:
    """Per-example KL(p_clean || p_adv), the TRADES inner-max loss."""
    return F.kl_div(F.log_softmax(adv_logits, dim=1), F.softmax(clean_logits, dim=1),
                    reduction="none").sum(dim=1)


def attack_loss(kind: str, logits, y, clean_logits=None) -> torch.Tensor:
    if kind == "ce":
        return F.cross_entropy(logits, y, reduction="none")
    if kind == "cw":
        return margin_loss(logits, y)
    if kind == "kl":
        return kl_to_clean(logits, clean_logits)
    raise ValueError(f"unknown loss kind {kind!r}")


def _wide(t: torch.Tensor) -> torch.Tensor:
    # differences of float32 values are exact in float64
    return t.double() if t.dtype in (torch.float16, torch.bfloat16, torch.float32) else t


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Project onto the epsilon ball around ``x`` intersected with [0, 1].

    ``x - epsilon`` rounds in the working precision and can land a hair
    outside the ball, so boundary entries are stepped one ulp towards ``x``
    until the distance measured in wide precision is within budget.
    """
    wx = _wide(x)
    x_adv = torch.min(torch.max(_wide(x_adv), wx - epsilon), wx + epsilon).to(x.dtype)
    for _ in range(4):
        gap = _wide(x_adv) - _wide(x)
        outside = gap.abs() > epsilon
        if not outside.any():
            break
        x_adv = torch.where(outside, torch.nextafter(x_adv, x), x_adv)
    return x_adv.clamp(0.0, 1.0)


def _input_grad(model, x_adv, y, kind, clean_logits):
    x_adv = x_adv.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = attack_loss(kind, model(x_adv), y, clean_logits)
        grad, = torch.autograd.grad(loss.sum(), x_adv)
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).flatten(1).any(1).nonzero().flatten().tolist()
        raise AttackError(f"non-finite input gradient for examples {bad[:10]}")
    return grad


def _final_loss(model, x_adv, y, kind, clean_logits):
    with torch.no_grad():
        return attack_loss(kind, model(x_adv), y, clean_logits)


def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float) -> PerturbedBatch:
    """One signed-gradient step of size epsilon on the cross-entropy, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = x.detach()
    grad = _input_grad(model, x, y, "ce", None)
    x_adv = project_linf(_wide(x) + epsilon * grad.sign(), x, epsilon)
    return PerturbedBatch(x_adv, _final_loss(model, x_adv, y, "ce", None))


def pgd(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
        generator: torch.Generator | None = None) -> PerturbedBatch:
    """Projected sign-gradient ascent on the loss selected by ``cfg.loss_kind``.

    Random starts are uniform in the epsilon ball, except for the KL loss
    which uses the small Gaussian jitter of the TRADES reference code (the
    KL gradient vanishes exactly at ``x``).
    """
    x = x.detach()
    clean_logits = None
    if cfg.loss_kind == "kl":
        with torch.no_grad():
            clean_logits = model(x)

    x_adv = x.clone()
    if cfg.random_start and cfg.epsilon > 0:
        if cfg.loss_kind == "kl":
            noise = 0.001 * torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        else:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            noise = (2 * noise - 1) * cfg.epsilon
        x_adv = project_linf(_wide(x) + noise, x, cfg.epsilon)

    for _ in range(cfg.steps):
        grad = _input_grad(model, x_adv, y, cfg.loss_kind, clean_logits)
        x_adv = project_linf(_wide(x_adv) + cfg.step_size * grad.sign(), x, cfg.epsilon)
    return PerturbedBatch(x_adv, _final_loss(model, x_adv, y, cfg.loss_kind, clean_logits))


def cw_pgd(model, x, y, cfg: AttackConfig, generator: torch.Generator | None = None) -> PerturbedBatch:
    """PGD on the CW margin loss."""
    return pgd(model, x, y, replace(cfg, loss_kind="cw"), generator)


def pgd_l2(model, x: torch.Tensor, y: torch.Tensor, epsilon: float, step_size: float, steps: int) -> torch.Tensor:
    """Untargeted L2 PGD on the cross-entropy, no random start, box-clipped.

    Used to pair clean points with boundary-crossing points for the
    boundary-thickness measurement.
    """
    x = x.detach()
    x_adv = x.clone()
    dims = (-1,) + (1,) * (x.ndim - 1)
    for _ in range(steps):
        grad = _input_grad(model, x_adv, y, "ce", None)
        gnorm = grad.flatten(1).norm(dim=1).clamp_min(1e-12).view(dims)
        x_adv = x_adv + step_size * grad / gnorm
        delta = x_adv - x
        dnorm = delta.flatten(1).norm(dim=1).view(dims)
        delta = delta * torch.clamp(epsilon / dnorm.clamp_min(1e-12), max=1.0)
        x_adv = (x + delta).clamp(0.0, 1.0)
    return x_adv.detach()


def feasibility_violations(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> int:
    """Count entries outside the epsilon ball or the [0, 1] box."""
    outside_ball = (_wide(x_adv) - _wide(x)).abs() > epsilon
    outside_box = (x_adv < 0) | (x_adv > 1)
    return int((outside_ball | outside_box).sum())
