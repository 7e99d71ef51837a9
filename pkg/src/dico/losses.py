"""Training objectives.

Segmentation combo loss (weighted Dice + cross-entropy), the unsupervised
collaboration loss against a detached pseudo-label, and the two sides of
the projection-adversarial game (critic loss and generator loss).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from dico.volume import ShapeError, _as_tensor

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    alpha: float = 0.5  # Dice weight
    beta: float = 0.5  # cross-entropy weight
    lambda_u: float = 1.0  # unsupervised weight
    lambda_adv: float = 1.0  # adversarial weight

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lambda_u, self.lambda_adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")


@dataclass
class LossReport:
    l1_sup: float = 0.0
    l2_sup: float = 0.0
    l_unsup: float = 0.0
    l_adv: float = 0.0
    l_disc: float = 0.0
    l_total: float = 0.0

    def as_dict(self):
        return asdict(self)


def _check_grids(pred, target):
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[2:]:
        raise ShapeError(f"grid mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _foreground_target(target: torch.Tensor, num_fg: int) -> torch.Tensor:
    """Per-foreground-class soft/hard target planes, (B, K-1, ...)."""
    if target.shape[1] == 1:  # hard label mask
        return torch.cat(
            [(target == k).to(torch.get_default_dtype()) for k in range(1, num_fg + 1)], dim=1
        )
    return target[:, 1:]  # soft probability map: drop background channel


def dice_loss(pred_probs, target, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice over foreground channels; mean over channels if K > 2.

    ``pred_probs`` is post-softmax (B, K, ...); ``target`` is a hard
    (B, 1, ...) mask or a soft (B, K, ...) probability map.
    """
    pred = _as_tensor(pred_probs)
    target = _as_tensor(target)
    _check_grids(pred, target)
    fg_pred = pred[:, 1:]
    fg_tgt = _foreground_target(target, fg_pred.shape[1])
    dims = (0,) + tuple(range(2, pred.ndim))
    inter = (fg_pred * fg_tgt).sum(dim=dims)
    denom = fg_pred.sum(dim=dims) + fg_tgt.sum(dim=dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def ce_loss(pred_logits, target) -> torch.Tensor:
    """Mean per-voxel negative log-likelihood of the target class."""
    logits = _as_tensor(pred_logits)
    target = _as_tensor(target)
    _check_grids(logits, target)
    if target.shape[1] != 1:
        target = target.argmax(dim=1, keepdim=True)
    return F.cross_entropy(logits, target.squeeze(1).long())


def seg_loss(pred_logits, target, w: LossWeights) -> torch.Tensor:
    """alpha * Dice(softmax(logits)) + beta * CE(logits)."""
    logits = _as_tensor(pred_logits)
    out = 0.0
    if w.alpha:
        out = out + w.alpha * dice_loss(torch.softmax(logits, dim=1), target)
    if w.beta:
        out = out + w.beta * ce_loss(logits, target)
    return out if isinstance(out, torch.Tensor) else logits.sum() * 0.0


def unsup_loss(student_logits, teacher_probs, w: LossWeights, hard_ce: bool = True) -> torch.Tensor:
    """Collaboration loss: student vs the teacher's detached pseudo-label.

    The Dice term compares against the teacher's soft probabilities; the CE
    term against the teacher's argmax label unless ``hard_ce`` is False.
    """
    logits = _as_tensor(student_logits)
    probs = _as_tensor(teacher_probs).detach()
    out = 0.0
    if w.alpha:
        out = out + w.alpha * dice_loss(torch.softmax(logits, dim=1), probs)
    if w.beta:
        tgt = probs.argmax(dim=1, keepdim=True) if hard_ce else probs
        out = out + w.beta * ce_loss(logits, tgt)
    return out


def discriminator_loss(d_real, d_fake1, d_fake2) -> torch.Tensor:
    """Sigmoid BCE pushing real fused pairs to 1 and both fakes to 0."""
    ones = torch.ones_like(d_real)
    return (
        F.binary_cross_entropy_with_logits(d_real, ones)
        + F.binary_cross_entropy_with_logits(d_fake1, torch.zeros_like(d_fake1))
        + F.binary_cross_entropy_with_logits(d_fake2, torch.zeros_like(d_fake2))
    )


def adversarial_loss(d_fake1, d_fake2) -> torch.Tensor:
    """Generator side: push both fakes toward the critic's real label.

    Caller must have the critic's parameters frozen so no gradient reaches
    them through these logits.
    """
    return F.binary_cross_entropy_with_logits(
        d_fake1, torch.ones_like(d_fake1)
    ) + F.binary_cross_entropy_with_logits(d_fake2, torch.ones_like(d_fake2))
