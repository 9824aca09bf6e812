"""Adversarial and reconstruction objectives.

Scores are discriminator probabilities; they are clamped to ``[EPS, 1 - EPS]``
before any log. Every loss averages over patch positions and batch.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = ["EPS", "LossBundle", "d_loss", "g_adv_loss", "l1_loss", "g_total"]

EPS = 1e-7


@dataclass
class LossBundle:
    d_loss: float
    g_adv_loss: float
    g_l1_loss: float
    g_total: float
    alpha: float

    def as_row(self) -> tuple:
        return self.d_loss, self.g_adv_loss, self.g_l1_loss, self.g_total


def _clamped(scores: Tensor) -> Tensor:
    if scores.size == 0:
        raise ShapeError("empty score map")
    return T.clip(scores, EPS, 1.0 - EPS)


def d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake)))."""
    if real_scores.shape != fake_scores.shape:
        raise ShapeError(f"real and fake score maps differ: {real_scores.shape} vs {fake_scores.shape}")
    real = _clamped(real_scores)
    fake = _clamped(fake_scores)
    return T.neg(T.add(T.mean(T.log(real)), T.mean(T.log(1.0 - fake))))


def g_adv_loss(fake_scores: Tensor, saturating: bool = False) -> Tensor:
    """Generator adversarial loss.

    The default non-saturating form is ``-mean(log D(fake))``. With
    ``saturating=True`` the literal minimax term ``mean(log(1 - D(fake)))`` is
    returned instead; it is non-positive and flat when D confidently rejects.
    """
    fake = _clamped(fake_scores)
    if saturating:
        return T.mean(T.log(1.0 - fake))
    return T.neg(T.mean(T.log(fake)))


def l1_loss(generated: Tensor, ground_truth: Tensor) -> Tensor:
    """Mean absolute difference between a generated mask and its ground truth."""
    if generated.shape != ground_truth.shape:
        raise ShapeError(f"l1_loss: shapes {generated.shape} and {ground_truth.shape} differ")
    return T.mean(T.absolute(T.sub(generated, ground_truth)))


def g_total(adv, l1, alpha: float):
    """adv + alpha * l1 for tensors or plain floats; alpha must be positive."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return adv + l1 * alpha
