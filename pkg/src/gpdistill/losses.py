"""Objective terms for anchor-based distillation.

The adversarial terms use least squares against fixed labels. The perceptual term
is an L1 feature distance normalized by the tapped layer's C*H*W. Everything is
composed affinely: anchor terms plus weighted augmented terms, with the
perceptual total scaled by ``mu``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .exceptions import ConfigurationError, ContractError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    mu: float = 5.0
    lsgan_real_label: float = 1.0
    lsgan_fake_label: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.mu) < 0:
            raise ConfigurationError("loss weights must be >= 0")

    @classmethod
    def literal(cls, **kw):
        """Labels as printed in the original objective: real data toward 0, generated toward 1."""
        return cls(lsgan_real_label=0.0, lsgan_fake_label=1.0, **kw)


@dataclass(frozen=True)
class AdvTerm:
    """An adversarial loss value tagged with the discriminator that produced it."""

    value: torch.Tensor
    discriminator: str  # "fine" | "coarse"


def _nonempty(t, name):
    if t.numel() == 0:
        raise ContractError(f"{name} is empty")


def lsgan_d_loss(real_scores, fake_scores, w: LossWeights = LossWeights()):
    _nonempty(real_scores, "real_scores")
    _nonempty(fake_scores, "fake_scores")
    return ((real_scores - w.lsgan_real_label) ** 2).mean() + (
        (fake_scores - w.lsgan_fake_label) ** 2
    ).mean()


def lsgan_g_loss(fake_scores, w: LossWeights = LossWeights()):
    _nonempty(fake_scores, "fake_scores")
    return ((fake_scores - w.lsgan_real_label) ** 2).mean()


def perceptual_from_features(fx: dict, fy: dict, taps=None):
    """Sum over taps of mean |fx_j - fy_j|; the mean realizes the 1/(C_j H_j W_j)
    normalization and averages over the batch."""
    taps = sorted(fx) if taps is None else taps
    total = 0.0
    for j in taps:
        a, b = fx[j], fy[j]
        if a.shape != b.shape:
            raise ContractError(f"feature shapes differ at tap {j}: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + (a - b).abs().mean()
    return total


def perceptual_loss(x, y, extractor, taps=None):
    if tuple(x.shape) != tuple(y.shape):
        raise ContractError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    taps = extractor.spec.layer_taps if taps is None else taps
    return perceptual_from_features(extractor(x), extractor(y), taps)


def combined_adv_loss(anchor_term: AdvTerm | None, augmented_term: AdvTerm | None, w: LossWeights):
    """Fine-discriminator anchor term plus ``lambda1`` times the coarse augmented term.

    Either term may be ``None`` when the current batch holds no data of that kind.
    """
    if anchor_term is not None and anchor_term.discriminator != "fine":
        raise ContractError("anchor data must be scored by the fine-patch discriminator")
    if augmented_term is not None and augmented_term.discriminator != "coarse":
        raise ContractError("augmented data must be scored by the coarse-patch discriminator")
    total = 0.0
    if anchor_term is not None:
        total = total + anchor_term.value
    if augmented_term is not None:
        total = total + w.lambda1 * augmented_term.value
    return total


def combined_per_loss(anchor_per, augmented_per, w: LossWeights):
    total = 0.0
    if anchor_per is not None:
        total = total + anchor_per
    if augmented_per is not None:
        total = total + w.lambda2 * augmented_per
    return total


def total_loss(adv, per, w: LossWeights):
    return adv + w.mu * per
