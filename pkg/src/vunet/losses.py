"""Masked, variable-weighted L2 plus KL loss.

Target channels are laid out lead-time major, variable minor: channel
``4 * t + v`` holds variable ``v`` at lead time ``t``, with variables in
:data:`TARGET_VARIABLES` order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DomainError

TARGET_VARIABLES = ("temperature", "crr_intensity", "asii_turb_trop_prob", "cma")
N_VARS = len(TARGET_VARIABLES)


@dataclass(frozen=True)
class VariableWeights:
    temperature: float = 31.610
    crr_intensity: float = 4139.4
    cma: float = 5.2191
    asii_turb_trop_prob: float = 142.17

    def __post_init__(self):
        for name in TARGET_VARIABLES:
            if not getattr(self, name) > 0:
                raise ConfigError(f"weight for {name} must be positive")

    def as_array(self) -> np.ndarray:
        """Weights in channel-layout variable order."""
        return np.array([getattr(self, name) for name in TARGET_VARIABLES], dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    kl_weight: float = 80.0
    weights: VariableWeights = field(default_factory=VariableWeights)
    kl_formula: str = "paper"

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if self.kl_formula not in ("paper", "standard"):
            raise ConfigError(f"kl_formula must be 'paper' or 'standard', got {self.kl_formula!r}")

    def to_dict(self) -> dict:
        return {"kl_weight": self.kl_weight, "kl_formula": self.kl_formula,
                "weights": {n: getattr(self.weights, n) for n in TARGET_VARIABLES}}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        weights = VariableWeights(**d.pop("weights", {}))
        return cls(weights=weights, **d)


@dataclass
class LossBreakdown:
    l2_total: float
    l2_per_variable: dict
    kl: float
    total: float
    pixel_counts: np.ndarray  # (lead_times, 4), summed over the batch

    def to_dict(self) -> dict:
        return {"l2_total": self.l2_total, "l2_per_variable": dict(self.l2_per_variable),
                "kl": self.kl, "total": self.total}


def _check_layout(pred, target, mask):
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ConfigError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}")
    if pred.dim() != 4 or pred.shape[1] % N_VARS:
        raise ConfigError(f"channels: expected (batch, 4*T, H, W), got {tuple(pred.shape)}")


def masked_l2_terms(pred, target, mask, weights: VariableWeights = VariableWeights()):
    """Per-sample, per-channel weighted terms ``w_v / P * sum (y - yhat)^2 / C``.

    Returns ``(terms[B, C], counts[B, C])``. Cells with no valid pixel give 0.
    Masked pixels are removed with ``where`` so their values (even non-finite
    ones) never reach the sum or the gradient.
    """
    _check_layout(pred, target, mask)
    mask = mask.to(torch.bool)
    b, c = pred.shape[:2]
    diff = torch.where(mask, pred - target, torch.zeros((), dtype=pred.dtype))
    sse = (diff * diff).sum(dim=(2, 3))
    counts = mask.sum(dim=(2, 3))
    w = torch.as_tensor(np.tile(weights.as_array(), c // N_VARS), dtype=pred.dtype)
    safe = torch.where(counts > 0, counts, torch.ones_like(counts)).to(pred.dtype)
    terms = torch.where(counts > 0, w * sse / safe, torch.zeros((), dtype=pred.dtype)) / c
    return terms, counts


def masked_l2(pred, target, mask, weights: VariableWeights = VariableWeights()):
    """Batch mean of the masked weighted MSE; returns ``(loss, per_variable, counts)``.

    ``per_variable`` holds each variable's contribution (they sum to ``loss``),
    ``counts`` is the ``(T, 4)`` matrix of valid pixels summed over the batch.
    """
    terms, counts = masked_l2_terms(pred, target, mask, weights)
    b, c = terms.shape
    per_sample = terms.sum(dim=1)
    loss = per_sample.mean()
    per_var = terms.detach().reshape(b, c // N_VARS, N_VARS).sum(dim=1).mean(dim=0)
    per_variable = {name: float(per_var[i]) for i, name in enumerate(TARGET_VARIABLES)}
    pixel_counts = counts.detach().reshape(b, c // N_VARS, N_VARS).sum(dim=0).cpu().numpy()
    return loss, per_variable, pixel_counts


def kl_divergence(latent, formula: str = "paper"):
    """KL penalty toward N(0, I), summed over latent dims and averaged over the batch.

    ``paper``: ``0.5 * sum(mu^2 + sigma^2 - log(sigma) - 1)``.
    ``standard``: ``0.5 * sum(mu^2 + sigma^2 - 2 log(sigma) - 1)``, the exact
    Gaussian KL.
    """
    log_sigma = latent.log_sigma
    if not bool(torch.all(torch.isfinite(log_sigma))):
        raise DomainError("sigma must be finite and strictly positive")
    mu = latent.mu
    sigma2 = torch.exp(2 * log_sigma)
    if formula == "paper":
        per_dim = mu * mu + sigma2 - log_sigma - 1
    elif formula == "standard":
        per_dim = mu * mu + sigma2 - 2 * log_sigma - 1
    else:
        raise ConfigError(f"unknown kl formula {formula!r}")
    per_sample = 0.5 * per_dim.sum(dim=-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def total_loss(l2, kl, cfg: LossConfig = LossConfig()):
    return l2 + cfg.kl_weight * kl


def compute_loss(pred, target, mask, latent, cfg: LossConfig = LossConfig()):
    """Differentiable total loss plus a detached :class:`LossBreakdown`."""
    l2, per_var, counts = masked_l2(pred, target, mask, cfg.weights)
    kl = kl_divergence(latent, cfg.kl_formula)
    total = total_loss(l2, kl, cfg)
    breakdown = LossBreakdown(float(l2.detach()), per_var, float(kl.detach()), float(total.detach()), counts)
    return total, breakdown
