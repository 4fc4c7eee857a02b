"""Finite-difference gradient suite: every primitive plus a tiny end-to-end model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import nn_primitives as P
from .losses import LossConfig, compute_loss
from .model import ModelConfig, VariationalUNet
from .rng import RngStream

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4

TINY_CONFIG = ModelConfig(levels=2, base_width=4, latent_dim=8, dropout_rate=0.0, groups=2, input_size=8)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<20} rel_err={self.error:.3e} tol={self.tol:.0e}"


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def r(*shape):
        return torch.as_tensor(rng.standard_normal(shape))

    cases = [
        ("conv2d", lambda x, w, b: P.conv2d(x, w, b), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)]),
        ("conv2d_stride2", lambda x, w, b: P.conv2d(x, w, b, stride=2, padding=1), [r(1, 2, 6, 6), r(3, 2, 3, 3), r(3)]),
        ("transposed_conv2d", lambda x, w, b: P.transposed_conv2d(x, w, b), [r(2, 3, 3, 3), r(3, 2, 2, 2), r(2)]),
        ("elu", P.elu, [r(3, 4, 5)]),
        ("group_norm", lambda x, g, b: P.group_norm(x, 2, g, b), [r(2, 4, 3, 3), r(4), r(4)]),
        ("dropout2d", lambda x: P.dropout2d(x, 0.3, True, RngStream(seed)), [r(2, 4, 3, 3)]),
        ("max_pool2d", P.max_pool2d, [r(2, 3, 4, 4)]),
        ("dense", P.dense, [r(3, 6), r(4, 6), r(4)]),
    ]
    return [CheckResult(name, P.grad_check(op, inputs, eps=1e-5, seed=seed), PRIMITIVE_TOL)
            for name, op, inputs in cases]


def perturb_parameters(model: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> torch.nn.Module:
    """Add noise to every parameter so no gradient path is trivially zero (the head starts at 0)."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.as_tensor(rng.standard_normal(tuple(p.shape)) * scale, dtype=p.dtype))
    return model


def end_to_end_check(cfg: ModelConfig = TINY_CONFIG, n_probes: int = 40, seed: int = 0,
                     eps: float = 1e-6) -> CheckResult:
    """Autograd vs central differences of the full loss at randomly chosen parameter entries."""
    rng = np.random.default_rng(seed)
    model = perturb_parameters(VariationalUNet(cfg, seed=seed, dtype=torch.float64), seed=seed).eval()
    with torch.no_grad():
        # keep sigma near 1: a huge KL term would drown the differences in roundoff
        model.to_log_sigma.weight.mul_(0.01)
    s = cfg.input_size
    x = torch.as_tensor(rng.random((2, cfg.in_channels, s, s)))
    target = torch.as_tensor(rng.random((2, cfg.out_channels, s, s)))
    mask = torch.as_tensor(rng.random((2, cfg.out_channels, s, s)) > 0.2)

    def loss():
        y, latent = model(x, mode="sample", rng=RngStream(seed + 1))
        return compute_loss(y, target, mask, latent, LossConfig())[0]

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_probes):
            p = params[int(rng.integers(len(params)))]
            k = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            orig = flat[k].item()
            flat[k] = orig + eps
            hi = loss().item()
            flat[k] = orig - eps
            lo = loss().item()
            flat[k] = orig
            c = (hi - lo) / (2 * eps)
            a = p.grad.view(-1)[k].item()
            worst = max(worst, abs(a - c) / max(abs(a), abs(c), 1e-8))
    return CheckResult("end_to_end", worst, END_TO_END_TOL)


def run_suite(cfg: ModelConfig = TINY_CONFIG, seed: int = 0) -> list[CheckResult]:
    return primitive_checks(seed) + [end_to_end_check(cfg, seed=seed)]
