"""Differentiable layer primitives.

All functions take and return rank-4 ``(batch, channel, height, width)``
tensors ("grids") except :func:`dense`, which works on flat vectors. Gradients
come from torch autograd; :func:`grad_check` compares them with central
finite differences.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .rng import RngStream

GN_EPS = 1e-5


def _check_grid(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ConfigError(f"{name} must be rank 4 (batch, channels, height, width), got shape {tuple(x.shape)}")


def as_grid(values, dtype=torch.float64) -> torch.Tensor:
    """Convert array-like data to a rank-4 tensor, validating the rank."""
    t = torch.as_tensor(np.asarray(values), dtype=dtype)
    _check_grid(t)
    return t


def param(shape: Sequence[int], values=None, dtype=torch.float64) -> torch.nn.Parameter:
    """A parameter tensor with a zero-initialized ``grad`` buffer."""
    data = torch.zeros(tuple(shape), dtype=dtype) if values is None else torch.as_tensor(values, dtype=dtype).reshape(tuple(shape))
    p = torch.nn.Parameter(data.clone())
    p.grad = torch.zeros_like(p)
    return p


def conv2d(x, w, b=None, stride: int = 1, padding: int = 1):
    _check_grid(x)
    if w.dim() != 4:
        raise ConfigError(f"kernel must be rank 4 (out, in, kh, kw), got {tuple(w.shape)}")
    k_out, k_in, kh, kw = w.shape
    if x.shape[1] != k_in:
        raise ConfigError(f"channels: input has {x.shape[1]}, kernel expects {k_in}")
    if b is not None and tuple(b.shape) != (k_out,):
        raise ConfigError(f"bias: expected shape ({k_out},), got {tuple(b.shape)}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if x.shape[2] + 2 * padding < kh:
        raise ConfigError(f"height: padded input {x.shape[2] + 2 * padding} smaller than kernel {kh}")
    if x.shape[3] + 2 * padding < kw:
        raise ConfigError(f"width: padded input {x.shape[3] + 2 * padding} smaller than kernel {kw}")
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def transposed_conv2d(x, w, b=None, stride: int = 2, padding: int = 0):
    """Transposed convolution; ``w`` has shape ``(in, out, kh, kw)``.

    With the same kernel tensor this is the adjoint of :func:`conv2d`.
    """
    _check_grid(x)
    if w.dim() != 4:
        raise ConfigError(f"kernel must be rank 4 (in, out, kh, kw), got {tuple(w.shape)}")
    k_in, k_out, kh, kw = w.shape
    if x.shape[1] != k_in:
        raise ConfigError(f"channels: input has {x.shape[1]}, kernel expects {k_in}")
    if b is not None and tuple(b.shape) != (k_out,):
        raise ConfigError(f"bias: expected shape ({k_out},), got {tuple(b.shape)}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    for dim, size, k in (("height", x.shape[2], kh), ("width", x.shape[3], kw)):
        if (size - 1) * stride - 2 * padding + k < 1:
            raise ConfigError(f"{dim}: padding {padding} leaves no output")
    return F.conv_transpose2d(x, w, b, stride=stride, padding=padding)


def elu(x, alpha: float = 1.0):
    return F.elu(x, alpha=alpha)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = GN_EPS):
    _check_grid(x)
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ConfigError(f"channels: {c} not divisible by groups={groups}")
    return F.group_norm(x, groups, gamma, beta, eps)


def dropout2d(x, rate: float, training: bool, rng: RngStream | None):
    """Zero whole ``(sample, channel)`` planes with probability ``rate``.

    Survivors are scaled by ``1 / (1 - rate)``. The keep mask is drawn from
    ``rng`` so the result is reproducible from the stream state.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    _check_grid(x)
    if rng is None:
        raise ConfigError("training-mode dropout needs an RngStream")
    keep = rng.uniform((x.shape[0], x.shape[1])) >= rate
    scale = torch.as_tensor(keep / (1.0 - rate), dtype=x.dtype)
    return x * scale[:, :, None, None]


def max_pool2d(x, window: int = 2):
    _check_grid(x)
    h, w = x.shape[2], x.shape[3]
    if h % window or w % window:
        raise ConfigError(f"spatial dims {h}x{w} not divisible by pooling window {window}")
    return F.max_pool2d(x, window)


def dense(x, w, b=None):
    """``w @ x + b`` for a vector or a batch of row vectors."""
    if w.dim() != 2:
        raise ConfigError(f"weight must be rank 2, got {tuple(w.shape)}")
    if x.shape[-1] != w.shape[1]:
        raise ConfigError(f"length: input has {x.shape[-1]}, weight expects {w.shape[1]}")
    if b is not None and tuple(b.shape) != (w.shape[0],):
        raise ConfigError(f"bias: expected shape ({w.shape[0]},), got {tuple(b.shape)}")
    return F.linear(x, w, b)


def grad_check(op: Callable, inputs: Sequence[torch.Tensor], eps: float = 1e-4, seed: int = 0,
               wrt: Sequence[int] | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``op(*inputs)`` may return any tensor; it is reduced to a scalar through a
    fixed random projection. Errors are ``|a - c| / max(|a|, |c|, 1e-8)``.
    ``op`` must be deterministic (reseed any RngStream inside it).
    """
    inputs = [t.detach().clone().to(torch.float64) for t in inputs]
    if wrt is None:
        wrt = [i for i, t in enumerate(inputs) if t.is_floating_point()]
    probe = None

    def objective(args):
        nonlocal probe
        out = op(*args)
        if probe is None:
            g = np.random.default_rng(seed).standard_normal(tuple(out.shape))
            probe = torch.as_tensor(g, dtype=out.dtype)
        return (out * probe).sum()

    leaves = [t.clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    analytic = torch.autograd.grad(objective(leaves), [leaves[i] for i in wrt], allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for slot, i in enumerate(wrt):
            a_grad = analytic[slot]
            a_grad = torch.zeros_like(inputs[i]) if a_grad is None else a_grad
            flat = inputs[i].view(-1)
            a_flat = a_grad.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                f_plus = objective(inputs).item()
                flat[k] = orig - eps
                f_minus = objective(inputs).item()
                flat[k] = orig
                c = (f_plus - f_minus) / (2 * eps)
                a = a_flat[k].item()
                err = abs(a - c) / max(abs(a), abs(c), 1e-8)
                worst = max(worst, err)
    return worst
