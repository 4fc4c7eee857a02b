"""Variational U-Net: dense-block encoder, Gaussian bottleneck, transposed-conv decoder."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import nn_primitives as P
from .errors import ConfigError, DomainError
from .rng import RngStream

LOG_SIGMA_MIN = -30.0
LOG_SIGMA_MAX = 10.0


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 35
    out_channels: int = 128
    levels: int = 4
    base_width: int = 32
    latent_dim: int = 512
    dropout_rate: float = 0.2
    groups: int = 4
    input_size: int = 32
    conv_kernel: int = 3
    up_kernel: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.input_size % (2 ** self.levels):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^levels = {2 ** self.levels}")
        if self.latent_dim <= 0:
            raise ConfigError("latent_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd to preserve spatial size")
        if self.up_kernel != 2:
            raise ConfigError("up_kernel must be 2 (stride-2 exact upsampling)")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by groups={self.groups}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.levels

    @property
    def flat_dim(self) -> int:
        return self.widths[-1] * self.bottleneck_size ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the latent code, stored as mean and log std."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    @classmethod
    def from_sigma(cls, mu, sigma) -> "LatentDistribution":
        mu = torch.as_tensor(mu, dtype=torch.float64)
        sigma = torch.as_tensor(sigma, dtype=mu.dtype)
        if not bool(torch.all(sigma > 0)):
            raise DomainError("sigma must be strictly positive")
        return cls(mu, torch.log(sigma))


# -- layers -----------------------------------------------------------------

class Conv(nn.Module):
    def __init__(self, c_in, c_out, k):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.padding = k // 2

    def forward(self, x):
        return P.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class UpConv(nn.Module):
    def __init__(self, c_in, c_out, k=2):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_in, c_out, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return P.transposed_conv2d(x, self.weight, self.bias, stride=2, padding=0)


class GroupNorm(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return P.group_norm(x, self.groups, self.weight, self.bias)


class Dense(nn.Module):
    def __init__(self, n_in, n_out):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x):
        return P.dense(x, self.weight, self.bias)


class DenseBlock(nn.Module):
    """4 x (conv, ELU, group norm, 2D dropout) followed by conv, ELU."""

    REPEATS = 4

    def __init__(self, c_in, width, cfg: ModelConfig):
        super().__init__()
        k = cfg.conv_kernel
        self.convs = nn.ModuleList([Conv(c_in if i == 0 else width, width, k) for i in range(self.REPEATS + 1)])
        self.norms = nn.ModuleList([GroupNorm(width, cfg.groups) for _ in range(self.REPEATS)])
        self.dropout_rate = cfg.dropout_rate
        self.c_in = c_in
        self.width = width

    @classmethod
    def layer_sequence(cls) -> list[str]:
        return ["conv", "elu", "gn", "drop"] * cls.REPEATS + ["conv", "elu"]

    def forward(self, x, rng=None):
        if x.shape[1] != self.c_in:
            raise ConfigError(f"channels: dense block expects {self.c_in}, got {x.shape[1]}")
        for conv, norm in zip(self.convs, self.norms):
            x = P.elu(conv(x))
            x = norm(x)
            x = P.dropout2d(x, self.dropout_rate, self.training, rng)
        return P.elu(self.convs[-1](x))


class UpBlock(nn.Module):
    """Transposed conv, ELU, skip concat, conv, ELU, group norm, 2D dropout."""

    def __init__(self, c_in, width, cfg: ModelConfig):
        super().__init__()
        self.up = UpConv(c_in, width, cfg.up_kernel)
        self.conv = Conv(2 * width, width, cfg.conv_kernel)
        self.norm = GroupNorm(width, cfg.groups)
        self.dropout_rate = cfg.dropout_rate
        self.width = width

    @staticmethod
    def layer_sequence() -> list[str]:
        return ["tconv", "elu", "concat", "conv", "elu", "gn", "drop"]

    def forward(self, x, skip, rng=None):
        x = P.elu(self.up(x))
        if skip.shape != x.shape:
            raise ConfigError(f"skip shape {tuple(skip.shape)} does not match upsampled map {tuple(x.shape)}")
        x = torch.cat([x, skip], dim=1)
        x = self.norm(P.elu(self.conv(x)))
        return P.dropout2d(x, self.dropout_rate, self.training, rng)


# -- model ------------------------------------------------------------------

def reparameterize(latent: LatentDistribution, mode: str = "sample", rng: RngStream | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, I)`` (``mode="sample"``) or ``mu`` (``mode="mean"``)."""
    if mode == "mean":
        return latent.mu
    if mode != "sample":
        raise ConfigError(f"unknown latent mode {mode!r}")
    if eps is None:
        if rng is None:
            raise ConfigError("sampling the latent needs an RngStream")
        eps = torch.as_tensor(rng.normal(tuple(latent.mu.shape)), dtype=latent.mu.dtype)
    return latent.mu + latent.sigma * eps


def he_init(module: nn.Module, seed: int) -> nn.Module:
    """Zero biases, unit norm gains, He-normal weights (std = sqrt(2 / fan_in))."""
    rng = RngStream(seed)
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, (Conv, UpConv, Dense)):
                w = mod.weight
                if isinstance(mod, UpConv):
                    fan_in = w.shape[0] * w.shape[2] * w.shape[3]
                else:
                    fan_in = int(np.prod(w.shape[1:]))
                std = math.sqrt(2.0 / fan_in)
                w.copy_(torch.as_tensor(rng.normal(tuple(w.shape)) * std, dtype=w.dtype))
                mod.bias.zero_()
    return module


class VariationalUNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        self.encoder = nn.ModuleList(
            [DenseBlock(cfg.in_channels if i == 0 else widths[i - 1], w, cfg) for i, w in enumerate(widths)])
        self.to_mu = Dense(cfg.flat_dim, cfg.latent_dim)
        self.to_log_sigma = Dense(cfg.flat_dim, cfg.latent_dim)
        self.from_latent = Dense(cfg.latent_dim, cfg.flat_dim)
        ups = []
        for level in reversed(range(cfg.levels)):
            c_in = widths[-1] if level == cfg.levels - 1 else widths[level + 1]
            ups.append(UpBlock(c_in, widths[level], cfg))
        self.decoder = nn.ModuleList(ups)
        self.head = Conv(widths[0], cfg.out_channels, 1)
        self.init_weights(seed)
        self.to(dtype)

    def init_weights(self, seed: int) -> None:
        """He-normal init; the 1x1 output head starts at zero so the untrained
        model predicts 0 rather than large random values."""
        he_init(self, seed)
        with torch.no_grad():
            self.head.weight.zero_()

    # individual stages are public so tests can probe them in isolation

    def encode(self, x, rng: RngStream | None = None):
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigError(f"input shape {tuple(x.shape)} does not match (batch, {expected[0]}, {expected[1]}, {expected[2]})")
        skips = []
        for block in self.encoder:
            x = block(x, rng)
            skips.append(x)
            x = P.max_pool2d(x, 2)
        flat = x.reshape(x.shape[0], -1)
        mu = self.to_mu(flat)
        log_sigma = torch.clamp(self.to_log_sigma(flat), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return skips, LatentDistribution(mu, log_sigma)

    def reconstruct_latent(self, z):
        cfg = self.cfg
        if z.shape[-1] != cfg.latent_dim:
            raise ConfigError(f"latent length {z.shape[-1]} != latent_dim {cfg.latent_dim}")
        z = z.reshape(-1, cfg.latent_dim)
        s = cfg.bottleneck_size
        return self.from_latent(z).reshape(z.shape[0], cfg.widths[-1], s, s)

    def decode(self, start, skips, rng: RngStream | None = None):
        if len(skips) != self.cfg.levels:
            raise ConfigError(f"expected {self.cfg.levels} skips, got {len(skips)}")
        x = start
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(x, skip, rng)
        return self.head(x)

    def forward(self, x, mode: str = "mean", rng: RngStream | None = None, eps=None):
        skips, latent = self.encode(x, rng)
        z = reparameterize(latent, mode, rng, eps)
        y = self.decode(self.reconstruct_latent(z), skips, rng)
        return y, latent

    def layer_sequence(self) -> list[str]:
        return DenseBlock.layer_sequence()


def predict_ensemble(model: VariationalUNet, x, n: int, rng: RngStream):
    """Run ``n`` sample-mode forwards; return members plus pointwise mean and std."""
    if n < 1:
        raise ConfigError("ensemble size must be >= 1")
    with torch.no_grad():
        members = torch.stack([model(x, mode="sample", rng=rng)[0] for _ in range(n)])
    return members, members.mean(0), members.std(0, unbiased=False)


def param_count(cfg: ModelConfig) -> int:
    """Total trainable scalars, computed stage by stage from the config alone."""
    k = cfg.conv_kernel

    def conv(i, o, kk=k):
        return o * i * kk * kk + o

    def gn(c):
        return 2 * c

    def dense(n, m):
        return m * n + m

    widths = cfg.widths
    total = 0
    for i, w in enumerate(widths):
        c_in = cfg.in_channels if i == 0 else widths[i - 1]
        total += conv(c_in, w) + DenseBlock.REPEATS * (conv(w, w) + gn(w))
    total += 2 * dense(cfg.flat_dim, cfg.latent_dim) + dense(cfg.latent_dim, cfg.flat_dim)
    for level in reversed(range(cfg.levels)):
        c_in = widths[-1] if level == cfg.levels - 1 else widths[level + 1]
        w = widths[level]
        total += conv(c_in, w, cfg.up_kernel) + conv(2 * w, w) + gn(w)
    total += conv(widths[0], cfg.out_channels, 1)
    return total


def model_state_arrays(model: VariationalUNet) -> dict:
    return {name: p.detach().cpu().numpy().astype(np.float64) for name, p in model.named_parameters()}


def load_state_arrays(model: VariationalUNet, arrays: dict) -> None:
    from .errors import ValidationError

    params = dict(model.named_parameters())
    missing = set(params) - set(arrays)
    if missing:
        raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(f"parameter {name}: shape {tuple(arr.shape)} != model {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=p.dtype))


def save_model(model: VariationalUNet, path) -> None:
    from .formats import write_container

    dtype = str(next(model.parameters()).dtype).replace("torch.", "")
    meta = {"kind": "model", "config": model.cfg.to_dict(), "dtype": dtype}
    write_container(path, meta, model_state_arrays(model))


def load_model(path, expected: ModelConfig | None = None) -> VariationalUNet:
    from .errors import ValidationError
    from .formats import read_container

    meta, arrays = read_container(path)
    cfg = ModelConfig.from_dict(meta["config"])
    if expected is not None and cfg != expected:
        raise ValidationError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    model = VariationalUNet(cfg, dtype=getattr(torch, meta.get("dtype", "float32")))
    load_state_arrays(model, arrays)
    return model
