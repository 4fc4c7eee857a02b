"""Adam with cyclic cosine annealing, cycle-level early stopping and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import SampleWindow, stack_windows
from .errors import ConfigError, DomainError, NumericError, ValidationError, VersionError
from .evaluation import evaluate, model_predictor
from .formats import read_container, write_container
from .losses import LossConfig, compute_loss
from .model import ModelConfig, VariationalUNet, load_state_arrays, model_state_arrays
from .rng import RngStream

CHECKPOINT_VERSION = 1


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# -- schedule ------------------------------------------------------------------

@dataclass
class ScheduleState:
    steps_per_cycle: int
    lr_max: float = 2e-4
    lr_min: float = 0.0
    cycle_index: int = 0
    step_in_cycle: int = 0

    def __post_init__(self):
        if self.steps_per_cycle < 1:
            raise ConfigError("steps_per_cycle must be >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")

    @property
    def current_lr(self) -> float:
        return cyclic_cosine_lr(self)

    def advance(self) -> None:
        self.step_in_cycle += 1
        if self.step_in_cycle == self.steps_per_cycle:
            self.step_in_cycle = 0
            self.cycle_index += 1

    def restart(self, steps_per_cycle: int | None = None) -> None:
        if steps_per_cycle is not None:
            self.steps_per_cycle = steps_per_cycle
        if self.step_in_cycle:
            self.cycle_index += 1
        self.step_in_cycle = 0


def cyclic_cosine_lr(state: ScheduleState) -> float:
    frac = state.step_in_cycle / state.steps_per_cycle
    return state.lr_min + (state.lr_max - state.lr_min) / 2 * (1 + math.cos(math.pi * frac))


def lr_at(step: int, steps_per_cycle: int, lr_max: float = 2e-4, lr_min: float = 0.0) -> float:
    """Learning rate at a global step of an uninterrupted schedule."""
    s = ScheduleState(steps_per_cycle, lr_max, lr_min, step // steps_per_cycle, step % steps_per_cycle)
    return s.current_lr


# -- run config and checkpoints ---------------------------------------------------

@dataclass(frozen=True)
class TrainRunConfig:
    batch_size: int = 12
    cycles_max: int = 20
    epochs_per_cycle: int = 2
    early_stop: bool = True
    finetune_on_validation: bool = False
    seed: int = 0
    lr_max: float = 2e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_stride: int = 1
    eval_stride: int = 1
    latent_mode: str = "sample"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_per_cycle < 1:
            raise ConfigError("epochs_per_cycle must be >= 1")
        if self.cycles_max < 1:
            raise ConfigError("cycles_max must be >= 1")
        if self.latent_mode not in ("sample", "mean"):
            raise ConfigError("latent_mode must be 'sample' or 'mean'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict                      # name -> float64 ndarray
    param_dtype: str
    adam: dict                        # {"m": {...}, "v": {...}, "step", "beta1", "beta2", "eps"}
    schedule: dict
    rng_state: dict
    best_score: float
    cycle: int
    global_step: int
    history: list = field(default_factory=list)
    finetuned: bool = False
    best_cycle: int | None = None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "kind": "training-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": ckpt.model_config.to_dict(),
        "dtype": ckpt.param_dtype,
        "adam": {k: ckpt.adam[k] for k in ("step", "beta1", "beta2", "eps")},
        "schedule": ckpt.schedule,
        "rng": ckpt.rng_state,
        "best_score": None if math.isinf(ckpt.best_score) else ckpt.best_score,
        "best_cycle": ckpt.best_cycle,
        "cycle": ckpt.cycle,
        "global_step": ckpt.global_step,
        "history": ckpt.history,
        "finetuned": ckpt.finetuned,
        "param_names": list(ckpt.params),
    }
    arrays = {}
    for name, arr in ckpt.params.items():
        arrays[f"param/{name}"] = arr
        arrays[f"adam_m/{name}"] = ckpt.adam["m"][name]
        arrays[f"adam_v/{name}"] = ckpt.adam["v"][name]
    write_container(path, meta, arrays)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    meta, arrays = read_container(path)
    if meta.get("kind") != "training-checkpoint":
        raise ValidationError(f"{path}: not a training checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and cfg != expected_config:
        raise ValidationError(f"{path}: checkpoint model config {cfg} does not match {expected_config}")
    names = meta["param_names"]
    try:
        params = {n: arrays[f"param/{n}"] for n in names}
        m = {n: arrays[f"adam_m/{n}"] for n in names}
        v = {n: arrays[f"adam_v/{n}"] for n in names}
    except KeyError as exc:
        raise ValidationError(f"{path}: missing array {exc}") from None
    adam = dict(meta["adam"], m=m, v=v)
    best = meta["best_score"]
    return Checkpoint(cfg, params, meta["dtype"], adam, meta["schedule"], meta["rng"],
                      math.inf if best is None else best, meta["cycle"], meta["global_step"],
                      meta["history"], meta["finetuned"], meta["best_cycle"])


# -- training log --------------------------------------------------------------

class TrainingLog:
    """Line-delimited JSON records, kept in memory and optionally streamed to files."""

    def __init__(self, path=None, echo: Callable[[str], None] | None = None):
        self.records = []
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._echo = echo

    def write(self, record: dict) -> None:
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()
        if self._echo:
            self._echo(line)

    def lines(self) -> list:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# -- trainer -------------------------------------------------------------------

class Trainer:
    """Owns a model, its optimizer, schedule and random stream for one training run."""

    def __init__(self, model: VariationalUNet, loss_cfg: LossConfig = LossConfig(),
                 run_cfg: TrainRunConfig = TrainRunConfig(), log: TrainingLog | None = None):
        self.model = model
        self.loss_cfg = loss_cfg
        self.run_cfg = run_cfg
        self.log = log or TrainingLog()
        self.rng = RngStream(run_cfg.seed)
        self.params = dict(model.named_parameters())
        self.adam = AdamState.zeros_like(self.params, beta1=run_cfg.beta1, beta2=run_cfg.beta2, eps=run_cfg.adam_eps)
        self.schedule: ScheduleState | None = None
        self.cycle = 0
        self.global_step = 0
        self.history = []
        self.best_score = math.inf
        self.best: Checkpoint | None = None
        self.finetuned = False
        self.validate_fn: Callable | None = None

    # bookkeeping

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.run_cfg.batch_size)

    def _ensure_schedule(self, n_train: int) -> None:
        spc = self.run_cfg.epochs_per_cycle * self.steps_per_epoch(n_train)
        if self.schedule is None:
            self.schedule = ScheduleState(spc, self.run_cfg.lr_max, self.run_cfg.lr_min)
        elif self.schedule.steps_per_cycle != spc:
            self.schedule.restart(spc)

    def checkpoint(self) -> Checkpoint:
        dtype = str(next(self.model.parameters()).dtype).replace("torch.", "")
        adam = {"m": {k: t.detach().cpu().numpy().astype(np.float64) for k, t in self.adam.m.items()},
                "v": {k: t.detach().cpu().numpy().astype(np.float64) for k, t in self.adam.v.items()},
                "step": self.adam.step, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps}
        sched = dataclasses.asdict(self.schedule) if self.schedule else None
        return Checkpoint(self.model.cfg, model_state_arrays(self.model), dtype, adam, sched,
                          self.rng.get_state(), self.best_score, self.cycle, self.global_step,
                          copy.deepcopy(self.history), self.finetuned,
                          self.best.cycle if self.best else None)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.model_config != self.model.cfg:
            raise ValidationError(f"checkpoint config {ckpt.model_config} does not match model {self.model.cfg}")
        load_state_arrays(self.model, ckpt.params)
        with torch.no_grad():
            for k, p in self.params.items():
                self.adam.m[k].copy_(torch.as_tensor(ckpt.adam["m"][k], dtype=p.dtype))
                self.adam.v[k].copy_(torch.as_tensor(ckpt.adam["v"][k], dtype=p.dtype))
        self.adam.step = ckpt.adam["step"]
        self.adam.beta1, self.adam.beta2, self.adam.eps = ckpt.adam["beta1"], ckpt.adam["beta2"], ckpt.adam["eps"]
        self.schedule = ScheduleState(**ckpt.schedule) if ckpt.schedule else None
        self.rng.set_state(ckpt.rng_state)
        self.cycle = ckpt.cycle
        self.global_step = ckpt.global_step
        self.history = copy.deepcopy(ckpt.history)
        self.best_score = ckpt.best_score
        self.finetuned = ckpt.finetuned

    # core loop

    def _batch_tensors(self, windows):
        dtype = next(self.model.parameters()).dtype
        x, y, m = stack_windows(windows)
        return (torch.as_tensor(x, dtype=dtype), torch.as_tensor(y, dtype=dtype), torch.as_tensor(m))

    def train_step(self, windows: Sequence[SampleWindow]):
        x, y, m = self._batch_tensors(windows)
        self.model.train()
        for p in self.params.values():
            p.grad = None
        pred, latent = self.model(x, mode=self.run_cfg.latent_mode, rng=self.rng)
        where = (f"at step {self.global_step} (cycle {self.cycle}); "
                 f"batch starts with window {windows[0].provenance}")
        try:
            loss, breakdown = compute_loss(pred, y, m, latent, self.loss_cfg)
        except DomainError as exc:
            raise NumericError(f"{exc} {where}") from exc
        if not math.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss {where}")
        loss.backward()
        lr = self.schedule.current_lr
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.adam, lr)
        self.schedule.advance()
        self.global_step += 1
        return lr, breakdown

    def validate(self, windows: Sequence[SampleWindow]) -> float:
        if self.validate_fn is not None:
            return float(self.validate_fn(self))
        rep = evaluate(model_predictor(self.model, "mean"), windows, self.loss_cfg.weights,
                       batch_size=max(self.run_cfg.batch_size, 16))
        return rep.aggregate

    def train_cycle(self, train: Sequence[SampleWindow], val: Sequence[SampleWindow] | None = None) -> dict:
        """One cycle of ``epochs_per_cycle`` shuffled epochs, then validation."""
        if not train:
            raise ConfigError("empty training set")
        self._ensure_schedule(len(train))
        bs = self.run_cfg.batch_size
        totals = {"l2_total": [], "kl": [], "total": []}
        for epoch in range(self.run_cfg.epochs_per_cycle):
            order = self.rng.permutation(len(train))
            for b in range(0, len(train), bs):
                batch = [train[i] for i in order[b:b + bs]]
                lr, bd = self.train_step(batch)
                for k in totals:
                    totals[k].append(getattr(bd, k))
                self.log.write({"event": "step", "step": self.global_step, "cycle": self.cycle, "epoch": epoch,
                                "lr": lr, **bd.to_dict()})
        metrics = {"cycle": self.cycle, "steps": self.global_step,
                   "train_l2": math.fsum(totals["l2_total"]) / len(totals["l2_total"]),
                   "train_kl": math.fsum(totals["kl"]) / len(totals["kl"]),
                   "train_total": math.fsum(totals["total"]) / len(totals["total"])}
        if val is not None:
            metrics["val_score"] = self.validate(val)
        self.cycle += 1
        return metrics

    def fit(self, train: Sequence[SampleWindow], val: Sequence[SampleWindow],
            checkpoint_dir=None) -> Checkpoint:
        """Train cycle by cycle; stop after the first non-improving cycle; return the best checkpoint."""
        if not train or not val:
            raise ConfigError("fit needs non-empty training and validation sets")
        ckdir = Path(checkpoint_dir) if checkpoint_dir else None
        while self.cycle < self.run_cfg.cycles_max:
            metrics = self.train_cycle(train, val)
            improved = metrics["val_score"] < self.best_score
            if improved:
                self.best_score = metrics["val_score"]
            metrics["improved"] = improved
            metrics["best_score"] = self.best_score
            self.history.append(metrics)
            self.log.write({"event": "cycle", **metrics})
            snap = self.checkpoint()
            if improved:
                snap.best_cycle = snap.cycle - 1
                self.best = snap
                if ckdir:
                    save_checkpoint(snap, ckdir / "best.ckpt")
            if ckdir:
                save_checkpoint(snap, ckdir / "last.ckpt")
            if self.run_cfg.early_stop and not improved:
                break
        return self.best

    def finetune_on_validation(self, ckpt: Checkpoint, train: Sequence[SampleWindow],
                               val: Sequence[SampleWindow]) -> Checkpoint:
        """One extra cycle on train + validation windows, restarting the schedule at its maximum."""
        self.restore(ckpt)
        combined = list(train) + list(val)
        self._ensure_schedule(len(combined))
        self.schedule.restart()
        metrics = self.train_cycle(combined, None)
        metrics["finetune"] = True
        self.history.append(metrics)
        self.log.write({"event": "cycle", **metrics})
        self.finetuned = True
        out = self.checkpoint()
        out.finetuned = True
        return out


def resume(model: VariationalUNet, last: Checkpoint, best: Checkpoint | None = None,
           loss_cfg: LossConfig = LossConfig(), run_cfg: TrainRunConfig = TrainRunConfig(),
           log: TrainingLog | None = None) -> Trainer:
    """Rebuild a trainer from a mid-run checkpoint so that ``fit`` continues the same trajectory."""
    trainer = Trainer(model, loss_cfg, run_cfg, log)
    trainer.restore(last)
    trainer.best = best
    return trainer
