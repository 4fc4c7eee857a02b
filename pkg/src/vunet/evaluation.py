"""Masked weighted scoring, mean/persistence baselines and score tables.

The score is the masked weighted L2 (no KL term) evaluated per sample and
averaged over samples. It is not comparable with leaderboard numbers.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import N_TARGET_FRAMES, RegionDataset, SampleWindow, normalize, stack_windows
from .errors import ConfigError
from .losses import N_VARS, TARGET_VARIABLES, VariableWeights

MEAN_BASELINE_NOTE = ("mean baseline = per-pixel temporal mean of each target variable over valid "
                      "training frames (interpretation; the original definition is not published)")
METRIC_NOTE = "score = masked weighted L2 without KL term; not comparable with leaderboard values"


@dataclass
class ScoreReport:
    aggregate: float
    per_variable: dict
    per_leadtime: list
    coverage: dict
    n_samples: int
    name: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "aggregate": self.aggregate, "per_variable": self.per_variable,
                "per_leadtime": self.per_leadtime, "coverage": self.coverage, "n_samples": self.n_samples}


def sample_terms(pred, target, mask, weights: VariableWeights = VariableWeights()):
    """Per-sample per-channel contributions ``(B, C)`` and valid counts, in float64."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ConfigError(f"shape mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    if pred.ndim != 4 or pred.shape[1] % N_VARS:
        raise ConfigError(f"expected (batch, 4*T, H, W), got {pred.shape}")
    c = pred.shape[1]
    diff = np.where(mask, pred - target, 0.0)
    sse = np.einsum("bchw,bchw->bc", diff, diff)
    counts = mask.sum(axis=(2, 3))
    w = np.tile(weights.as_array(), c // N_VARS)
    terms = np.divide(w * sse, counts, out=np.zeros_like(sse), where=counts > 0) / c
    return terms, counts


class ScoreAccumulator:
    """Collects per-sample terms batch by batch; the result is independent of sample order."""

    def __init__(self, weights: VariableWeights = VariableWeights()):
        self.weights = weights
        self.terms = []
        self.counts = []
        self.pixels = 0

    def add(self, pred, target, mask):
        terms, counts = sample_terms(pred, target, mask, self.weights)
        self.terms.append(terms)
        self.counts.append(counts)
        self.pixels = mask.shape[2] * mask.shape[3]

    def result(self, name: str = "") -> ScoreReport:
        terms = np.concatenate(self.terms) if self.terms else np.zeros((0, 0))
        if not len(terms):
            raise ConfigError("cannot score an empty sample set")
        counts = np.concatenate(self.counts)
        b, c = terms.shape
        t = c // N_VARS
        cube = terms.reshape(b, t, N_VARS)
        agg = math.fsum(terms.ravel()) / b
        per_var = {n: math.fsum(cube[:, :, i].ravel()) / b for i, n in enumerate(TARGET_VARIABLES)}
        per_lead = [math.fsum(cube[:, k, :].ravel()) / b for k in range(t)]
        cov_counts = counts.reshape(b, t, N_VARS).sum(axis=(0, 1))
        coverage = {n: float(cov_counts[i]) / (b * t * self.pixels) for i, n in enumerate(TARGET_VARIABLES)}
        return ScoreReport(agg, per_var, per_lead, coverage, b, name)


def score(preds, targets, masks, weights: VariableWeights = VariableWeights(), name: str = "") -> ScoreReport:
    acc = ScoreAccumulator(weights)
    acc.add(preds, targets, masks)
    return acc.result(name)


def evaluate(predict: Callable, windows: Sequence[SampleWindow], weights: VariableWeights = VariableWeights(),
             batch_size: int = 16, name: str = "") -> ScoreReport:
    """Score ``predict(list_of_windows, x) -> (B, C, H, W)`` over ``windows`` in index order."""
    if not windows:
        raise ConfigError("cannot score an empty sample set")
    acc = ScoreAccumulator(weights)
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        x, y, m = stack_windows(chunk)
        acc.add(predict(chunk, x), y, m)
    return acc.result(name)


def model_predictor(model, mode: str = "mean", rng=None) -> Callable:
    dtype = next(model.parameters()).dtype

    def predict(_windows, x):
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                y, _ = model(torch.as_tensor(x, dtype=dtype), mode=mode, rng=rng)
        finally:
            model.train(was_training)
        return y.cpu().numpy()

    return predict


class MeanBaseline:
    """Per-region, per-pixel temporal mean of each target variable (normalized space)."""

    def __init__(self, means: dict):
        self.means = means  # region_id -> (4, H, W)
        self.pooled = np.mean(np.stack(list(means.values())), axis=0)

    def predict_window(self, window: SampleWindow) -> np.ndarray:
        base = self.means.get(window.region_id, self.pooled)
        return np.tile(base, (N_TARGET_FRAMES, 1, 1))[None].astype(np.float32)

    def __call__(self, windows, _x=None):
        return np.concatenate([self.predict_window(w) for w in windows])


def mean_baseline(train: RegionDataset | Sequence[RegionDataset]) -> MeanBaseline:
    regions = [train] if isinstance(train, RegionDataset) else list(train)
    if not regions or not any(r.days for r in regions):
        raise ConfigError("mean baseline needs a non-empty training split")
    means = {}
    for region in regions:
        if not region.days:
            continue
        planes = []
        for name in TARGET_VARIABLES:
            vals = np.concatenate([normalize(d.values[name], name, region.ranges) for d in region.days])
            mask = np.concatenate([d.masks[name] for d in region.days])
            total = np.where(mask, vals, 0.0).sum(axis=0)
            count = mask.sum(axis=0)
            fallback = float(vals[mask].mean()) if mask.any() else 0.0
            planes.append(np.where(count > 0, total / np.maximum(count, 1), fallback))
        means[region.region_id] = np.stack(planes)
    return MeanBaseline(means)


def persistence_baseline(window: SampleWindow) -> np.ndarray:
    """Repeat the last input frame's target variables for all 32 lead times."""
    last, _mask = window.last_observed
    return np.tile(last, (N_TARGET_FRAMES, 1, 1))[None].astype(np.float32)


def persistence_predictor(windows, _x=None):
    return np.concatenate([persistence_baseline(w) for w in windows])


# -- tables ------------------------------------------------------------------

COLUMNS = ["model", "validation", "test"] + list(TARGET_VARIABLES)


@dataclass
class ReportRow:
    model: str
    validation: ScoreReport | None = None
    test: ScoreReport | None = None
    notes: list = field(default_factory=list)

    def cells(self) -> list:
        detail = self.test or self.validation
        per_var = [detail.per_variable[n] if detail else None for n in TARGET_VARIABLES]
        return [self.model,
                self.validation.aggregate if self.validation else None,
                self.test.aggregate if self.test else None] + per_var


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report(rows: Sequence[ReportRow], format: str = "text") -> str:
    """Render rows as an aligned text table (with notes) or as CSV."""
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row.cells()])
        return buf.getvalue()
    if format != "text":
        raise ConfigError(f"unknown report format {format!r}")
    table = [COLUMNS] + [[_fmt(v) for v in row.cells()] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip() for r in table]
    notes = [n for row in rows for n in row.notes]
    if rows:
        notes.append(METRIC_NOTE)
    for n in dict.fromkeys(notes):
        lines.append(f"# {n}")
    return "\n".join(lines) + "\n"
