"""Command-line interface: synth, train, predict, evaluate, gradcheck, lr-schedule.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 I/O error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checks import run_suite
from .dataset import FeatureSpec, SynthConfig, split_days, stack_windows, synth_generate, window_split
from .datastore import read_dataset, write_dataset
from .errors import ConfigError, DomainError, FormatError, NumericError, ValidationError
from .evaluation import (MEAN_BASELINE_NOTE, ReportRow, evaluate, mean_baseline, model_predictor,
                         persistence_predictor, report, score)
from .formats import read_blob, write_blob
from .losses import TARGET_VARIABLES, LossConfig
from .model import ModelConfig, VariationalUNet, load_state_arrays, predict_ensemble
from .rng import RngStream
from .training import (Trainer, TrainingLog, TrainRunConfig, load_checkpoint, lr_at, save_checkpoint)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SNAPSHOT = "run_config.json"
SPLITS = ("train", "val", "test")

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "loss": LossConfig().to_dict(),
    "train": TrainRunConfig().to_dict(),
    "features": FeatureSpec().to_dict(),
    "split": [0.7, 0.15, 0.15],
    "data": [],
    "out": None,
    "seed": 0,
}


# -- configuration -------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict) and key != "weights":
            out[key] = _merge(out[key], val, f"{where}{key}.")
        elif key == "weights" and isinstance(val, dict):
            out[key] = {**out[key], **val}
        else:
            out[key] = val
    return out


def _parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cursor = node
    parts = path.split(".")
    for p in parts[:-1]:
        cursor[p] = {}
        cursor = cursor[p]
    cursor[parts[-1]] = value
    return node


def resolve_config(config_file=None, overrides=(), **flags) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then dedicated flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_file:
        try:
            cfg = _merge(cfg, json.loads(Path(config_file).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_file}: invalid JSON ({exc})") from None
    for text in overrides:
        cfg = _merge(cfg, _parse_override(text))
    for key, val in flags.items():
        if val is not None:
            cfg = _merge(cfg, {key: val})
    cfg["train"]["seed"] = cfg["seed"]
    build(cfg)  # validate everything before any command runs
    return cfg


def build(cfg: dict):
    try:
        model = ModelConfig.from_dict(cfg["model"])
        loss = LossConfig.from_dict(cfg["loss"])
        train = TrainRunConfig.from_dict(cfg["train"])
        features = FeatureSpec.from_dict(cfg["features"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if features.in_channels != model.in_channels:
        raise ConfigError(f"feature spec yields {features.in_channels} input channels, "
                          f"model.in_channels is {model.in_channels}")
    return model, loss, train, features


def write_snapshot(cfg: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SNAPSHOT
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _set_threads() -> None:
    value = os.environ.get("VW4C_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"VW4C_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise ConfigError("VW4C_THREADS must be >= 1")
        torch.set_num_threads(n)


# -- helpers -------------------------------------------------------------------

def _windows(region, part: str, stride: int, features: FeatureSpec, fractions):
    if part == "all":
        return window_split(region, stride, features)
    return window_split(split_days(region, fractions)[SPLITS.index(part)], stride, features)


def write_pgm(path, plane: np.ndarray) -> None:
    """8-bit binary PGM of a [0, 1] plane."""
    img = np.clip(np.rint(np.nan_to_num(plane) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def _dump_pgms(pred: np.ndarray, out: Path, window: int) -> int:
    """One image per (variable, lead time). Predictions live in range-normalized space,
    so the manifest range maps onto 0..255 directly."""
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for t in range(pred.shape[1] // len(TARGET_VARIABLES)):
        for v, name in enumerate(TARGET_VARIABLES):
            write_pgm(out / f"w{window:04d}_{name}_t{t:02d}.pgm", pred[window, 4 * t + v])
            n += 1
    return n


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.regions < 1:
        raise ConfigError("--regions must be >= 1")
    out = Path(args.out)
    summary = []
    for i in range(args.regions):
        rid = f"R{i + 1}"
        cfg = SynthConfig(size=args.size, days=args.days, frames_per_day=args.frames_per_day,
                          missing_rate=args.missing, region_id=rid)
        ds = synth_generate(cfg, seed=args.seed + i)
        write_dataset(ds, out / rid)
        missing = float(np.mean([(~m).mean() for d in ds.days for m in d.masks.values()]))
        summary.append({"region": rid, "path": str(out / rid), "days": len(ds.days),
                        "frames_per_day": ds.frames_per_day, "grid": list(ds.grid),
                        "missing_fraction": round(missing, 6)})
    write_snapshot({"command": "synth", "regions": args.regions, "days": args.days, "size": args.size,
                    "frames_per_day": args.frames_per_day, "missing": args.missing, "seed": args.seed}, out)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set, data=args.data or None, out=args.out, seed=args.seed)
    if args.finetune_on_val:
        cfg["train"]["finetune_on_validation"] = True
    if not cfg["data"]:
        raise ConfigError("no training data: pass --data or set 'data' in the config")
    model_cfg, loss_cfg, run_cfg, features = build(cfg)
    out = Path(cfg["out"])
    write_snapshot(cfg, out)

    train, val = [], []
    for path in cfg["data"]:
        region = read_dataset(path)
        parts = split_days(region, cfg["split"])
        train += window_split(parts[0], run_cfg.train_stride, features)
        val += window_split(parts[1], run_cfg.eval_stride, features)
    if not train or not val:
        raise ConfigError("training or validation split has no complete 36-frame windows")

    log = TrainingLog(out / "train_log.jsonl")
    try:
        model = VariationalUNet(model_cfg, seed=cfg["seed"])
        trainer = Trainer(model, loss_cfg, run_cfg, log)
        best = trainer.fit(train, val, checkpoint_dir=out)
        final = best
        if run_cfg.finetune_on_validation:
            final = trainer.finetune_on_validation(best, train, val)
        save_checkpoint(final, out / "final.ckpt")
    finally:
        log.close()

    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        fields = ["cycle", "steps", "train_l2", "train_kl", "train_total", "val_score", "finetune"]
        writer = csv.DictWriter(fh, fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in trainer.history:
            writer.writerow({"finetune": False, "val_score": "", **row})
    print(f"trained {trainer.cycle} cycles, {trainer.global_step} steps; best validation score "
          f"{best.best_score:.6f} at cycle {best.best_cycle}; checkpoints in {out}")
    return EXIT_OK


def _load_for_inference(ckpt_path, config_path):
    ckpt = load_checkpoint(ckpt_path)
    snap = Path(config_path) if config_path else Path(ckpt_path).parent / SNAPSHOT
    cfg = resolve_config(snap if snap.exists() else None)
    cfg["model"] = ckpt.model_config.to_dict()
    _, _, _, features = build(cfg)
    model = VariationalUNet(ckpt.model_config)
    load_state_arrays(model, ckpt.params)
    return model.eval(), cfg, features


def cmd_predict(args) -> int:
    model, cfg, features = _load_for_inference(args.ckpt, args.config)
    region = read_dataset(args.data)
    if region.grid != (model.cfg.input_size,) * 2:
        raise ConfigError(f"data grid {region.grid} does not match model input size {model.cfg.input_size}")
    windows = _windows(region, args.split, args.stride, features, cfg["split"])
    if not windows:
        raise ConfigError(f"split {args.split!r} has no complete windows")
    out = Path(args.out)
    cfg.update(out=str(out), seed=args.seed)
    write_snapshot({**cfg, "predict": {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
                                       "stride": args.stride, "mode": args.mode, "ensemble": args.ensemble}}, out)

    x = torch.as_tensor(np.concatenate([w.input for w in windows]))
    rng = RngStream(args.seed)
    if args.ensemble:
        members, mean, std = [], [], []
        for i in range(0, len(windows), 16):
            m, mu, sd = predict_ensemble(model, x[i:i + 16], args.ensemble, rng)
            members.append(m.numpy())
            mean.append(mu.numpy())
            std.append(sd.numpy())
        members = np.concatenate(members, axis=1)
        pred = np.concatenate(mean)
        for k in range(args.ensemble):
            write_blob(out / f"pred_member_{k:02d}.f32", members[k].astype(np.float32))
        write_blob(out / "pred_std.f32", np.concatenate(std).astype(np.float32))
    else:
        predict = model_predictor(model, args.mode, rng)
        pred = np.concatenate([predict(None, x[i:i + 16].numpy()) for i in range(0, len(windows), 16)])
    if not np.all(np.isfinite(pred)):
        raise NumericError("prediction contains non-finite values")
    write_blob(out / "pred.f32", pred.astype(np.float32))
    index = {"data": str(Path(args.data).resolve()), "split": args.split, "stride": args.stride,
             "fractions": cfg["split"], "features": features.to_dict(),
             "windows": [list(w.provenance) for w in windows]}
    (out / "windows.json").write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    n_img = _dump_pgms(pred, out / "pgm", args.pgm_window) if args.pgm else 0
    print(f"wrote predictions for {len(windows)} windows, shape {tuple(pred.shape)}"
          + (f", {args.ensemble} ensemble members" if args.ensemble else "")
          + (f", {n_img} PGM images" if n_img else "") + f" to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    index = json.loads((pred_dir / "windows.json").read_text(encoding="utf-8"))
    pred = read_blob(pred_dir / "pred.f32")
    data = args.data or index["data"]
    region = read_dataset(data)
    features = FeatureSpec.from_dict(index["features"])
    windows = _windows(region, index["split"], index["stride"], features, index["fractions"])
    if [list(w.provenance) for w in windows] != index["windows"]:
        raise ValidationError(f"{data}: windows differ from those the predictions were made for")
    if pred.shape[0] != len(windows):
        raise ValidationError(f"{pred_dir / 'pred.f32'}: {pred.shape[0]} predictions for {len(windows)} windows")

    column = "validation" if index["split"] == "val" else "test"

    def row(name, rep, notes=()):
        return ReportRow(name, **{column: rep}, notes=list(notes))

    _, y, m = stack_windows(windows)
    rows = [row("vunet", score(pred, y, m, name="vunet"))]
    if args.baselines:
        train = split_days(region, index["fractions"])[0]
        rows.append(row("mean baseline", evaluate(mean_baseline(train), windows, name="mean"), [MEAN_BASELINE_NOTE]))
        rows.append(row("persistence", evaluate(persistence_predictor, windows, name="persistence")))
    text = report(rows, args.format)
    if args.out:
        out = Path(args.out)
        write_snapshot({"command": "evaluate", "pred": str(pred_dir), "data": str(data),
                        "baselines": args.baselines, "format": args.format}, out)
        (out / ("report.csv" if args.format == "csv" else "report.txt")).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args.config, args.set)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    if args.out:
        write_snapshot(cfg, args.out)
    results = run_suite(model_cfg, seed=cfg["seed"])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_lr_schedule(args) -> int:
    if args.steps_per_cycle < 1 or args.cycles < 1:
        raise ConfigError("--steps-per-cycle and --cycles must be >= 1")
    if args.out:
        write_snapshot({"command": "lr-schedule", "steps_per_cycle": args.steps_per_cycle, "cycles": args.cycles,
                        "lr_max": args.lr_max, "lr_min": args.lr_min}, args.out)
    print("step\tlr")
    for step in range(args.steps_per_cycle * args.cycles):
        print(f"{step}\t{lr_at(step, args.steps_per_cycle, args.lr_max, args.lr_min):.6e}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic region datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--regions", type=int, default=3)
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames-per-day", type=int, default=96)
    p.add_argument("--missing", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one or more regions")
    p.add_argument("--data", nargs="+")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--finetune-on-val", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict 32 future frames for every window of a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config (default: run_config.json next to the checkpoint)")
    p.add_argument("--mode", choices=["mean", "sample"], default="mean")
    p.add_argument("--ensemble", type=int, default=0)
    p.add_argument("--split", choices=list(SPLITS) + ["all"], default="test")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="dump grayscale images for one window")
    p.add_argument("--pgm-window", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions, optionally against baselines")
    p.add_argument("--pred", required=True)
    p.add_argument("--data")
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("lr-schedule", help="print the cyclic cosine learning-rate table")
    p.add_argument("--steps-per-cycle", type=int, required=True)
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--lr-max", type=float, default=2e-4)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lr_schedule)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        _set_threads()
        if getattr(args, "ensemble", 0) < 0:
            raise ConfigError("--ensemble must be >= 0")
        if getattr(args, "stride", 1) < 1:
            raise ConfigError("--stride must be >= 1")
        return args.func(args)
    except (ConfigError, ValidationError, DomainError) as exc:
        return _fail(EXIT_CONFIG, "configuration error", exc)
    except (FormatError, OSError) as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric failure", exc)


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(f"vunet: {kind}: {exc}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
