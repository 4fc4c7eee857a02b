"""On-disk dataset directories: ``manifest.json`` plus one blob per (day, channel)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import CADENCE_MINUTES, STATIC_CHANNELS, Day, RegionDataset
from .errors import ChecksumError, MissingFileError, ValidationError, VersionError
from .formats import KIND_FLOAT32, KIND_MASK, read_blob, write_blob

FORMAT_NAME = "vw4c-dataset"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _entry(path: Path, root: Path, array, kind) -> dict:
    crc = write_blob(path, array, kind)
    return {"file": str(path.relative_to(root)), "shape": list(np.shape(array)), "crc32": crc}


def write_dataset(ds: RegionDataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "days").mkdir(exist_ok=True)
    channels = {}
    for name, (lo, hi) in ds.ranges.items():
        channels[name] = {
            "range": [lo, hi],
            "kind": "static" if name in STATIC_CHANNELS else "dynamic",
            "fill": "zero",
        }
    statics = {n: _entry(root / f"static_{n}.f32", root, v, KIND_FLOAT32) for n, v in ds.statics.items()}
    days = []
    for day in ds.days:
        entry = {"index": day.index, "n_frames": day.n_frames, "channels": {}}
        for name in day.values:
            stem = root / "days" / f"d{day.index:04d}_{name}"
            entry["channels"][name] = {
                "data": _entry(stem.with_suffix(".f32"), root, day.values[name], KIND_FLOAT32),
                "mask": _entry(stem.with_suffix(".mask"), root, day.masks[name], KIND_MASK),
            }
        days.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "regions": [ds.region_id],
        "region_id": ds.region_id,
        "grid": list(ds.grid),
        "cadence_minutes": CADENCE_MINUTES,
        "frames_per_day": ds.frames_per_day,
        "channels": channels,
        "statics": statics,
        "days": days,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return root


def _load(root: Path, entry: dict, kind: int):
    path = root / entry["file"]
    if not path.exists():
        raise MissingFileError(f"missing tensor file {path}")
    arr = read_blob(path, expected_kind=kind, expected_shape=tuple(entry["shape"]))
    return arr, path


def read_dataset(path) -> RegionDataset:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise MissingFileError(f"no {MANIFEST} in {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_NAME:
        raise ValidationError(f"{mpath}: not a {FORMAT_NAME} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{mpath}: format version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    grid = tuple(manifest["grid"])

    def checked(entry, kind):
        arr, p = _load(root, entry, kind)
        # the blob verified its own trailer; the manifest copy must agree too
        stored = int.from_bytes(p.read_bytes()[-4:], "little")
        if stored != entry["crc32"]:
            raise ChecksumError(p, entry["crc32"], stored)
        return arr

    statics = {}
    for name, entry in manifest["statics"].items():
        arr = checked(entry, KIND_FLOAT32)
        if arr.shape != grid:
            raise ValidationError(f"static {name}: shape {arr.shape} != grid {grid}")
        statics[name] = arr
    days = []
    for d in manifest["days"]:
        values, masks = {}, {}
        for name, ch in d["channels"].items():
            values[name] = checked(ch["data"], KIND_FLOAT32)
            masks[name] = checked(ch["mask"], KIND_MASK)
            expected = (d["n_frames"],) + grid
            if values[name].shape != expected or masks[name].shape != expected:
                raise ValidationError(f"day {d['index']} channel {name}: shape {values[name].shape} != {expected}")
        days.append(Day(d["index"], values, masks))
    ranges = {n: tuple(c["range"]) for n, c in manifest["channels"].items()}
    ds = RegionDataset(manifest["region_id"], days, statics, ranges, manifest["frames_per_day"])
    return ds
