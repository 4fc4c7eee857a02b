"""Weather4cast-shaped samples: input stacking, targets, masks, windows, synthetic data."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .losses import TARGET_VARIABLES
from .rng import RngStream

N_INPUT_FRAMES = 4
N_TARGET_FRAMES = 32
WINDOW_LENGTH = N_INPUT_FRAMES + N_TARGET_FRAMES
CADENCE_MINUTES = 15

# Products stored per frame. ctth_tempe_mask is derived from temperature validity.
STORED_CHANNELS = ("temperature", "ctth_pres", "crr_intensity", "crr_accum",
                   "asii_turb_trop_prob", "cma", "ct", "ctth_alt")
STATIC_CHANNELS = ("altitude", "latitude", "longitude")
DERIVED_CHANNELS = ("ctth_tempe_mask",)

DEFAULT_RANGES = {
    "temperature": (200.0, 320.0),      # K
    "ctth_pres": (100.0, 1100.0),       # hPa
    "crr_intensity": (0.0, 50.0),       # mm/h
    "crr_accum": (0.0, 50.0),           # mm
    "asii_turb_trop_prob": (0.0, 1.0),
    "cma": (0.0, 1.0),
    "ct": (0.0, 15.0),                  # class index
    "ctth_alt": (0.0, 20000.0),         # m
    "altitude": (-500.0, 5000.0),       # m
    "latitude": (-90.0, 90.0),
    "longitude": (-180.0, 180.0),
}

TABLE1_DYNAMIC = ("temperature", "ctth_pres", "crr_intensity", "crr_accum",
                  "asii_turb_trop_prob", "cma", "ct", "ctth_tempe_mask")


@dataclass(frozen=True)
class FeatureSpec:
    """Which channels go into each input frame, and how gaps are filled."""

    dynamic: tuple = TABLE1_DYNAMIC
    static: tuple = STATIC_CHANNELS
    use_ctth_alt: bool = False
    interpolate_temperature: bool = False
    interpolate_ctth_pres: bool = False
    ct_one_hot: bool = False
    ct_classes: int = 16

    def __post_init__(self):
        object.__setattr__(self, "dynamic", tuple(self.dynamic))
        object.__setattr__(self, "static", tuple(self.static))
        names = self.frame_channels + self.static
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate channel names in feature spec: {names}")
        known = set(STORED_CHANNELS) | set(DERIVED_CHANNELS)
        for n in self.frame_channels:
            if n.split("=")[0] not in known:
                raise ConfigError(f"unknown dynamic channel {n!r}")
        for n in self.static:
            if n not in STATIC_CHANNELS:
                raise ConfigError(f"unknown static channel {n!r}")
        if self.ct_classes < 2:
            raise ConfigError("ct_classes must be >= 2")

    @property
    def dynamic_channels(self) -> tuple:
        names = self.dynamic
        if self.use_ctth_alt and "ctth_alt" not in names:
            names = names + ("ctth_alt",)
        return names

    @property
    def frame_channels(self) -> tuple:
        """Per-frame plane names after expanding a one-hot ``ct``."""
        out = []
        for n in self.dynamic_channels:
            if n == "ct" and self.ct_one_hot:
                out.extend(f"ct={k}" for k in range(self.ct_classes))
            else:
                out.append(n)
        return tuple(out)

    @property
    def in_channels(self) -> int:
        return N_INPUT_FRAMES * len(self.frame_channels) + len(self.static)

    def input_channel_names(self) -> list[str]:
        return [f"t{t}:{n}" for t in range(N_INPUT_FRAMES) for n in self.frame_channels] + list(self.static)

    @classmethod
    def ablation(cls, experiment: str) -> "FeatureSpec":
        """Feature sets of the R1 ablation table ("base", "1" .. "4")."""
        core = ("temperature", "crr_intensity", "asii_turb_trop_prob", "cma")
        presets = {
            "base": dict(dynamic=core),
            "1": dict(dynamic=core + ("crr_accum",)),
            "2": dict(dynamic=("temperature", "ctth_pres", "crr_intensity", "crr_accum",
                               "asii_turb_trop_prob", "cma", "ct"), use_ctth_alt=True),
            "3": dict(dynamic=TABLE1_DYNAMIC),
            "4": dict(dynamic=TABLE1_DYNAMIC, interpolate_temperature=True),
        }
        if experiment not in presets:
            raise ConfigError(f"unknown ablation experiment {experiment!r}")
        return cls(**presets[experiment])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dynamic"] = list(self.dynamic)
        d["static"] = list(self.static)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(**d)


@dataclass
class Day:
    index: int
    values: dict   # name -> float32 (T, H, W), physical units
    masks: dict    # name -> bool (T, H, W), True where valid

    @property
    def n_frames(self) -> int:
        return next(iter(self.values.values())).shape[0]

    def frame(self, t: int) -> dict:
        return {n: (self.values[n][t], self.masks[n][t]) for n in self.values}


@dataclass
class RegionDataset:
    region_id: str
    days: list
    statics: dict                 # name -> float32 (H, W)
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    frames_per_day: int = 96

    @property
    def grid(self) -> tuple:
        return next(iter(self.statics.values())).shape

    def subset(self, day_indices: Sequence[int]) -> "RegionDataset":
        keep = set(day_indices)
        return dataclasses.replace(self, days=[d for d in self.days if d.index in keep])

    def validate(self) -> None:
        h, w = self.grid
        for d in self.days:
            if d.n_frames > 24 * 60 // CADENCE_MINUTES:
                raise ConfigError(f"day {d.index}: {d.n_frames} frames exceeds one day at 15-minute cadence")
            for n, v in d.values.items():
                if v.shape[1:] != (h, w) or d.masks[n].shape != v.shape:
                    raise ConfigError(f"day {d.index} channel {n}: shape {v.shape} inconsistent with grid {(h, w)}")


def split_days(region: RegionDataset, fractions=(0.7, 0.15, 0.15)):
    """Split a region chronologically into train/validation/test day subsets."""
    n = len(region.days)
    if n < len(fractions):
        raise ConfigError(f"region {region.region_id} has {n} days, cannot split into {len(fractions)} parts")
    cuts = np.floor(np.cumsum(fractions) / np.sum(fractions) * n + 1e-9).astype(int)
    # Every part gets at least one day.
    bounds = [0]
    for i, c in enumerate(cuts):
        lo = bounds[-1] + 1
        hi = n - (len(fractions) - 1 - i)
        bounds.append(int(min(max(c, lo), hi)))
    bounds[-1] = n
    idx = [d.index for d in region.days]
    return [region.subset(idx[bounds[i]:bounds[i + 1]]) for i in range(len(fractions))]


# -- elementwise building blocks ---------------------------------------------

def normalize(x, name: str, ranges: Mapping = DEFAULT_RANGES):
    lo, hi = ranges[name]
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def denormalize(x, name: str, ranges: Mapping = DEFAULT_RANGES):
    lo, hi = ranges[name]
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


def zero_fill(values, mask):
    return np.where(mask, values, np.zeros((), dtype=np.asarray(values).dtype))


def interpolate_temporal(series, mask):
    """Fill interior gaps of per-pixel series along axis 0 by linear interpolation.

    Returns ``(filled, filled_mask)``. Valid samples are untouched; leading and
    trailing gaps stay invalid.
    """
    series = np.asarray(series)
    mask = np.asarray(mask, dtype=bool)
    t = np.arange(series.shape[0]).reshape((-1,) + (1,) * (series.ndim - 1))
    t = np.broadcast_to(t, series.shape)
    prev_idx = np.maximum.accumulate(np.where(mask, t, -1), axis=0)
    n = series.shape[0]
    next_idx = np.flip(np.minimum.accumulate(np.flip(np.where(mask, t, n), axis=0), axis=0), axis=0)
    interior = ~mask & (prev_idx >= 0) & (next_idx < n)
    p = np.clip(prev_idx, 0, n - 1)
    q = np.clip(next_idx, 0, n - 1)
    v0 = np.take_along_axis(series, p, axis=0).astype(np.float64)
    v1 = np.take_along_axis(series, q, axis=0).astype(np.float64)
    span = np.where(interior, q - p, 1)
    frac = (t - p) / span
    filled = np.where(interior, v0 + (v1 - v0) * frac, series).astype(series.dtype)
    return filled, mask | interior


def frame_planes(values: Mapping, masks: Mapping, spec: FeatureSpec, ranges: Mapping = DEFAULT_RANGES,
                 raw_masks: Mapping | None = None):
    """Model-space planes for a stack of frames: ``(T, n_frame_channels, H, W)`` float32.

    Values are normalized to [0, 1] by the declared range, then missing pixels
    are set to 0. ``raw_masks`` (pre-interpolation validity) feeds the
    ``ctth_tempe_mask`` channel; it defaults to ``masks``.
    """
    raw_masks = masks if raw_masks is None else raw_masks
    planes = []
    for name in spec.frame_channels:
        if name == "ctth_tempe_mask":
            planes.append(np.asarray(raw_masks["temperature"], dtype=np.float32))
        elif name.startswith("ct="):
            k = int(name[3:])
            planes.append(((np.rint(values["ct"]) == k) & masks["ct"]).astype(np.float32))
        else:
            if name not in values:
                raise ConfigError(f"channel {name!r} required by the feature spec is not in the data")
            planes.append(zero_fill(normalize(values[name], name, ranges), masks[name]).astype(np.float32))
    return np.stack(planes, axis=1)


def static_planes(statics: Mapping, spec: FeatureSpec, ranges: Mapping = DEFAULT_RANGES):
    if not spec.static:
        return np.zeros((0,) + next(iter(statics.values())).shape, dtype=np.float32)
    missing = [n for n in spec.static if n not in statics]
    if missing:
        raise ConfigError(f"static channels {missing} not in the data")
    return np.stack([normalize(statics[n], n, ranges).astype(np.float32) for n in spec.static])


def assemble_input(frames: Sequence[Mapping], statics: Mapping, spec: FeatureSpec = FeatureSpec(),
                   ranges: Mapping = DEFAULT_RANGES):
    """Stack 4 frame records (``name -> (values, mask)``) plus statics into ``(1, C, H, W)``.

    Channel order: frame-major, then feature order of ``spec``; statics last.
    """
    if len(frames) != N_INPUT_FRAMES:
        raise ConfigError(f"need {N_INPUT_FRAMES} input frames, got {len(frames)}")
    names = frames[0].keys()
    values = {n: np.stack([f[n][0] for f in frames]) for n in names}
    masks = {n: np.stack([np.asarray(f[n][1], dtype=bool) for f in frames]) for n in names}
    planes = frame_planes(values, masks, spec, ranges)
    h, w = planes.shape[2:]
    x = np.concatenate([planes.reshape(-1, h, w), static_planes(statics, spec, ranges)])
    if x.shape[0] != spec.in_channels:
        raise ConfigError(f"assembled {x.shape[0]} channels, spec declares {spec.in_channels}")
    return x[None]


def target_planes(values: Mapping, masks: Mapping, ranges: Mapping = DEFAULT_RANGES):
    """Normalized, zero-filled target variables ``(T, 4, H, W)`` plus their masks."""
    y = np.stack([zero_fill(normalize(values[n], n, ranges), masks[n]) for n in TARGET_VARIABLES], axis=1)
    m = np.stack([np.asarray(masks[n], dtype=bool) for n in TARGET_VARIABLES], axis=1)
    return y.astype(np.float32), m


def extract_targets(frames: Sequence[Mapping], ranges: Mapping = DEFAULT_RANGES):
    """32 frame records -> ``(1, 128, H, W)`` targets and mask, lead-time major."""
    if len(frames) != N_TARGET_FRAMES:
        raise ConfigError(f"need {N_TARGET_FRAMES} target frames, got {len(frames)}")
    values = {n: np.stack([f[n][0] for f in frames]) for n in TARGET_VARIABLES}
    masks = {n: np.stack([np.asarray(f[n][1], dtype=bool) for f in frames]) for n in TARGET_VARIABLES}
    y, m = target_planes(values, masks, ranges)
    h, w = y.shape[2:]
    return y.reshape(1, -1, h, w), m.reshape(1, -1, h, w)


# -- windows -----------------------------------------------------------------

class PreparedDay:
    """Model-space arrays for a whole day, so windows are cheap slices."""

    def __init__(self, region: RegionDataset, day: Day, spec: FeatureSpec):
        values, masks = dict(day.values), dict(day.masks)
        for flag, name in ((spec.interpolate_temperature, "temperature"), (spec.interpolate_ctth_pres, "ctth_pres")):
            if flag:
                values[name], masks[name] = interpolate_temporal(values[name], masks[name])
        self.region_id = region.region_id
        self.day_index = day.index
        self.inputs = frame_planes(values, masks, spec, region.ranges, raw_masks=day.masks)
        self.statics = static_planes(region.statics, spec, region.ranges)
        self.targets, self.target_masks = target_planes(day.values, day.masks, region.ranges)
        self.n_frames = day.n_frames


@dataclass(frozen=True)
class SampleWindow:
    """4 input frames and the following 32 target frames from one day."""

    day: PreparedDay = field(repr=False, compare=False)
    region_id: str
    day_index: int
    start: int

    @property
    def provenance(self) -> tuple:
        return (self.region_id, self.day_index, self.start)

    @property
    def input(self) -> np.ndarray:
        p = self.day.inputs[self.start:self.start + N_INPUT_FRAMES]
        h, w = p.shape[2:]
        return np.concatenate([p.reshape(-1, h, w), self.day.statics])[None]

    @property
    def target(self) -> np.ndarray:
        s = self.start + N_INPUT_FRAMES
        y = self.day.targets[s:s + N_TARGET_FRAMES]
        return y.reshape(1, -1, *y.shape[2:])

    @property
    def target_mask(self) -> np.ndarray:
        s = self.start + N_INPUT_FRAMES
        m = self.day.target_masks[s:s + N_TARGET_FRAMES]
        return m.reshape(1, -1, *m.shape[2:])

    @property
    def last_observed(self) -> tuple:
        """Target variables of the last input frame (zero-filled) and their mask."""
        t = self.start + N_INPUT_FRAMES - 1
        return self.day.targets[t], self.day.target_masks[t]


def window_split(region: RegionDataset, stride: int = 1, spec: FeatureSpec = FeatureSpec()) -> list:
    """Every 36-frame window inside each day, starts ``0, stride, 2*stride, ...``."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    windows = []
    for day in region.days:
        if day.n_frames < WINDOW_LENGTH:
            continue
        prepared = PreparedDay(region, day, spec)
        for s in range(0, day.n_frames - WINDOW_LENGTH + 1, stride):
            windows.append(SampleWindow(prepared, region.region_id, day.index, s))
    return windows


def stack_windows(windows: Sequence[SampleWindow]):
    """Batch arrays ``(x, y, mask)`` for a list of windows."""
    x = np.concatenate([w.input for w in windows])
    y = np.concatenate([w.target for w in windows])
    m = np.concatenate([w.target_mask for w in windows])
    return x, y, m


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    size: int = 32
    days: int = 4
    frames_per_day: int = 96
    missing_rate: float = 0.05
    region_id: str = "R1"
    max_speed: float = 0.3          # pixels per frame, per axis
    correlation_length: float = 6.0  # pixels

    def __post_init__(self):
        if self.size < 4 or self.days < 1 or self.frames_per_day < 1:
            raise ConfigError("size >= 4, days >= 1 and frames_per_day >= 1 required")
        if self.frames_per_day > 24 * 60 // CADENCE_MINUTES:
            raise ConfigError("frames_per_day cannot exceed 96 at 15-minute cadence")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError("missing_rate must be in [0, 1]")


def _smooth_spectrum(rng: RngStream, n: int, corr: float):
    """Fourier coefficients of a unit-variance Gaussian random field on an n x n torus."""
    noise = rng.normal((n, n))
    k = np.fft.fftfreq(n)
    kx, ky = np.meshgrid(k, k, indexing="xy")
    filt = np.exp(-0.5 * (kx ** 2 + ky ** 2) * (2 * np.pi * corr) ** 2)
    spec = np.fft.fft2(noise) * filt
    spec[0, 0] = 0.0
    field_ = np.fft.ifft2(spec).real
    return spec / (field_.std() + 1e-12), kx, ky


def _advect(spec, kx, ky, vx, vy, t):
    """Field advected by ``(vx, vy) * t`` pixels via a Fourier phase shift; shape (T, n, n)."""
    phase = np.exp(-2j * np.pi * (kx[None] * vx + ky[None] * vy) * t[:, None, None])
    return np.fft.ifft2(spec[None] * phase).real


def _inject_gaps(rng: RngStream, shape, rate: float):
    t, h, w = shape
    mask = np.ones(shape, dtype=bool)
    if rate <= 0:
        return mask
    u = rng.uniform(t)
    whole = rng.uniform(t)
    hs = rng.integers(max(1, h // 4), max(2, h // 2 + 1), size=t)
    ws = rng.integers(max(1, w // 4), max(2, w // 2 + 1), size=t)
    r0 = rng.uniform(t)
    c0 = rng.uniform(t)
    for i in range(t):
        if whole[i] < rate / 10:
            mask[i] = False
        elif u[i] < rate:
            r = int(r0[i] * (h - hs[i] + 1))
            c = int(c0[i] * (w - ws[i] + 1))
            mask[i, r:r + hs[i], c:c + ws[i]] = False
    return mask


def synth_generate(cfg: SynthConfig = SynthConfig(), seed: int = 0) -> RegionDataset:
    """Deterministic synthetic region with advecting, physically-ranged fields.

    Per day a cloud field, an ASII field and a temperature anomaly drift with a
    constant random velocity. Temperature follows altitude, a diurnal cycle
    and cloud cover; rain comes from the densest cloud; gaps are random
    rectangles (and occasionally whole frames) per channel.
    """
    rng = RngStream(seed)
    n = cfg.size
    ranges = dict(DEFAULT_RANGES)

    alt_spec, _, _ = _smooth_spectrum(rng, n, cfg.correlation_length)
    alt = np.fft.ifft2(alt_spec).real
    alt = (alt - alt.min()) / (np.ptp(alt) + 1e-12) * float(rng.uniform() * 2000 + 500)
    lat0 = 30 + 30 * float(rng.uniform())
    lon0 = -20 + 50 * float(rng.uniform())
    span = 0.036 * n
    rows, cols = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    statics = {
        "altitude": alt.astype(np.float32),
        "latitude": (lat0 + span * (1 - rows)).astype(np.float32),
        "longitude": (lon0 + span * cols).astype(np.float32),
    }

    t = np.arange(cfg.frames_per_day, dtype=np.float64)
    days = []
    for d in range(cfg.days):
        vx, vy = (rng.uniform(2) * 2 - 1) * cfg.max_speed
        specs = [_smooth_spectrum(rng, n, cfg.correlation_length) for _ in range(3)]
        cloud, asii_f, anomaly = (_advect(s, kx, ky, vx, vy, t) for s, kx, ky in specs)
        base_t = 275 + 20 * float(rng.uniform())
        diurnal = 8 * np.sin(2 * np.pi * (t / 96.0 - 0.25))[:, None, None]

        cloudy = np.clip(cloud, 0, None)
        temperature = base_t + diurnal - 0.0065 * alt[None] + 3 * anomaly - 30 * cloudy
        crr = np.clip(9 * np.clip(cloud - 1.5, 0, None) ** 1.5, 0, 50)
        # hourly accumulation of the rate (mean over the last 4 frames)
        csum = np.cumsum(np.concatenate([np.zeros((4, n, n)), crr]), axis=0)
        accum = np.clip((csum[4:] - csum[:-4]) / 4.0, 0, 50)
        asii = 1 / (1 + np.exp(-(0.55 * asii_f - 1.5)))
        cma = (cloud > 0.6).astype(np.float64)
        ctth_pres = 1000 - 250 * np.clip(cloud, 0, 3.6)
        ctth_alt = 12000 * np.clip(cloud / 4, 0, 1)
        ct = np.digitize(cloud, [0.6, 1.0, 1.5, 2.0]).astype(np.float64)

        values = {
            "temperature": temperature, "ctth_pres": ctth_pres, "crr_intensity": crr,
            "crr_accum": accum, "asii_turb_trop_prob": asii, "cma": cma, "ct": ct, "ctth_alt": ctth_alt,
        }
        values = {k: np.clip(v, *ranges[k]).astype(np.float32) for k, v in values.items()}
        masks = {k: _inject_gaps(rng, values[k].shape, cfg.missing_rate) for k in STORED_CHANNELS}
        days.append(Day(d, {k: values[k] for k in STORED_CHANNELS}, masks))

    ds = RegionDataset(cfg.region_id, days, statics, ranges, cfg.frames_per_day)
    ds.validate()
    return ds
