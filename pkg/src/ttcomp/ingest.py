"""Loading sensor CSVs, chronological splits, and synthetic traffic with injected extremes."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .series import PeriodConfig, SeriesFrame

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
_EPOCH = datetime(1970, 1, 1)


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def to_epoch_minutes(text: str) -> int:
    delta = datetime.strptime(text.strip(), TIME_FORMAT) - _EPOCH
    return int(delta.total_seconds() // 60)


def from_epoch_minutes(minutes: int) -> str:
    return (_EPOCH + timedelta(minutes=int(minutes))).strftime(TIME_FORMAT)


def load_csv(path, step_minutes: int = 5) -> SeriesFrame:
    """Read ``timestamp,<id1>,<id2>,...`` rows; empty cells become 0."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip() != "timestamp":
            raise ParseError(f"{path}: header must be 'timestamp,<sensor_id>,...'")
        sensor_ids = tuple(h.strip() for h in header[1:])
        width = len(header)
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            try:
                ts = to_epoch_minutes(row[0])
            except ValueError:
                raise ParseError(f"{path}: row {lineno} has a malformed timestamp {row[0]!r}") from None
            if stamps and ts - stamps[-1] != step_minutes:
                raise ParseError(f"{path}: row {lineno} breaks the {step_minutes}-minute monotone grid")
            try:
                speeds = [float(c) if c.strip() else 0.0 for c in row[1:]]
            except ValueError:
                raise ParseError(f"{path}: row {lineno} has a non-numeric speed") from None
            stamps.append(ts)
            rows.append(speeds)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ParseError(f"{path}: speeds must be finite and non-negative")
    return SeriesFrame(values, np.array(stamps, dtype=np.int64), sensor_ids, step_minutes)


def save_csv(frame: SeriesFrame, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *frame.sensor_ids])
        for ts, row in zip(frame.timestamps, frame.values):
            writer.writerow([from_epoch_minutes(ts), *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")


def split(frame: SeriesFrame, spec: SplitSpec = SplitSpec()):
    """Chronological train/val/test; floor sizes, remainder goes to test."""
    if frame.T < 10:
        raise ConfigError(f"need at least 10 steps to split, got {frame.T}")
    n_train = int(np.floor(spec.train_frac * frame.T + 1e-9))
    n_val = int(np.floor(spec.val_frac * frame.T + 1e-9))
    return (
        frame.slice(0, n_train),
        frame.slice(n_train, n_train + n_val),
        frame.slice(n_train + n_val, frame.T),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Weekly-periodic speeds plus block-structured zero bursts and congestion.

    Event counts are ``round(rate * T)``, so the injected volume is fixed by
    the rates and only placement and shape depend on the seed.
    ``outage_fraction`` of zero bursts blank every sensor; the rest blank a
    contiguous sensor block sized by ``zero_burst_span[1]``.
    """

    C: int = 20
    weeks: int = 8
    base_speed: float = 60.0
    daily_amplitude: float = 20.0
    noise_std: float = 2.0
    zero_burst_rate: float = 0.0027
    zero_burst_span: tuple = ((2, 10), (2, 8))
    outage_fraction: float = 0.25
    congestion_rate: float = 0.002
    congestion_depth: float = 30.0
    congestion_span: tuple = ((12, 36), (3, 8))
    start: str = "2012-03-05 00:00:00"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "zero_burst_span", tuple(tuple(int(v) for v in s) for s in self.zero_burst_span))
        object.__setattr__(self, "congestion_span", tuple(tuple(int(v) for v in s) for s in self.congestion_span))
        if self.C < 1 or self.weeks < 1:
            raise ConfigError("C and weeks must be >= 1")
        for name in ("zero_burst_rate", "congestion_rate", "outage_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for lo, hi in (*self.zero_burst_span, *self.congestion_span):
            if lo < 1 or hi < lo:
                raise ConfigError("spans must satisfy 1 <= min <= max")
        if self.noise_std < 0 or self.congestion_depth < 0:
            raise ConfigError("noise_std and congestion_depth must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _daily_profile(hour: np.ndarray, weekday: np.ndarray) -> np.ndarray:
    """Unit-amplitude dip profile (<= 0): rush hours on weekdays, a midday sag at weekends."""
    gauss = lambda mu, sd: np.exp(-0.5 * ((hour - mu) / sd) ** 2)
    workday = -(gauss(8.0, 1.0) + 0.8 * gauss(17.5, 1.2))
    weekend = -0.4 * gauss(14.0, 2.0)
    wave = 0.1 * (np.sin(2 * np.pi * hour / 24.0) - 1.0)
    return np.where(weekday, workday, weekend) + wave


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SeriesFrame:
    rng = np.random.default_rng(spec.seed)
    cfg = PeriodConfig()
    T = spec.weeks * cfg.P
    C = spec.C
    start = to_epoch_minutes(spec.start)
    timestamps = start + cfg.step_minutes * np.arange(T, dtype=np.int64)

    # sensor heterogeneity drawn first so it does not depend on event settings
    level = spec.base_speed + rng.normal(0.0, 3.0, C)
    amp = spec.daily_amplitude * rng.uniform(0.6, 1.2, C)

    minutes_since_monday = (timestamps - 4 * 1440) % (7 * 1440)
    day = minutes_since_monday // 1440
    hour = (minutes_since_monday % 1440) / 60.0
    profile = _daily_profile(hour, day < 5)
    values = level[None, :] + amp[None, :] * profile[:, None]
    if spec.noise_std > 0:
        values = values + rng.normal(0.0, spec.noise_std, (T, C))
    values = np.maximum(values, 1.0)

    n_jams = int(round(spec.congestion_rate * T))
    (dmin, dmax), (smin, smax) = spec.congestion_span
    for _ in range(n_jams):
        dur = int(rng.integers(dmin, dmax + 1))
        width = min(int(rng.integers(smin, smax + 1)), C)
        t0 = int(rng.integers(0, T))
        c0 = int(rng.integers(0, C))
        sensors = (c0 + np.arange(width)) % C
        ramp = max(dur // 3, 1)
        shape = np.ones(dur)
        shape[:ramp] = np.arange(1, ramp + 1) / ramp
        shape[-ramp:] = np.minimum(shape[-ramp:], np.arange(ramp, 0, -1) / ramp)
        drop = spec.congestion_depth * rng.uniform(0.6, 1.0, width)
        t1 = min(t0 + dur, T)
        values[t0:t1, sensors] -= shape[: t1 - t0, None] * drop[None, :]
    values = np.maximum(values, 1.0)

    n_bursts = int(round(spec.zero_burst_rate * T))
    n_full = int(round(n_bursts * spec.outage_fraction))
    (dmin, dmax), (smin, smax) = spec.zero_burst_span
    for k in range(n_bursts):
        dur = int(rng.integers(dmin, dmax + 1))
        t0 = int(rng.integers(0, T))
        if k < n_full:
            sensors = np.arange(C)
        else:
            width = min(int(rng.integers(smin, smax + 1)), C)
            sensors = (int(rng.integers(0, C)) + np.arange(width)) % C
        values[t0 : t0 + dur, sensors] = 0.0

    ids = tuple(f"s{c:03d}" for c in range(C))
    return SeriesFrame(values, timestamps, ids, cfg.step_minutes)


def all_zero_fraction(frame: SeriesFrame) -> float:
    return float(np.mean(np.all(frame.values == 0, axis=1)))


def all_zero_window_fraction(frame: SeriesFrame, L: int = 12) -> float:
    """Fraction of length-L input windows containing at least one all-zero step."""
    rows = np.all(frame.values == 0, axis=1).astype(np.int64)
    if frame.T < L:
        return 0.0
    hits = np.convolve(rows, np.ones(L, dtype=np.int64), mode="valid")
    return float(np.mean(hits > 0))
