"""Core types for multivariate speed series, forecasting windows and period slots."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# 1970-01-05 00:00 was a Monday; slot 0 is anchored there.
MONDAY_ORIGIN_MINUTES = 4 * 1440


class AlignmentError(ValueError):
    """A timestamp does not fall on the sampling grid."""


class InsufficientDataError(ValueError):
    """The series is too short for the requested windowing."""


@dataclass(frozen=True)
class PeriodConfig:
    steps_per_hour: int = 12
    hours_per_day: int = 24
    days_per_week: int = 7

    def __post_init__(self):
        for name in ("steps_per_hour", "hours_per_day", "days_per_week"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if 60 % self.steps_per_hour:
            raise ValueError("steps_per_hour must divide 60")

    @property
    def P(self) -> int:
        return self.steps_per_hour * self.hours_per_day * self.days_per_week

    @property
    def step_minutes(self) -> int:
        return 60 // self.steps_per_hour


def slot_of(timestamp, cfg: PeriodConfig = PeriodConfig()):
    """Period slot of an epoch-minute timestamp (scalar or array).

    Slot 0 is Monday 00:00; ordering is day-major, so with the defaults
    ``slot = day_of_week * 288 + hour * 12 + minute // 5``.
    """
    ts = np.asarray(timestamp, dtype=np.int64)
    offset = ts - MONDAY_ORIGIN_MINUTES
    if np.any(offset % cfg.step_minutes):
        raise AlignmentError(f"timestamp not aligned to {cfg.step_minutes}-minute grid")
    slots = (offset // cfg.step_minutes) % cfg.P
    return int(slots) if slots.ndim == 0 else slots


@dataclass(frozen=True, eq=False)
class SeriesFrame:
    """T x C speeds with epoch-minute timestamps. Zero encodes missing/stopped."""

    values: np.ndarray
    timestamps: np.ndarray
    sensor_ids: tuple = ()
    step_minutes: int = 5

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D (T x C), got shape {values.shape}")
        if ts.shape != (values.shape[0],):
            raise ValueError("timestamps length must equal T")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("speeds must be finite and >= 0")
        if len(ts) > 1 and np.any(np.diff(ts) != self.step_minutes):
            raise ValueError(f"timestamps must be strictly increasing with step {self.step_minutes}")
        ids = tuple(self.sensor_ids) if len(self.sensor_ids) else tuple(str(i) for i in range(values.shape[1]))
        if len(ids) != values.shape[1]:
            raise ValueError("sensor_ids length must equal C")
        values.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "sensor_ids", ids)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(self.values[start:stop], self.timestamps[start:stop], self.sensor_ids, self.step_minutes)

    def with_values(self, values) -> "SeriesFrame":
        return SeriesFrame(values, self.timestamps, self.sensor_ids, self.step_minutes)

    def equals(self, other: "SeriesFrame") -> bool:
        return (
            self.sensor_ids == other.sensor_ids
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.timestamps, other.timestamps)
        )


@dataclass(frozen=True, eq=False)
class InputWindow:
    """L x C x 2 model input: channel 0 speed, channel 1 slot / P."""

    data: np.ndarray
    origin_t: int
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError(f"window must be L x C x 2, got {self.data.shape}")

    @property
    def L(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]

    @property
    def speeds(self) -> np.ndarray:
        return self.data[:, :, 0]

    def slots(self, cfg: PeriodConfig = PeriodConfig()) -> np.ndarray:
        return np.rint(self.data[:, 0, 1] * cfg.P).astype(np.int64) % cfg.P


@dataclass(frozen=True, eq=False)
class HorizonTarget:
    data: np.ndarray
    origin_t: int


def encode_slots(slots, cfg: PeriodConfig = PeriodConfig()) -> np.ndarray:
    return np.asarray(slots, dtype=np.float64) / cfg.P


def window_arrays(frame: SeriesFrame, L: int, tau: int, cfg: PeriodConfig = PeriodConfig()):
    """Vectorised windowing.

    Returns ``(x, slots, y, origins)`` with x of shape (N, L, C), slots (N, L),
    y (N, tau, C) and origins the global index of each window's last step.
    """
    if L < 1 or tau < 1:
        raise ValueError("L and tau must be >= 1")
    if frame.T < L + tau:
        raise InsufficientDataError(f"T={frame.T} < L + tau = {L + tau}")
    n = frame.T - L - tau + 1
    # sliding_window_view puts the window axis last
    x = sliding_window_view(frame.values[: n + L - 1], L, axis=0).transpose(0, 2, 1)
    y = sliding_window_view(frame.values[L:], tau, axis=0)[:n].transpose(0, 2, 1)
    all_slots = slot_of(frame.timestamps, cfg)
    slots = sliding_window_view(all_slots[: n + L - 1], L)
    origins = np.arange(n) + L - 1
    return x, slots, y, origins


def make_windows(frame: SeriesFrame, L: int, tau: int, cfg: PeriodConfig = PeriodConfig()):
    """All (InputWindow, HorizonTarget) pairs; window i covers [i, i+L)."""
    x, slots, y, origins = window_arrays(frame, L, tau, cfg)
    pairs = []
    for i in range(len(origins)):
        enc = np.broadcast_to(encode_slots(slots[i], cfg)[:, None], x[i].shape)
        data = np.stack([x[i], enc], axis=-1)
        ts = frame.timestamps[i : i + L]
        pairs.append((InputWindow(data, int(origins[i]), ts), HorizonTarget(np.array(y[i]), int(origins[i]))))
    return pairs
