"""Zero imputation and the periodic data bank of training records."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .series import InputWindow, PeriodConfig, SeriesFrame, slot_of

log = logging.getLogger(__name__)

MAGIC = b"CPBK"
VERSION = 1


class BankFormatError(ValueError):
    pass


def impute_zeros(train: SeriesFrame, cfg: PeriodConfig = PeriodConfig(), L: int = 12) -> SeriesFrame:
    """Replace zero speeds in a training frame.

    All-zero rows take the per-sensor mean of the other records in the same
    period slot. Remaining zeros take the mean of that sensor's nonzero values
    inside the enclosing length-``L`` block ``[k*L, (k+1)*L)``. Either rule
    falls back to the same-slot mean, then to the sensor's global nonzero mean.
    """
    x = train.values
    if not np.any(x == 0):
        return train
    out = x.copy()
    nz = x != 0
    slots = slot_of(train.timestamps, cfg)
    full_rows = ~nz.any(axis=1)

    # same-slot per-sensor sums over nonzero entries
    slot_sum = np.zeros((cfg.P, train.C))
    slot_cnt = np.zeros((cfg.P, train.C))
    np.add.at(slot_sum, slots, np.where(nz, x, 0.0))
    np.add.at(slot_cnt, slots, nz.astype(np.float64))
    sensor_cnt = nz.sum(axis=0)
    global_mean = np.where(sensor_cnt > 0, np.where(nz, x, 0.0).sum(axis=0) / np.maximum(sensor_cnt, 1), np.nan)
    if np.any(sensor_cnt == 0):
        raise ValueError("a sensor has no nonzero record in the training split")

    def slot_mean(t, c):
        cnt = slot_cnt[slots[t], c]
        if cnt > 0:
            return slot_sum[slots[t], c] / cnt
        log.warning("slot %d has no nonzero record for sensor %d; using global sensor mean", slots[t], c)
        return global_mean[c]

    for t in np.flatnonzero(full_rows):
        out[t] = [slot_mean(t, c) for c in range(train.C)]

    block = np.arange(train.T) // L
    n_blocks = block[-1] + 1
    blk_sum = np.zeros((n_blocks, train.C))
    blk_cnt = np.zeros((n_blocks, train.C))
    np.add.at(blk_sum, block, np.where(nz, x, 0.0))
    np.add.at(blk_cnt, block, nz.astype(np.float64))
    ts_, cs_ = np.nonzero(~nz & ~full_rows[:, None])
    for t, c in zip(ts_, cs_):
        b = block[t]
        out[t, c] = blk_sum[b, c] / blk_cnt[b, c] if blk_cnt[b, c] > 0 else slot_mean(t, c)
    return train.with_values(out)


@dataclass
class BankSample:
    data: np.ndarray  # L x (R*C) x 1
    source_slots: np.ndarray  # L
    record_indices: np.ndarray  # L x R, indices within the source slot
    source_timestamps: np.ndarray  # L x R
    R: int


class PeriodicDataBank:
    """Ragged store of training records grouped by period slot.

    Records live in one flat (N, C) float32 array sorted by (slot, timestamp);
    ``offsets[p]:offsets[p+1]`` delimits slot ``p``.
    """

    def __init__(self, values, timestamps, offsets, cfg: PeriodConfig = PeriodConfig(), built_from: str = "train"):
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.cfg = cfg
        self.built_from = built_from
        if built_from != "train":
            raise ValueError("a bank may only be built from the training split")
        if self.offsets.shape != (cfg.P + 1,) or self.offsets[-1] != len(self.values):
            raise ValueError("offsets inconsistent with record count")
        counts = np.diff(self.offsets)
        nonempty = np.flatnonzero(counts > 0)
        if len(nonempty) == 0:
            raise ValueError("bank is empty")
        # nearest non-empty slot at or after p, cyclically
        pos = np.searchsorted(nonempty, np.arange(cfg.P))
        self._resolved = nonempty[pos % len(nonempty)]

    @property
    def P(self) -> int:
        return self.cfg.P

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return np.diff(self.offsets)

    def slot(self, p: int):
        a, b = self.offsets[p], self.offsets[p + 1]
        return self.timestamps[a:b], self.values[a:b]

    def resolve(self, slots) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64) % self.P
        resolved = self._resolved[slots]
        moved = resolved != slots
        if np.any(moved):
            log.info("%d empty-slot lookups redirected to the next non-empty slot", int(moved.sum()))
        return resolved

    def draw(self, key_slots, R: int, rng: np.random.Generator, exclude_near=None, radius: int = 0) -> np.ndarray:
        """Flat record indices of shape (n, R), one row per requested slot.

        Draws without replacement when a slot holds at least R eligible
        records, otherwise with replacement. Rows of ``exclude_near``
        (epoch minutes) mark records within ``radius`` minutes as ineligible
        unless that would leave nothing to draw.
        """
        if R < 1:
            raise ValueError("R must be >= 1")
        slots = self.resolve(np.ravel(key_slots))
        n = len(slots)
        start = self.offsets[slots]
        q = self.offsets[slots + 1] - start
        qmax = int(q.max())
        cand = start[:, None] + np.arange(qmax)[None, :]
        valid = np.arange(qmax)[None, :] < q[:, None]
        if exclude_near is not None:
            near = np.abs(self.timestamps[np.minimum(cand, len(self.timestamps) - 1)] - np.ravel(exclude_near)[:, None]) <= radius
            keep = valid & ~near
            valid = np.where(keep.any(axis=1, keepdims=True), keep, valid)
        n_valid = valid.sum(axis=1)
        keys = rng.random((n, qmax))
        keys[~valid] = np.inf
        order = np.argsort(keys, axis=1, kind="stable")
        if qmax >= R:
            picks = order[:, :R].copy()
        else:
            picks = np.zeros((n, R), dtype=np.int64)
        short = n_valid < R
        if np.any(short):
            j = (rng.random((int(short.sum()), R)) * n_valid[short, None]).astype(np.int64)
            picks[short] = np.take_along_axis(order[short], j, axis=1)
        return np.take_along_axis(cand, picks, axis=1)

    def equals(self, other: "PeriodicDataBank") -> bool:
        return (
            self.cfg == other.cfg
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.timestamps, other.timestamps)
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )


def build_bank(train: SeriesFrame, cfg: PeriodConfig = PeriodConfig()) -> PeriodicDataBank:
    if np.any(train.values == 0):
        raise ValueError("bank input must be zero-free; run impute_zeros first")
    slots = slot_of(train.timestamps, cfg)
    order = np.lexsort((train.timestamps, slots))
    counts = np.bincount(slots, minlength=cfg.P)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return PeriodicDataBank(train.values[order], train.timestamps[order], offsets, cfg)


def sample_keys(bank: PeriodicDataBank, window: InputWindow, R: int, rng_seed: int) -> BankSample:
    """R records per window step from the slot one step ahead, concatenated along sensors."""
    if window.C != bank.C:
        raise ValueError(f"window has {window.C} sensors, bank has {bank.C}")
    rng = np.random.default_rng(rng_seed)
    key_slots = bank.resolve(window.slots(bank.cfg) + 1)
    flat = bank.draw(key_slots, R, rng)
    L = window.L
    data = bank.values[flat].reshape(L, R * bank.C, 1).astype(np.float64)
    return BankSample(
        data=data,
        source_slots=key_slots,
        record_indices=flat - bank.offsets[key_slots][:, None],
        source_timestamps=bank.timestamps[flat],
        R=R,
    )


def save_bank(bank: PeriodicDataBank, path) -> None:
    parts = [MAGIC, struct.pack("<HII", VERSION, bank.P, bank.C)]
    parts.append(struct.pack("<III", bank.cfg.steps_per_hour, bank.cfg.hours_per_day, bank.cfg.days_per_week))
    for p in range(bank.P):
        ts, vals = bank.slot(p)
        parts.append(struct.pack("<I", len(ts)))
        parts.append(ts.astype("<i8").tobytes())
        parts.append(vals.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> PeriodicDataBank:
    buf = Path(path).read_bytes()
    if len(buf) < 26 or buf[:4] != MAGIC:
        raise BankFormatError(f"{path}: not a bank file")
    version, P, C = struct.unpack_from("<HII", buf, 4)
    if version != VERSION:
        raise BankFormatError(f"{path}: unsupported bank version {version}")
    cfg = PeriodConfig(*struct.unpack_from("<III", buf, 14))
    if cfg.P != P:
        raise BankFormatError(f"{path}: period header mismatch")
    pos = 26
    stamps, values, counts = [], [], []
    for _ in range(P):
        if pos + 4 > len(buf):
            raise BankFormatError(f"{path}: truncated")
        (q,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + 8 * q + 4 * q * C
        if end > len(buf):
            raise BankFormatError(f"{path}: truncated")
        stamps.append(np.frombuffer(buf, "<i8", q, pos))
        values.append(np.frombuffer(buf, "<f4", q * C, pos + 8 * q).reshape(q, C))
        counts.append(q)
        pos = end
    if pos != len(buf):
        raise BankFormatError(f"{path}: trailing bytes")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return PeriodicDataBank(np.concatenate(values), np.concatenate(stamps), offsets, cfg)
