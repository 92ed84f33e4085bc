"""Zero counts, input entropy and adjacent-step Pearson correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series import InputWindow, SeriesFrame


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined when either vector is constant."""


@dataclass(frozen=True)
class ExtremenessConfig:
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class ExtremenessScore:
    zero_count: int
    entropy: float
    origin_t: int


def _speeds(window) -> np.ndarray:
    if isinstance(window, InputWindow):
        return window.speeds
    arr = np.asarray(window, dtype=np.float64)
    return arr[..., 0] if arr.ndim == 3 else arr


def count_zeros(window) -> int:
    return int(np.count_nonzero(_speeds(window) == 0))


def normalized_profile(speeds: np.ndarray) -> np.ndarray:
    """Each sensor's speeds over time divided by their sum; all-zero sensors become uniform.

    Works on (L, C) or batched (N, L, C) arrays.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    L = speeds.shape[-2]
    totals = speeds.sum(axis=-2, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, speeds / safe, 1.0 / L)


def input_entropy(window, cfg: ExtremenessConfig = ExtremenessConfig()) -> float:
    return float(batch_entropy(_speeds(window)[None], cfg)[0])


def batch_entropy(speeds: np.ndarray, cfg: ExtremenessConfig = ExtremenessConfig()) -> np.ndarray:
    """Entropy for a stack of (N, L, C) speed windows."""
    p = normalized_profile(speeds) + cfg.epsilon
    L = speeds.shape[-2]
    return -(p * np.log(p)).sum(axis=(-2, -1)) / L


def ppmcc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("ppmcc needs two 1-D vectors of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("constant vector")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def adjacent_ppmcc_profile(frame: SeriesFrame):
    """Correlation between consecutive sensor-speed vectors.

    Returns ``(rho, defined)``: length T-1 arrays; undefined entries are NaN
    in ``rho`` and False in ``defined``.
    """
    if frame.T < 2:
        raise ValueError("need T >= 2")
    x = frame.values
    d = x - x.mean(axis=1, keepdims=True)
    prev, cur = d[:-1], d[1:]
    num = np.einsum("tc,tc->t", prev, cur)
    den = np.sqrt(np.einsum("tc,tc->t", prev, prev) * np.einsum("tc,tc->t", cur, cur))
    defined = den > 0
    rho = np.full(frame.T - 1, np.nan)
    rho[defined] = np.clip(num[defined] / den[defined], -1.0, 1.0)
    return rho, defined


def score_windows(x: np.ndarray, origins, cfg: ExtremenessConfig = ExtremenessConfig()) -> list:
    """Scores for a stack of (N, L, C) speed windows."""
    zeros = np.count_nonzero(x == 0, axis=(1, 2))
    ent = batch_entropy(x, cfg)
    return [ExtremenessScore(int(z), float(e), int(o)) for z, e, o in zip(zeros, ent, origins)]


def quantile_buckets(values, origins, n_buckets: int) -> np.ndarray:
    """Rank-based quantile buckets.

    Windows are ordered by (value, origin_t); position k goes to bucket
    ``k * n_buckets // N``. Tied values all take the bucket of the first
    member of their tie group, so equal scores never straddle buckets.
    """
    values = np.asarray(values, dtype=np.float64)
    origins = np.asarray(origins)
    n = len(values)
    order = np.lexsort((origins, values))
    sorted_vals = values[order]
    rank_bucket = (np.arange(n) * n_buckets) // n
    new_group = np.ones(n, dtype=bool)
    new_group[1:] = sorted_vals[1:] != sorted_vals[:-1]
    group_start = np.maximum.accumulate(np.where(new_group, np.arange(n), 0))
    out = np.empty(n, dtype=np.int64)
    out[order] = rank_bucket[group_start]
    return out


def stratify(scores, n_buckets: int):
    """Bucket indices by zero count and by entropy, independently."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    if not scores:
        raise ValueError("scores must be non-empty")
    origins = [s.origin_t for s in scores]
    by_zero = quantile_buckets([s.zero_count for s in scores], origins, n_buckets)
    by_entropy = quantile_buckets([s.entropy for s in scores], origins, n_buckets)
    return by_zero, by_entropy
