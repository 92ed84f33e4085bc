"""Masked forecast metrics, extremeness-stratified reports and the attention benchmark."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from threadpoolctl import threadpool_limits

from .compformer import softmax
from .extremeness import stratify

HORIZONS = (3, 6, 12)


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: float  # fraction, not percent
    count: int = 0

    @property
    def empty(self) -> bool:
        return self.count == 0

    def as_tuple(self):
        return self.mae, self.rmse, self.mape


def compute_metrics(pred, target, mask_zero_targets: bool = True) -> Metrics:
    """MAE, RMSE and MAPE over unmasked positions; MAPE always skips zero targets.

    An empty evaluation set gives NaN metrics with ``count == 0``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = target != 0 if mask_zero_targets else np.ones(target.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Metrics(float("nan"), float("nan"), float("nan"), 0)
    err = np.abs(pred - target)[mask]
    nz = target[mask] != 0
    mape = float(np.mean(err[nz] / np.abs(target[mask][nz]))) if nz.any() else float("nan")
    return Metrics(float(err.mean()), float(np.sqrt(np.mean(err**2))), mape, n)


@dataclass
class BucketRow:
    bucket: int
    windows: int
    metrics: Metrics
    control: Metrics = None
    loss_gap: float = None  # control MAE - compensated MAE


@dataclass
class MetricsReport:
    horizons: dict  # horizon -> Metrics
    overall: Metrics
    zero_buckets: list  # BucketRow
    entropy_buckets: list
    window_count: int
    control_horizons: dict = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        m = lambda x: None if x is None else Metrics(**x)
        rows = lambda rs: [BucketRow(r["bucket"], r["windows"], m(r["metrics"]), m(r["control"]), r["loss_gap"]) for r in rs]
        horizons = lambda h: None if h is None else {int(k): m(v) for k, v in h.items()}
        return cls(
            horizons(d["horizons"]),
            m(d["overall"]),
            rows(d["zero_buckets"]),
            rows(d["entropy_buckets"]),
            d["window_count"],
            horizons(d["control_horizons"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def format_table(self) -> str:
        lines = ["horizon   MAE     RMSE    MAPE"]
        for h, mt in self.horizons.items():
            lines.append(f"{h * 5:>4} min  {mt.mae:6.3f}  {mt.rmse:6.3f}  {100 * mt.mape:5.2f}%")
        o = self.overall
        lines.append(f"overall   {o.mae:6.3f}  {o.rmse:6.3f}  {100 * o.mape:5.2f}%")
        for title, rows in (("zero-count", self.zero_buckets), ("entropy", self.entropy_buckets)):
            lines.append(f"\n{title} bucket  windows   MAE     control  gap")
            for r in rows:
                ctrl = f"{r.control.mae:7.3f}" if r.control is not None else "      -"
                gap = f"{r.loss_gap:+.3f}" if r.loss_gap is not None else "-"
                lines.append(f"{r.bucket:>6}  {r.windows:>12}  {r.metrics.mae:6.3f}  {ctrl}  {gap}")
        return "\n".join(lines)


def _horizon_metrics(pred, target, horizons):
    tau = pred.shape[1]
    return {h: compute_metrics(pred[:, h - 1], target[:, h - 1]) for h in horizons if h <= tau}


def stratified_report(predictions, targets, scores, n_buckets: int = 4, control_predictions=None, horizons=HORIZONS) -> MetricsReport:
    """Metrics per horizon, overall, and per quantile bucket of zero count and of entropy.

    ``predictions``/``targets`` are (N, tau, C); ``scores`` holds one
    ExtremenessScore per window. With ``control_predictions`` each bucket
    also carries the control's metrics and the loss gap.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    ctrl = None if control_predictions is None else np.asarray(control_predictions, dtype=np.float64)
    if len(scores) != len(pred):
        raise ValueError("scores and predictions must align")
    by_zero, by_entropy = stratify(scores, n_buckets)

    def rows(assign):
        out = []
        for b in range(n_buckets):
            sel = assign == b
            met = compute_metrics(pred[sel], tgt[sel])
            row = BucketRow(b, int(sel.sum()), met)
            if ctrl is not None:
                row.control = compute_metrics(ctrl[sel], tgt[sel])
                row.loss_gap = row.control.mae - met.mae
            out.append(row)
        return out

    return MetricsReport(
        horizons=_horizon_metrics(pred, tgt, horizons),
        overall=compute_metrics(pred, tgt),
        zero_buckets=rows(by_zero),
        entropy_buckets=rows(by_entropy),
        window_count=len(pred),
        control_horizons=None if ctrl is None else _horizon_metrics(ctrl, tgt, horizons),
    )


# -- attention complexity benchmark ---------------------------------------------


def temporal_attention(x):
    """Self-attention over the L steps of each sensor; x: (C, L, d)."""
    a = softmax(x @ x.swapaxes(-1, -2) / np.sqrt(x.shape[-1]))
    return a @ x, a


def spatiotemporal_attention(x):
    """Joint self-attention over all L*C tokens; x: (L, C, d)."""
    L, C, d = x.shape
    tok = x.reshape(L * C, d)
    a = softmax(tok @ tok.T / np.sqrt(d))
    return (a @ tok).reshape(L, C, d), a


def spatial_attention_step(q, k):
    """One step of query-to-bank attention; q: (C, d), k: (R*C, d)."""
    a = softmax(q @ k.T / np.sqrt(q.shape[-1]))
    return a @ k, a


def spatial_attention(q, k):
    """Per-step loop over L; q: (L, C, d), k: (L, R*C, d)."""
    outs = [spatial_attention_step(q[l], k[l])[0] for l in range(q.shape[0])]
    return np.stack(outs)


@dataclass
class BenchRow:
    variant: str
    L: int
    R: int
    C: int
    seconds: float
    working_set_floats: int


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def time(self, variant: str, L: int, R: int = None) -> float:
        for r in self.rows:
            if r.variant == variant and r.L == L and (R is None or r.R == R):
                return r.seconds
        raise KeyError((variant, L, R))

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=2)

    def format_table(self) -> str:
        lines = [f"{'variant':<26}{'L':>4}{'R':>4}{'C':>5}{'median ms':>12}{'floats':>12}"]
        for r in self.rows:
            lines.append(f"{r.variant:<26}{r.L:>4}{r.R:>4}{r.C:>5}{1e3 * r.seconds:>12.4f}{r.working_set_floats:>12}")
        return "\n".join(lines)


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return max(float(np.median(times)), 1e-9)


def bench_attention(C: int = 50, R: int = 5, L_sweep=(12, 24, 48), repetitions: int = 15, d: int = 16, seed: int = 0, R_sweep=None) -> BenchReport:
    """Median forward times for temporal, spatio-temporal and spatial attention.

    ``spatial`` is the per-window cost (loop over L steps); ``spatial_step``
    is the cost of one C x (R*C) attention matrix, the quantity whose
    complexity is O(R C^2) and independent of L. Working sets are the
    analytic score-matrix plus activation sizes in floats.
    """
    if len(L_sweep) < 2:
        raise ValueError("L_sweep needs at least two lengths")
    rng = np.random.default_rng(seed)
    report = BenchReport()
    with threadpool_limits(limits=1):
        for L in L_sweep:
            xt = rng.standard_normal((C, L, d))
            report.rows.append(BenchRow("temporal", L, R, C, _median_time(lambda: temporal_attention(xt), repetitions), C * L * L + C * L))
            xs = rng.standard_normal((L, C, d))
            report.rows.append(BenchRow("spatio-temporal", L, R, C, _median_time(lambda: spatiotemporal_attention(xs), repetitions), (L * C) ** 2 + L * C))
            for r in sorted(set(R_sweep or ()) | {R}):
                q = rng.standard_normal((L, C, d))
                k = rng.standard_normal((L, r * C, d))
                ws = r * C * C + r * C + C
                total = _median_time(lambda: spatial_attention(q, k), repetitions)
                report.rows.append(BenchRow("spatial", L, r, C, total, L * ws))
                report.rows.append(BenchRow("spatial_step", L, r, C, total / L, ws))
    return report
