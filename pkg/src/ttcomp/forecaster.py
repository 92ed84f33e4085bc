"""Forecasting head, bank-compensated forward pass and the training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .bank import PeriodicDataBank
from .compformer import CompFormer, compensate, glorot, key_features, load_params, save_params
from .extremeness import score_windows
from .series import PeriodConfig, SeriesFrame, window_arrays

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 12
    tau: int = 12
    R: int = 5
    mode: str = "concat"  # concat | add
    compensate: bool = True  # False gives the zero-compensation control
    d_model: int = 16
    n_heads: int = 4
    depth: int = 1
    hidden: int = 64

    def __post_init__(self):
        if self.mode not in ("concat", "add"):
            raise ValueError(f"mode must be 'concat' or 'add', got {self.mode!r}")
        for name in ("L", "tau", "R", "d_model", "n_heads", "depth", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_features(self) -> int:
        return 4 if self.mode == "concat" else 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    eval_seed: int = 12345
    attention_float32: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, grad_clip, batch_size and max_epochs must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def split_config(data: dict):
    """Partition a flat JSON dict into (ModelConfig, TrainConfig) kwargs."""
    m_names = {f.name for f in fields(ModelConfig)}
    t_names = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - m_names - t_names
    if unknown:
        raise ValueError(f"unknown training config fields: {sorted(unknown)}")
    return (
        ModelConfig(**{k: v for k, v in data.items() if k in m_names}),
        TrainConfig(**{k: v for k, v in data.items() if k in t_names}),
    )


def masked_mae(pred: np.ndarray, target: np.ndarray):
    """Mean |pred - target| over nonzero targets, and its gradient w.r.t. pred.

    Returns ``(loss, grad, empty)``; an all-masked input gives loss 0 and
    ``empty=True``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = target != 0
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred), True
    diff = pred - target
    loss = float(np.abs(diff)[mask].sum() / n)
    grad = np.sign(diff) * mask / n
    return loss, grad, False


def mae_loss(pred, target) -> float:
    return masked_mae(pred, target)[0]


@dataclass
class Scaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        std = float(np.std(values))
        return cls(float(np.mean(values)), std if std > 0 else 1.0)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


class Forecaster:
    """CompFormer compensation followed by a per-sensor shared MLP head.

    The head sees one sensor's flattened L x F feature block (F = 4 for
    concat, 2 for add) and emits ``tau`` normalized speeds. Its parameter
    count does not depend on the number of sensors.
    """

    def __init__(self, cfg: ModelConfig, scaler: Scaler, period: PeriodConfig = PeriodConfig(), seed: int = 0, params: dict = None):
        self.cfg = cfg
        self.attention_dtype = np.float64
        self.scaler = scaler
        self.period = period
        rng = np.random.default_rng(seed)
        attn = CompFormer(cfg.d_model, cfg.n_heads, cfg.depth, seed=int(rng.integers(2**31)))
        fan_in = cfg.L * cfg.head_features
        self.params = {f"attn.{k}": v for k, v in attn.params.items()}
        self.params.update(
            {
                "head.W1": glorot(rng, fan_in, cfg.hidden),
                "head.b1": np.zeros(cfg.hidden),
                "head.W2": glorot(rng, cfg.hidden, cfg.tau),
                "head.b2": np.zeros(cfg.tau),
            }
        )
        if params is not None:
            missing = set(self.params) - set(params)
            if missing:
                raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
            for k in self.params:
                if params[k].shape != self.params[k].shape:
                    raise ValueError(f"tensor {k} has shape {params[k].shape}, expected {self.params[k].shape}")
            self.params = {k: np.array(params[k], dtype=np.float64) for k in self.params}
        self._cache = None

    def _compformer(self) -> CompFormer:
        attn = {k[5:]: v for k, v in self.params.items() if k.startswith("attn.")}
        return CompFormer(self.cfg.d_model, self.cfg.n_heads, self.cfg.depth, params=attn, dtype=self.attention_dtype)

    def features(self, x, slots):
        """(B, L, C) raw speeds and (B, L) slots -> (B, L, C, 2) normalized query features."""
        xn = self.scaler.normalize(x)
        enc = np.broadcast_to((np.asarray(slots) / self.period.P)[..., None], xn.shape)
        return np.stack([xn, enc], axis=-1)

    def forward(self, x, slots, keys, key_slots):
        """x: (B, L, C) raw speeds; keys: (B, L, R*C) raw bank speeds; -> (B, tau, C) speeds."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        B, L, C = x.shape
        if L != cfg.L:
            raise ValueError(f"window length {L} != configured L={cfg.L}")
        q_feat = self.features(x, slots)
        attn = None
        if cfg.compensate:
            if keys.shape != (B, L, cfg.R * C):
                raise ValueError(f"keys shape {keys.shape} != {(B, L, cfg.R * C)}; bank/dataset sensor mismatch?")
            attn = self._compformer()
            k_feat = key_features(self.scaler.normalize(keys), np.asarray(key_slots) / self.period.P)
            comp = attn.forward(q_feat, k_feat)
            comp_data, attention = comp.data.astype(np.float64), comp.attention
        else:
            comp_data, attention = np.zeros_like(q_feat), None
        aug = compensate(q_feat, comp_data, cfg.mode)
        h_in = aug.transpose(0, 2, 1, 3).reshape(B, C, L * cfg.head_features)
        z1 = h_in @ self.params["head.W1"] + self.params["head.b1"]
        h = np.maximum(z1, 0.0)
        out = h @ self.params["head.W2"] + self.params["head.b2"]
        pred = self.scaler.denormalize(out.transpose(0, 2, 1))
        self._cache = dict(attn=attn, h_in=h_in, z1=z1, h=h, shape=(B, L, C), comp=comp_data, attention=attention)
        return pred

    def backward(self, grad_pred) -> dict:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c = self._cache
        B, L, C = c["shape"]
        p = self.params
        d_out = (np.asarray(grad_pred) * self.scaler.std).transpose(0, 2, 1)
        grads = {
            "head.W2": c["h"].reshape(-1, c["h"].shape[-1]).T @ d_out.reshape(-1, self.cfg.tau),
            "head.b2": d_out.sum(axis=(0, 1)),
        }
        dz1 = (d_out @ p["head.W2"].T) * (c["z1"] > 0)
        grads["head.W1"] = c["h_in"].reshape(-1, c["h_in"].shape[-1]).T @ dz1.reshape(-1, self.cfg.hidden)
        grads["head.b1"] = dz1.sum(axis=(0, 1))
        for k in p:
            if k.startswith("attn."):
                grads[k] = np.zeros_like(p[k])
        if c["attn"] is not None:
            d_aug = (dz1 @ p["head.W1"].T).reshape(B, C, L, self.cfg.head_features).transpose(0, 2, 1, 3)
            d_comp = d_aug[..., 2:] if self.cfg.mode == "concat" else d_aug
            attn_grads, _, _ = c["attn"].backward(d_comp)
            grads.update({f"attn.{k}": v for k, v in attn_grads.items()})
        return grads

    def save(self, path) -> None:
        meta = {
            "model": asdict(self.cfg),
            "scaler": {"mean": self.scaler.mean, "std": self.scaler.std},
            "period": asdict(self.period),
        }
        save_params(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Forecaster":
        params, meta = load_params(path)
        try:
            cfg = ModelConfig(**meta["model"])
            scaler = Scaler(**meta["scaler"])
            period = PeriodConfig(**meta["period"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: checkpoint metadata incomplete ({exc})") from None
        return cls(cfg, scaler, period, params=params)


# -- optimisation ---------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1**self.t
        corr2 = 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float):
    """Scale grads in place so their joint L2 norm is at most ``max_norm``; returns (pre, post) norms."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
        return norm, max_norm
    return norm, norm


# -- data plumbing ----------------------------------------------------------------


@dataclass
class WindowSet:
    x: np.ndarray  # (N, L, C)
    slots: np.ndarray  # (N, L)
    y: np.ndarray  # (N, tau, C)
    origins: np.ndarray  # (N,)
    step_timestamps: np.ndarray  # (N, L)

    @classmethod
    def from_frame(cls, frame: SeriesFrame, L: int, tau: int, period: PeriodConfig = PeriodConfig()) -> "WindowSet":
        x, slots, y, origins = window_arrays(frame, L, tau, period)
        ts = np.lib.stride_tricks.sliding_window_view(frame.timestamps, L)[: len(origins)]
        return cls(x, slots, y, origins, ts)

    def __len__(self):
        return len(self.origins)

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.slots[idx], self.y[idx], self.origins[idx], self.step_timestamps[idx])


def draw_keys(bank: PeriodicDataBank, windows: WindowSet, R: int, rng: np.random.Generator):
    """Bank keys for a batch of windows.

    Each step draws from the slot one step ahead of it. The record stamped
    exactly at that future time is never drawn (only possible when the
    windows come from the training split itself).
    Returns ``(keys (B, L, R*C), key_slots (B, L), source_timestamps (B, L, R))``.
    """
    if bank.C != windows.x.shape[2]:
        raise ValueError(f"bank has {bank.C} sensors, windows have {windows.x.shape[2]}")
    B, L = windows.slots.shape
    key_slots = bank.resolve(windows.slots + 1).reshape(B, L)
    step = bank.cfg.step_minutes
    flat = bank.draw(key_slots, R, rng, exclude_near=windows.step_timestamps + step, radius=0)
    keys = bank.values[flat].astype(np.float64).reshape(B, L, R * bank.C)
    return keys, key_slots, bank.timestamps[flat].reshape(B, L, R)


@dataclass
class TrainResult:
    model: Forecaster
    trace: list  # dicts: epoch, train_mae, val_mae
    best_epoch: int
    best_val_mae: float
    clip_norms: list


def train_step(model: Forecaster, opt: Adam, batch: WindowSet, bank: PeriodicDataBank, rng, grad_clip: float = 5.0):
    keys, key_slots, _ = draw_keys(bank, batch, model.cfg.R, rng) if model.cfg.compensate else (None, None, None)
    try:
        pred = model.forward(batch.x, batch.slots, keys, key_slots)
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"Adam step {opt.t + 1}: {exc}") from None
    loss, dpred, _ = masked_mae(pred, batch.y)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at Adam step {opt.t + 1}")
    grads = model.backward(dpred)
    _, post = clip_global_norm(grads, grad_clip)
    opt.step(model.params, grads)
    return loss, post


def evaluate_mae(model: Forecaster, windows: WindowSet, bank: PeriodicDataBank, seed: int, batch_size: int = 256) -> float:
    pred = predict_windows(model, windows, bank, seed, batch_size)[0]
    return masked_mae(pred, windows.y)[0]


def train(
    train_frame: SeriesFrame,
    val_frame: SeriesFrame,
    bank: PeriodicDataBank,
    model_cfg: ModelConfig = ModelConfig(),
    cfg: TrainConfig = TrainConfig(),
    period: PeriodConfig = PeriodConfig(),
    max_train_windows: int = None,
) -> TrainResult:
    """Mini-batch Adam with global-norm clipping and early stopping on val MAE."""
    if bank.C != train_frame.C:
        raise ValueError(f"bank has {bank.C} sensors, training frame has {train_frame.C}")
    rng = np.random.default_rng(cfg.seed)
    model = Forecaster(model_cfg, Scaler.fit(train_frame.values), period, seed=int(rng.integers(2**31)))
    if cfg.attention_float32:
        model.attention_dtype = np.float32
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    tr = WindowSet.from_frame(train_frame, model_cfg.L, model_cfg.tau, period)
    va = WindowSet.from_frame(val_frame, model_cfg.L, model_cfg.tau, period)
    if max_train_windows is not None and len(tr) > max_train_windows:
        tr = tr.take(np.sort(rng.choice(len(tr), max_train_windows, replace=False)))

    trace, clip_norms = [], []
    best = (np.inf, 0, copy.deepcopy(model.params))
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(tr))
        losses, weights = [], []
        for start in range(0, len(tr), cfg.batch_size):
            batch = tr.take(order[start : start + cfg.batch_size])
            loss, post = train_step(model, opt, batch, bank, rng, cfg.grad_clip)
            losses.append(loss)
            weights.append(len(batch))
            clip_norms.append(post)
        train_mae = float(np.average(losses, weights=weights))
        val_mae = evaluate_mae(model, va, bank, cfg.eval_seed)
        if not np.isfinite(val_mae):
            raise TrainingDivergedError(f"non-finite validation MAE at epoch {epoch}")
        trace.append({"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae})
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, train_mae, val_mae)
        if val_mae < best[0]:
            best = (val_mae, epoch, copy.deepcopy(model.params))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.params = best[2]
    return TrainResult(model, trace, best[1], best[0], clip_norms)


def predict_windows(model: Forecaster, windows: WindowSet, bank: PeriodicDataBank, seed: int, batch_size: int = 256):
    """Returns ``(predictions (N, tau, C), key_timestamps (N, L, R) or None)``."""
    rng = np.random.default_rng(seed)
    preds, stamps = [], []
    for start in range(0, len(windows), batch_size):
        batch = windows.take(slice(start, start + batch_size))
        if model.cfg.compensate:
            keys, key_slots, ts = draw_keys(bank, batch, model.cfg.R, rng)
            stamps.append(ts)
        else:
            keys = key_slots = None
        preds.append(model.forward(batch.x, batch.slots, keys, key_slots))
    return np.concatenate(preds), (np.concatenate(stamps) if stamps else None)


@dataclass
class PredictionResult:
    predictions: np.ndarray
    targets: np.ndarray
    scores: list
    origins: np.ndarray
    key_timestamps: np.ndarray  # audit trail of bank records used; None for the control


def predict(test_frame: SeriesFrame, bank: PeriodicDataBank, model: Forecaster, seed: int = 12345) -> PredictionResult:
    ws = WindowSet.from_frame(test_frame, model.cfg.L, model.cfg.tau, model.period)
    preds, stamps = predict_windows(model, ws, bank, seed)
    return PredictionResult(preds, ws.y, score_windows(ws.x, ws.origins), ws.origins, stamps)
