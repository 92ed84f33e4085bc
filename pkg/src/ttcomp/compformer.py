"""Multi-head spatial attention from recent observations to bank samples.

Queries are the L x C window positions, keys and values are the L x (R*C)
sampled bank records. Attention runs independently per input step and is
batched over a leading batch axis; every op has a hand-written backward.
"""

from __future__ import annotations

import struct
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_FEATURES = 2  # speed, slot encoding


class StateError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def softmax(scores: np.ndarray, axis: int = -1, out: np.ndarray = None) -> np.ndarray:
    """Numerically stable softmax; pass ``out=scores`` to work in place."""
    out = np.subtract(scores, scores.max(axis=axis, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return out


def softmax_backward(weights: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax; overwrites nothing."""
    dot = np.einsum("...k,...k->...", grad, weights)[..., None] if axis in (-1, weights.ndim - 1) else (grad * weights).sum(axis=axis, keepdims=True)
    out = grad - dot
    out *= weights
    return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


@dataclass
class CompensatedFeatures:
    data: np.ndarray  # (..., L, C, D)
    attention: np.ndarray  # (..., L, C, R*C), averaged over heads


class CompFormer:
    """Stack of ``depth`` spatial attention layers.

    Per layer: a bias-free embedding ``W_in`` (2 -> d_model) shared by
    queries and keys, projections ``W_q``, ``W_k``, ``W_v`` (d_model ->
    d_model, head h owning columns ``h*d_head:(h+1)*d_head``), and ``W_out``
    (d_model -> 2). Layer k > 0 takes the previous layer's output as queries.
    """

    def __init__(self, d_model: int = 16, n_heads: int = 4, depth: int = 1, seed: int = 0, params: dict = None, dtype=np.float64):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.d_model, self.n_heads, self.depth = d_model, n_heads, depth
        self.d_head = d_model // n_heads
        self.dtype = np.dtype(dtype)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i in range(depth):
                params[f"layer{i}.W_in"] = glorot(rng, N_FEATURES, d_model)
                for name in ("W_q", "W_k", "W_v"):
                    params[f"layer{i}.{name}"] = glorot(rng, d_model, d_model)
                params[f"layer{i}.W_out"] = glorot(rng, d_model, N_FEATURES)
        self.params = params
        self._check_shapes()
        self._cache = None

    def _check_shapes(self):
        d = self.d_model
        for i in range(self.depth):
            expected = {"W_in": (N_FEATURES, d), "W_q": (d, d), "W_k": (d, d), "W_v": (d, d), "W_out": (d, N_FEATURES)}
            for name, shape in expected.items():
                arr = self.params[f"layer{i}.{name}"]
                if arr.shape != shape:
                    raise ValueError(f"layer{i}.{name} has shape {arr.shape}, expected {shape}")

    # -- single-instance helpers -------------------------------------------

    def embed(self, window_features: np.ndarray, layer: int = 0) -> np.ndarray:
        """Affine (bias-free) embedding of L x C x 2 query features."""
        feats = np.asarray(window_features, dtype=np.float64)
        if feats.shape[-1] != N_FEATURES:
            raise ValueError(f"expected trailing feature axis of size {N_FEATURES}")
        return feats @ self.params[f"layer{layer}.W_in"]

    def embed_keys(self, sample_data: np.ndarray, slot_encoding, layer: int = 0) -> np.ndarray:
        """Embed an L x (R*C) x 1 bank sample, attaching the per-step slot encoding."""
        return self.embed(key_features(sample_data, slot_encoding), layer)

    # -- batched forward / backward ----------------------------------------

    def _split_heads(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.n_heads, self.d_head).swapaxes(-2, -3)

    def _merge_heads(self, x):
        *lead, h, n, dh = x.shape
        return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)

    def _w(self, i, name):
        return self.params[f"layer{i}.{name}"].astype(self.dtype, copy=False)

    def _layer_forward(self, i, q_feat, k_feat):
        p = {f"layer{i}.{n}": self._w(i, n) for n in ("W_in", "W_q", "W_k", "W_v", "W_out")}
        eq = q_feat @ p[f"layer{i}.W_in"]
        ek = k_feat @ p[f"layer{i}.W_in"]
        Qh = self._split_heads(eq @ p[f"layer{i}.W_q"])
        Kh = self._split_heads(ek @ p[f"layer{i}.W_k"])
        Vh = self._split_heads(ek @ p[f"layer{i}.W_v"])
        scores = Qh @ Kh.swapaxes(-1, -2)
        scores *= self.dtype.type(1.0 / np.sqrt(self.d_head))
        if not np.all(np.isfinite(scores)):
            bad = np.argwhere(~np.isfinite(scores))[0]
            raise FloatingPointError(f"non-finite attention score in layer {i} at index {tuple(bad)} (.., step, head, query, key)")
        A = softmax(scores, out=scores)
        heads = A @ Vh
        merged = self._merge_heads(heads)
        out = merged @ p[f"layer{i}.W_out"]
        cache = dict(q_feat=q_feat, k_feat=k_feat, eq=eq, ek=ek, Qh=Qh, Kh=Kh, Vh=Vh, A=A, merged=merged)
        return out, cache

    def forward(self, q_feat: np.ndarray, k_feat: np.ndarray) -> CompensatedFeatures:
        """q_feat: (..., L, C, 2); k_feat: (..., L, R*C, 2)."""
        q_feat = np.asarray(q_feat, dtype=self.dtype)
        k_feat = np.asarray(k_feat, dtype=self.dtype)
        if q_feat.shape[-1] != N_FEATURES or k_feat.shape[-1] != N_FEATURES:
            raise ValueError("feature axis must have size 2")
        if q_feat.shape[:-2] != k_feat.shape[:-2]:
            raise ValueError(f"query/key leading shapes differ: {q_feat.shape} vs {k_feat.shape}")
        caches = []
        x = q_feat
        for i in range(self.depth):
            x, c = self._layer_forward(i, x, k_feat)
            caches.append(c)
        self._cache = caches
        return CompensatedFeatures(x, caches[-1]["A"].mean(axis=-3))

    def backward(self, grad_out: np.ndarray):
        """Returns ``(grads, d_q_feat, d_k_feat)`` for the last forward call."""
        if self._cache is None:
            raise StateError("backward called before forward")
        grads = {}
        dk_total = 0.0
        g = np.asarray(grad_out, dtype=self.dtype)
        scale = self.dtype.type(1.0 / np.sqrt(self.d_head))
        for i in reversed(range(self.depth)):
            c = self._cache[i]
            p = {f"layer{i}.{n}": self._w(i, n) for n in ("W_in", "W_q", "W_k", "W_v", "W_out")}
            grads[f"layer{i}.W_out"] = _contract(c["merged"], g)
            d_heads = self._split_heads(g @ p[f"layer{i}.W_out"].T)
            dA = d_heads @ c["Vh"].swapaxes(-1, -2)
            dVh = c["A"].swapaxes(-1, -2) @ d_heads
            dS = softmax_backward(c["A"], dA)
            dS *= scale
            dQh = dS @ c["Kh"]
            dKh = dS.swapaxes(-1, -2) @ c["Qh"]
            dQ, dK, dV = self._merge_heads(dQh), self._merge_heads(dKh), self._merge_heads(dVh)
            grads[f"layer{i}.W_q"] = _contract(c["eq"], dQ)
            grads[f"layer{i}.W_k"] = _contract(c["ek"], dK)
            grads[f"layer{i}.W_v"] = _contract(c["ek"], dV)
            deq = dQ @ p[f"layer{i}.W_q"].T
            dek = dK @ p[f"layer{i}.W_k"].T + dV @ p[f"layer{i}.W_v"].T
            grads[f"layer{i}.W_in"] = _contract(c["q_feat"], deq) + _contract(c["k_feat"], dek)
            dk_total = dk_total + dek @ p[f"layer{i}.W_in"].T
            g = deq @ p[f"layer{i}.W_in"].T
        grads = {k: v.astype(np.float64) for k, v in grads.items()}
        return grads, g, dk_total


def _contract(x, g):
    """Sum over all leading axes of x^T g, i.e. the weight gradient of ``x @ W``."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def key_features(sample_data, slot_encoding) -> np.ndarray:
    """(..., L, K[, 1]) key speeds plus an (..., L) slot encoding -> (..., L, K, 2)."""
    speeds = np.asarray(sample_data, dtype=np.float64)
    enc = np.asarray(slot_encoding, dtype=np.float64)
    if speeds.ndim == enc.ndim + 2 and speeds.shape[-1] == 1:
        speeds = speeds[..., 0]
    enc = np.broadcast_to(enc[..., None], speeds.shape)
    return np.stack([speeds, enc], axis=-1)


def compensate(window_data: np.ndarray, features: np.ndarray, mode: str = "concat") -> np.ndarray:
    """Attach compensated features to the input along the feature axis."""
    window_data = np.asarray(window_data)
    features = np.asarray(features)
    if window_data.shape != features.shape:
        raise ValueError(f"shape mismatch: {window_data.shape} vs {features.shape}")
    if mode == "concat":
        return np.concatenate([window_data, features], axis=-1)
    if mode == "add":
        return window_data + features
    raise ValueError(f"unknown compensation mode {mode!r}")


# -- checkpoint container -----------------------------------------------------

CKPT_MAGIC = b"CPFM"
CKPT_VERSION = 1


def save_params(path, params: dict, meta: dict = None) -> None:
    """Write named tensors as little-endian f32 with a JSON metadata header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path):
    """Inverse of ``save_params``; tensors come back as float64 copies of the stored f32."""
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a CPFM checkpoint")
        version, meta_len = struct.unpack_from("<HI", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(buf[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", buf, pos)
            pos += 3
            name = buf[pos : pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(buf, "<f4", n, pos).reshape(shape).astype(np.float64)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    return params, meta
