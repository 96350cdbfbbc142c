"""Forward pass of the multi-layer visual feature connector.

Features from several encoder layers are concatenated along the channel
axis, layer-normalized per token, then projected by a two-layer MLP with a
GELU in between. Everything is float64 numpy; there is no training here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

DEFAULT_LAYERS = (6, 15, 18, 21, 24)
LN_EPS = 1e-5

_MAGIC = b"VIPFUSE1"
_HEADER = struct.Struct("<8sQQQ")


class FusionError(ValueError):
    pass


@dataclass
class LayerFeatureSet:
    layer_indices: list[int]
    features: list[np.ndarray]  # one (tokens, channels) array per layer

    def __post_init__(self):
        if len(self.layer_indices) != len(self.features):
            raise FusionError(f"{len(self.layer_indices)} layer indices for {len(self.features)} feature maps")
        if not self.features:
            raise FusionError("no layers selected")
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        for f in self.features:
            if f.ndim != 2:
                raise FusionError(f"layer features must be 2-D, got shape {f.shape}")
        tokens = {f.shape[0] for f in self.features}
        if len(tokens) != 1:
            raise FusionError(f"layers disagree on token count: {sorted(tokens)}")

    @classmethod
    def select(cls, hidden_states: Sequence[np.ndarray], layers: Sequence[int] = DEFAULT_LAYERS) -> LayerFeatureSet:
        """Pick ``layers`` out of a full stack of per-layer encoder outputs."""
        if max(layers) >= len(hidden_states):
            raise FusionError(f"layer {max(layers)} requested from a {len(hidden_states)}-layer stack")
        return cls(list(layers), [hidden_states[i] for i in layers])

    @property
    def channel_dims(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    @property
    def num_tokens(self) -> int:
        return self.features[0].shape[0]

    def concat(self) -> np.ndarray:
        return np.concatenate(self.features, axis=1)


@dataclass
class FusionParams:
    ln_gain: np.ndarray  # (concat,)
    ln_bias: np.ndarray  # (concat,)
    w1: np.ndarray  # (concat, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, out)
    b2: np.ndarray  # (out,)

    def __post_init__(self):
        for name in ("ln_gain", "ln_bias", "w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise FusionError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        d, h = self.w1.shape if self.w1.ndim == 2 else (None, None)
        if d is None or self.w2.ndim != 2:
            raise FusionError("MLP weights must be matrices")
        o = self.w2.shape[1]
        expected = {"ln_gain": (d,), "ln_bias": (d,), "b1": (h,), "b2": (o,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise FusionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.w2.shape[0] != h:
            raise FusionError(f"w2 has {self.w2.shape[0]} rows, expected {h}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(concat, hidden, out)"""
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    @classmethod
    def random(cls, concat_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator) -> FusionParams:
        return cls(
            ln_gain=1.0 + 0.1 * rng.standard_normal(concat_dim),
            ln_bias=0.1 * rng.standard_normal(concat_dim),
            w1=rng.standard_normal((concat_dim, hidden_dim)) / np.sqrt(concat_dim),
            b1=0.1 * rng.standard_normal(hidden_dim),
            w2=rng.standard_normal((hidden_dim, out_dim)) / np.sqrt(hidden_dim),
            b2=0.1 * rng.standard_normal(out_dim),
        )

    def save(self, path) -> None:
        """Header ``b"VIPFUSE1"`` + concat, hidden, out as little-endian u64,
        then ln_gain, ln_bias, w1, b1, w2, b2 as row-major little-endian float64."""
        d, h, o = self.dims
        with open(Path(path), "wb") as f:
            f.write(_HEADER.pack(_MAGIC, d, h, o))
            for arr in (self.ln_gain, self.ln_bias, self.w1, self.b1, self.w2, self.b2):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> FusionParams:
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise FusionError("params file too short")
        magic, d, h, o = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise FusionError(f"bad params magic {magic!r}")
        shapes = [(d,), (d,), (d, h), (h,), (h, o), (o,)]
        need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
        if len(data) != need:
            raise FusionError(f"params file is {len(data)} bytes, header implies {need}")
        arrays, off = [], _HEADER.size
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(s).astype(np.float64))
            off += 8 * n
        return cls(*arrays)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise FusionError(f"length mismatch: x {x.shape[-1]}, gain {gain.shape[-1]}, bias {bias.shape[-1]}")
    if not eps > 0:
        raise FusionError(f"eps must be positive, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    # exact erf form, not the tanh approximation
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def fuse(features: LayerFeatureSet, params: FusionParams, eps: float = LN_EPS) -> np.ndarray:
    """Visual tokens of shape ``(tokens, out)``."""
    x = features.concat()
    if not np.all(np.isfinite(x)):
        raise FusionError("features contain non-finite values")
    d, _, _ = params.dims
    if x.shape[1] != d:
        raise FusionError(f"concatenated features have {x.shape[1]} channels, params expect {d}")
    h = layernorm(x, params.ln_gain, params.ln_bias, eps)
    h = gelu(h @ params.w1 + params.b1)
    return h @ params.w2 + params.b2
