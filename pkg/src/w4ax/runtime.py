"""Toy decoder stack running on FMPQ-quantized linears with a 4-bit KV cache.

Each layer is pre-norm attention followed by a pre-norm ReLU FFN, both with
residual connections. Every linear goes through :func:`mixed_gemm` with its
own calibrated precision map. K and V are quantized per channel (asymmetric
INT4, params frozen at calibration) when appended and dequantized when read;
attention math itself is float64.

Attention is evaluated one query row at a time through the same routine in
both phases, so a prompt processed in one prefill and the same prompt fed
token by token produce bit-identical caches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CacheOverflowError, DimensionError
from .fmpq import BlockPrecisionMap, calibrate, kv_channel_params
from .gemm import QuantizedWeights, TileConfig, mixed_gemm, prepare_weights
from .packing import LINEAR, PackedNibbleBuffer, pack_nibbles
from .quant import IntTensor, QuantParams, collect_calib_stats, dequantize, quantize

LINEARS = ("wq", "wk", "wv", "wo", "w1", "w2")
PARAM_BYTES_PER_CHANNEL = 8  # f32 scale + i32 zero point


@dataclass(frozen=True)
class ModelConfig:
    B: int = 2
    L: int = 16
    H: int = 256
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 2
    max_len: int = 64
    block: int = 128
    group: int = 128
    theta: float = 8.0

    def __post_init__(self):
        if min(self.B, self.L, self.H, self.heads, self.layers, self.ffn_mult, self.max_len) < 1:
            raise ValueError("all sizes must be positive")
        if self.H % self.heads:
            raise ValueError("H must be divisible by heads")
        if self.H % 2:
            raise ValueError("H must be even to pack KV nibbles per token")

    @property
    def head_dim(self) -> int:
        return self.H // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.H * self.ffn_mult


TINY = ModelConfig()


def init_weights(cfg: ModelConfig, seed: int = 0, residual_gain: float = 1.0) -> List[Dict[str, np.ndarray]]:
    """Gaussian weights; output projections scaled by 1/sqrt(2 * layers)."""
    rng = np.random.default_rng(seed)
    H, F = cfg.H, cfg.ffn_dim
    out_scale = residual_gain / math.sqrt(2 * cfg.layers)
    layers = []
    for _ in range(cfg.layers):
        layers.append(
            {
                "wq": rng.normal(0, 1 / math.sqrt(H), (H, H)),
                "wk": rng.normal(0, 1 / math.sqrt(H), (H, H)),
                "wv": rng.normal(0, 1 / math.sqrt(H), (H, H)),
                "wo": rng.normal(0, out_scale / math.sqrt(H), (H, H)),
                "w1": rng.normal(0, math.sqrt(2 / H), (H, F)),
                "w2": rng.normal(0, out_scale / math.sqrt(F), (F, H)),
            }
        )
    return layers


def token_activations(cfg: ModelConfig, T: int, seed: int = 1, outliers: int = 3, gain: float = 50.0) -> np.ndarray:
    """[B, T, H] Gaussian token activations with a few fixed outlier channels."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cfg.B, T, cfg.H))
    chans = np.random.default_rng(12345).choice(cfg.H, size=outliers, replace=False)
    x[..., chans] *= gain
    return x


def rmsnorm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def attend_row(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One query position over T cached positions.

    ``q`` is (heads, d); ``K``, ``V`` are (T, heads, d). Returns the output
    (heads, d) and the attention weights (heads, T).
    """
    scores = np.einsum("hd,thd->ht", q, K) / math.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("ht,thd->hd", p, V), p


class QuantKVCache:
    """Per-layer packed INT4 K and V, one packed row of H/2 bytes per token."""

    def __init__(self, cfg: ModelConfig, k_params: List[QuantParams], v_params: List[QuantParams]):
        self.cfg = cfg
        self.k_params = k_params
        self.v_params = v_params
        shape = (cfg.layers, cfg.B, cfg.max_len, cfg.H // 2)
        self._k = np.zeros(shape, dtype=np.uint8)
        self._v = np.zeros(shape, dtype=np.uint8)
        self.lengths = np.zeros(cfg.B, dtype=np.int64)

    @property
    def length(self) -> int:
        return int(self.lengths[0])

    def _pack(self, x: np.ndarray, params: QuantParams) -> np.ndarray:
        q = quantize(x, params).data
        raw = pack_nibbles(q, LINEAR, signed=False).data
        return np.frombuffer(raw, dtype=np.uint8).reshape(*x.shape[:-1], self.cfg.H // 2)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, pos: int) -> None:
        """Store ``k``/``v`` ([B, T, H]) at positions ``pos .. pos + T``."""
        T = k.shape[1]
        if pos + T > self.cfg.max_len:
            raise CacheOverflowError(f"cache holds {self.cfg.max_len} positions, need {pos + T}")
        self._k[layer, :, pos : pos + T] = self._pack(k, self.k_params[layer])
        self._v[layer, :, pos : pos + T] = self._pack(v, self.v_params[layer])

    def _unpack(self, raw: np.ndarray, params: QuantParams) -> np.ndarray:
        q = np.stack([raw & 0xF, raw >> 4], axis=-1).reshape(*raw.shape[:-1], self.cfg.H)
        return dequantize(IntTensor(q.astype(np.int8), params))

    def read(self, layer: int, b: int, upto: int) -> Tuple[np.ndarray, np.ndarray]:
        """Dequantized K, V for sequence ``b``, positions ``[0, upto)``, shape (upto, H)."""
        return (
            self._unpack(self._k[layer, b, :upto], self.k_params[layer]),
            self._unpack(self._v[layer, b, :upto], self.v_params[layer]),
        )

    def packed(self, layer: int, which: str = "k") -> PackedNibbleBuffer:
        """The stored nibbles of one layer's K or V as a linear-order buffer."""
        store = self._k if which == "k" else self._v
        n = self.length
        data = np.ascontiguousarray(store[layer, :, :n]).tobytes()
        return PackedNibbleBuffer(data, self.cfg.B * n * self.cfg.H, LINEAR, None, (self.cfg.B, n, self.cfg.H), signed=False)

    def payload_bytes(self) -> int:
        return self.cfg.layers * 2 * self.cfg.B * self.length * self.cfg.H // 2


@dataclass(frozen=True)
class KVFootprint:
    seq_len: int
    payload_bytes: int
    params_bytes: int
    fp16_payload_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.params_bytes


def kv_memory_footprint(cfg: ModelConfig, seq_len: int) -> KVFootprint:
    """Exact bytes of the packed KV4 cache plus its per-channel params."""
    if seq_len < 0:
        raise ValueError("sequence length must be non-negative")
    elems = cfg.layers * 2 * cfg.B * seq_len * cfg.H
    params = cfg.layers * 2 * cfg.H * PARAM_BYTES_PER_CHANNEL
    return KVFootprint(seq_len, elems // 2, params, elems * 2)


@dataclass
class QuantLinear:
    pmap: BlockPrecisionMap
    weights: QuantizedWeights

    def __call__(self, x: np.ndarray, workers: int = 1) -> np.ndarray:
        return mixed_gemm(x, self.weights, self.pmap, TileConfig(), workers)


class _Forward:
    """Shared layer math; subclasses supply linears and KV storage."""

    cfg: ModelConfig

    def linear(self, layer: int, name: str, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def store_kv(self, layer: int, k: np.ndarray, v: np.ndarray, pos: int) -> None:
        raise NotImplementedError

    def load_kv(self, layer: int, b: int, upto: int):
        raise NotImplementedError

    def layer_forward(self, layer: int, x: np.ndarray, pos: int, probe=None) -> np.ndarray:
        cfg = self.cfg
        B, T, H = x.shape
        h = rmsnorm(x)
        q, k, v = (self.linear(layer, n, h) for n in ("wq", "wk", "wv"))
        if probe is not None:
            probe(layer, "attn_in", h)
            probe(layer, "k", k)
            probe(layer, "v", v)
        self.store_kv(layer, k, v, pos)
        att = np.empty_like(q)
        qh = q.reshape(B, T, cfg.heads, cfg.head_dim)
        for b in range(B):
            K, V = self.load_kv(layer, b, pos + T)
            K = K.reshape(-1, cfg.heads, cfg.head_dim)
            V = V.reshape(-1, cfg.heads, cfg.head_dim)
            for t in range(T):
                upto = pos + t + 1
                o, _ = attend_row(qh[b, t], K[:upto], V[:upto])
                att[b, t] = o.reshape(H)
        if probe is not None:
            probe(layer, "wo_in", att)
        x = x + self.linear(layer, "wo", att)
        h2 = rmsnorm(x)
        u = np.maximum(self.linear(layer, "w1", h2), 0.0)
        if probe is not None:
            probe(layer, "ffn_in", h2)
            probe(layer, "w2_in", u)
        return x + self.linear(layer, "w2", u)

    def forward(self, x: np.ndarray, pos: int, probe=None) -> np.ndarray:
        for layer in range(self.cfg.layers):
            x = self.layer_forward(layer, x, pos, probe)
        return x


class ReferenceModel(_Forward):
    """Float64, unquantized, full-precision KV; the oracle for the quantized model."""

    def __init__(self, cfg: ModelConfig, weights):
        self.cfg = cfg
        self.weights = weights
        self.reset()

    def reset(self):
        shape = (self.cfg.layers, self.cfg.B, self.cfg.max_len, self.cfg.H)
        self._k = np.zeros(shape)
        self._v = np.zeros(shape)
        self.length = 0

    def linear(self, layer, name, x):
        return x @ self.weights[layer][name]

    def store_kv(self, layer, k, v, pos):
        T = k.shape[1]
        if pos + T > self.cfg.max_len:
            raise CacheOverflowError("reference cache overflow")
        self._k[layer, :, pos : pos + T] = k
        self._v[layer, :, pos : pos + T] = v

    def load_kv(self, layer, b, upto):
        return self._k[layer, b, :upto], self._v[layer, b, :upto]

    def prefill(self, prompt: np.ndarray) -> np.ndarray:
        self.reset()
        out = self.forward(np.asarray(prompt, dtype=np.float64), 0)
        self.length = prompt.shape[1]
        return out

    def generate_step(self, token: np.ndarray) -> np.ndarray:
        out = self.forward(np.asarray(token, dtype=np.float64), self.length)
        self.length += token.shape[1]
        return out


class QuantizedModel(_Forward):
    """FMPQ linears + KV4 cache, calibrated once and then frozen."""

    def __init__(self, cfg: ModelConfig, linears: List[Dict[str, QuantLinear]], k_params, v_params, workers: int = 1):
        self.cfg = cfg
        self.linears = linears
        self.k_params = k_params
        self.v_params = v_params
        self.workers = workers
        self.cache: Optional[QuantKVCache] = None

    def linear(self, layer, name, x):
        return self.linears[layer][name](x, self.workers)

    def store_kv(self, layer, k, v, pos):
        self.cache.append(layer, k, v, pos)

    def load_kv(self, layer, b, upto):
        return self.cache.read(layer, b, upto)

    def new_cache(self) -> QuantKVCache:
        return QuantKVCache(self.cfg, self.k_params, self.v_params)

    def prefill(self, prompt: np.ndarray) -> Tuple[np.ndarray, QuantKVCache]:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.ndim != 3 or prompt.shape[0] != self.cfg.B or prompt.shape[2] != self.cfg.H:
            raise DimensionError(f"prompt must be [B={self.cfg.B}, L, H={self.cfg.H}], got {prompt.shape}")
        self.cache = self.new_cache()
        out = self.forward(prompt, 0)
        self.cache.lengths += prompt.shape[1]
        return out, self.cache

    def generate_step(self, token: np.ndarray, cache: Optional[QuantKVCache] = None) -> Tuple[np.ndarray, QuantKVCache]:
        token = np.asarray(token, dtype=np.float64)
        if token.shape != (self.cfg.B, 1, self.cfg.H):
            raise DimensionError(f"token must be [B, 1, H], got {token.shape}")
        if cache is not None:
            self.cache = cache
        if self.cache is None:
            self.cache = self.new_cache()
        pos = self.cache.length
        out = self.forward(token, pos)
        self.cache.lengths += 1
        return out, self.cache


def quantize_model(cfg: ModelConfig, weights, calib: np.ndarray, workers: int = 1) -> QuantizedModel:
    """Calibrate every linear's precision map and the KV params on ``calib`` ([B', T, H])."""
    captured: Dict[Tuple[int, str], list] = {}

    def probe(layer, name, x):
        captured.setdefault((layer, name), []).append(x)

    ref = ReferenceModel(replace(cfg, B=calib.shape[0], max_len=max(cfg.max_len, calib.shape[1])), weights)
    ref.forward(np.asarray(calib, dtype=np.float64), 0, probe)
    inputs = {"wq": "attn_in", "wk": "attn_in", "wv": "attn_in", "wo": "wo_in", "w1": "ffn_in", "w2": "w2_in"}
    linears, k_params, v_params = [], [], []
    for layer in range(cfg.layers):
        maps = {}
        per = {}
        for name in LINEARS:
            src = inputs[name]
            if src not in maps:
                stats = collect_calib_stats(captured[(layer, src)])
                maps[src] = calibrate(stats, cfg.theta, cfg.block)
            pmap = maps[src]
            per[name] = QuantLinear(pmap, prepare_weights(weights[layer][name], pmap, cfg.group))
        linears.append(per)
        k_params.append(kv_channel_params(np.concatenate(captured[(layer, "k")])))
        v_params.append(kv_channel_params(np.concatenate(captured[(layer, "v")])))
    return QuantizedModel(cfg, linears, k_params, v_params, workers)


def prefill(cfg: ModelConfig, weights, prompt: np.ndarray, calib: Optional[np.ndarray] = None, workers: int = 1):
    """Calibrate (on ``calib`` or the prompt) and run the prompt phase.

    Returns ``(logits, cache, model)``; logits are the final hidden states.
    """
    model = quantize_model(cfg, weights, prompt if calib is None else calib, workers)
    logits, cache = model.prefill(prompt)
    return logits, cache, model


def generate_step(model: QuantizedModel, token: np.ndarray):
    return model.generate_step(token)
