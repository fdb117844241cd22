"""Fine-grained mixed-precision quantization of activations.

Outlier channels are found from calibration maxabs, clustered to the front
of the channel axis by a permutation, and every block of ``k`` channels is
quantized at 8 bits if it holds an outlier and at 4 bits otherwise. The same
permutation must be applied to the reduction axis of the weight so that the
GEMM result is unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError
from .quant import (
    CalibStats,
    IntTensor,
    QuantParams,
    compute_scale,
    quantize,
    quantize_grouped,
)

DEFAULT_THETA = 8.0
DEFAULT_BLOCK = 128
MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class OutlierReport:
    channel_score: np.ndarray
    threshold_factor: float
    median_score: float
    outlier_flags: np.ndarray

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.outlier_flags)


@dataclass(frozen=True)
class ChannelPermutation:
    """``perm[new] = old``; ``inverse[old] = new``."""

    perm: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_perm(cls, perm) -> "ChannelPermutation":
        perm = np.asarray(perm, dtype=np.int64)
        n = len(perm)
        if n and not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("perm is not a bijection on [0, C)")
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(n)
        return cls(perm, inverse)

    @classmethod
    def identity(cls, n: int) -> "ChannelPermutation":
        return cls.from_perm(np.arange(n))

    def __len__(self):
        return len(self.perm)


@dataclass(frozen=True)
class BlockPrecisionMap:
    k: int
    block_bits: tuple
    block_params: tuple
    permutation: ChannelPermutation
    theta: float = DEFAULT_THETA

    @property
    def num_channels(self) -> int:
        return len(self.permutation)

    @property
    def num_blocks(self) -> int:
        return len(self.block_bits)

    @property
    def scales(self) -> np.ndarray:
        return np.array([float(p.scale) for p in self.block_params])

    def eight_bit_fraction(self) -> float:
        return sum(b == 8 for b in self.block_bits) / len(self.block_bits)

    def as_quant_params(self) -> QuantParams:
        """One block-granular QuantParams covering the permuted channel axis."""
        return QuantParams(
            self.scales,
            np.zeros(self.num_blocks, dtype=np.int32),
            tuple(self.block_bits),
            True,
            "block",
            -1,
            self.k,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": MAP_FORMAT_VERSION,
                "k": self.k,
                "theta": self.theta,
                "channels": self.num_channels,
                "perm": [int(i) for i in self.permutation.perm],
                "block_bits": [int(b) for b in self.block_bits],
                "scales": [float(s) for s in self.scales],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "BlockPrecisionMap":
        d = json.loads(text)
        perm = ChannelPermutation.from_perm(d["perm"])
        k = int(d["k"])
        bits = tuple(int(b) for b in d["block_bits"])
        if len(bits) != math.ceil(len(perm) / k) or len(d["scales"]) != len(bits):
            raise DimensionError("block count does not match channels and k")
        if d.get("channels", len(perm)) != len(perm):
            raise DimensionError("channel count does not match perm length")
        params = tuple(
            QuantParams(np.asarray(float(s)), np.asarray(0, dtype=np.int32), b, True)
            for s, b in zip(d["scales"], bits)
        )
        return cls(k, bits, params, perm, float(d["theta"]))


def detect_outliers(stats: CalibStats, theta: float = DEFAULT_THETA) -> OutlierReport:
    """Flag channels whose maxabs exceeds ``theta`` times the median maxabs.

    The median is the lower-middle element for an even channel count.
    """
    if stats.num_channels < 1:
        raise DimensionError("need at least one channel")
    if theta <= 1:
        raise ValueError("theta must exceed 1")
    score = stats.per_channel_maxabs
    median = float(np.sort(score)[(len(score) - 1) // 2])
    flags = score > theta * median
    return OutlierReport(score, float(theta), median, flags)


def build_permutation(report: OutlierReport, k: int = DEFAULT_BLOCK) -> ChannelPermutation:
    if k < 1:
        raise ValueError("block size must be positive")
    flags = report.outlier_flags
    idx = np.arange(len(flags))
    out = idx[flags]
    # lexsort: last key is primary -> descending score, then ascending index
    out = out[np.lexsort((out, -report.channel_score[out]))]
    return ChannelPermutation.from_perm(np.concatenate([out, idx[~flags]]))


def eight_bit_blocks(flags_in_order: np.ndarray, k: int) -> np.ndarray:
    """Per-block boolean: does the block hold any flagged channel?"""
    n_blocks = math.ceil(len(flags_in_order) / k)
    padded = np.zeros(n_blocks * k, dtype=bool)
    padded[: len(flags_in_order)] = flags_in_order
    return padded.reshape(n_blocks, k).any(axis=1)


def assign_block_precision(
    stats: CalibStats,
    perm: ChannelPermutation,
    report: OutlierReport,
    k: int = DEFAULT_BLOCK,
) -> BlockPrecisionMap:
    C = stats.num_channels
    if len(perm) != C or len(report.outlier_flags) != C:
        raise DimensionError("stats, permutation and report disagree on channel count")
    hot = eight_bit_blocks(report.outlier_flags[perm.perm], k)
    mn = stats.per_channel_min[perm.perm]
    mx = stats.per_channel_max[perm.perm]
    bits, params = [], []
    for b, is_hot in enumerate(hot):
        sl = slice(b * k, min((b + 1) * k, C))
        width = 8 if is_hot else 4
        bits.append(width)
        params.append(compute_scale(mn[sl].min(), mx[sl].max(), width, symmetric=True))
    return BlockPrecisionMap(k, tuple(bits), tuple(params), perm, report.threshold_factor)


def calibrate(stats: CalibStats, theta: float = DEFAULT_THETA, k: int = DEFAULT_BLOCK):
    """Outlier detection, permutation and block precision in one call."""
    report = detect_outliers(stats, theta)
    perm = build_permutation(report, k)
    return assign_block_precision(stats, perm, report, k)


def permute_channels(t, perm: ChannelPermutation, axis: int = -1) -> np.ndarray:
    t = np.asarray(t)
    if t.shape[axis] != len(perm):
        raise DimensionError(
            f"axis {axis} has length {t.shape[axis]}, permutation has {len(perm)}"
        )
    return np.take(t, perm.perm, axis=axis)


def unpermute_channels(t, perm: ChannelPermutation, axis: int = -1) -> np.ndarray:
    t = np.asarray(t)
    if t.shape[axis] != len(perm):
        raise DimensionError("length mismatch")
    return np.take(t, perm.inverse, axis=axis)


def quantize_activation_fmpq(act, pmap: BlockPrecisionMap) -> IntTensor:
    """Permute channels (last axis), then quantize each block at its own width."""
    act = np.asarray(act, dtype=np.float64)
    if act.shape[-1] != pmap.num_channels:
        raise DimensionError(
            f"activation has {act.shape[-1]} channels, map has {pmap.num_channels}"
        )
    return quantize(permute_channels(act, pmap.permutation), pmap.as_quant_params())


def uniform_int4_like(pmap: BlockPrecisionMap, stats: CalibStats) -> BlockPrecisionMap:
    """Same permutation and pooled ranges as ``pmap`` but every block at 4 bits."""
    k = pmap.k
    mn = stats.per_channel_min[pmap.permutation.perm]
    mx = stats.per_channel_max[pmap.permutation.perm]
    params = tuple(
        compute_scale(mn[b * k : (b + 1) * k].min(), mx[b * k : (b + 1) * k].max(), 4)
        for b in range(pmap.num_blocks)
    )
    return BlockPrecisionMap(k, (4,) * pmap.num_blocks, params, pmap.permutation, pmap.theta)


def kv_channel_params(kv_calib) -> QuantParams:
    """Per-channel asymmetric INT4 params from calibration K or V (channels last)."""
    rows = np.asarray(kv_calib, dtype=np.float64)
    rows = rows.reshape(-1, rows.shape[-1])
    return compute_scale(rows.min(axis=0), rows.max(axis=0), 4, symmetric=False)


def quantize_kv_cache(kv, params: Optional[QuantParams] = None) -> IntTensor:
    """Channel-wise asymmetric INT4 quantization of K or V.

    Without ``params`` the ranges are taken from ``kv`` itself.
    """
    kv = np.asarray(kv, dtype=np.float64)
    if params is None:
        params = kv_channel_params(kv)
    return quantize(kv, params)


def quantize_weights_grouped(W, group_size: int = 128) -> IntTensor:
    """Symmetric INT4 with one scale per (reduction group, output column).

    ``W`` is (K, N): the reduction axis is 0. A trailing short group is allowed.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError("weights must be a (K, N) matrix")
    return quantize_grouped(W, group_size, 4, True, axis=0)
