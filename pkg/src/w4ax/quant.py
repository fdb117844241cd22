"""Integer quantization primitives.

Calibration statistics, scale/zero-point computation and the quantize /
dequantize kernels at tensor, channel, group and block granularity.

Conventions used everywhere in the package:

* rounding is half-away-from-zero;
* symmetric b-bit values live in ``[-(2^(b-1) - 1), 2^(b-1) - 1]`` (INT4: [-7, 7]);
* asymmetric b-bit values live in ``[0, 2^b - 1]``;
* non-degenerate scales are rounded to the nearest float32 so that they
  survive the on-disk f32 encoding bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, QuantInputError

GRANULARITIES = ("tensor", "channel", "group", "block")

BitWidth = Union[int, tuple]


def qrange(bit_width, symmetric: bool):
    """Return ``(qmin, qmax)`` for a bit width (int or int array)."""
    b = np.asarray(bit_width, dtype=np.int64)
    if symmetric:
        qmax = (1 << (b - 1)) - 1
        return -qmax, qmax
    return np.zeros_like(b), (1 << b) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    # floor(|x| + 0.5) misrounds 0.49999999999999994, so compare the fraction instead
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, x)


@dataclass(frozen=True)
class CalibStats:
    """Running per-channel extremes over absorbed calibration batches.

    Channels are the last axis of every batch.
    """

    num_channels: int
    per_channel_min: np.ndarray
    per_channel_max: np.ndarray
    sample_count: int

    @property
    def per_channel_maxabs(self) -> np.ndarray:
        return np.maximum(np.abs(self.per_channel_min), np.abs(self.per_channel_max))

    def merge(self, other: "CalibStats") -> "CalibStats":
        if other.num_channels != self.num_channels:
            raise DimensionError(
                f"cannot merge stats over {self.num_channels} and {other.num_channels} channels"
            )
        return CalibStats(
            self.num_channels,
            np.minimum(self.per_channel_min, other.per_channel_min),
            np.maximum(self.per_channel_max, other.per_channel_max),
            self.sample_count + other.sample_count,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "channels": self.num_channels,
                "min": [float(v) for v in self.per_channel_min],
                "max": [float(v) for v in self.per_channel_max],
                "samples": self.sample_count,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibStats":
        d = json.loads(text)
        mn = np.asarray(d["min"], dtype=np.float64)
        mx = np.asarray(d["max"], dtype=np.float64)
        if len(mn) != d["channels"] or len(mx) != d["channels"]:
            raise DimensionError("channel count does not match min/max lengths")
        return cls(int(d["channels"]), mn, mx, int(d["samples"]))


def _as_rows(batch) -> np.ndarray:
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a.reshape(-1, a.shape[-1])


def collect_calib_stats(batches, existing: Optional[CalibStats] = None) -> CalibStats:
    """Absorb batches of activations into per-channel min/max statistics.

    ``batches`` may be a single array (rows x channels, or any rank with
    channels last) or an iterable of such arrays.
    """
    if isinstance(batches, np.ndarray) and batches.ndim >= 2:
        batches = [batches]
    stats = existing
    for batch in batches:
        rows = _as_rows(batch)
        if rows.shape[0] == 0:
            continue
        if not np.all(np.isfinite(rows)):
            raise QuantInputError("calibration batch contains non-finite values")
        part = CalibStats(rows.shape[1], rows.min(axis=0), rows.max(axis=0), rows.shape[0])
        stats = part if stats is None else stats.merge(part)
    if stats is None:
        raise DimensionError("no samples to calibrate on")
    return stats


@dataclass(frozen=True)
class QuantParams:
    """Scale / zero-point description of an integer tensor.

    ``scale`` and ``zero_point`` are 0-d for per-tensor params; otherwise they
    have the same rank as the tensor, with the quantized axis holding one entry
    per channel/group/block and every other axis either 1 or full length.
    ``bit_width`` is an int, or a per-block tuple for block granularity.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bit_width: BitWidth
    symmetric: bool
    granularity: str = "tensor"
    axis: int = -1
    group_size: int = 1

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scales must be positive")
        if self.symmetric and np.any(np.asarray(self.zero_point) != 0):
            raise ValueError("symmetric params must have zero_point 0")

    @property
    def scheme(self) -> str:
        return "symmetric" if self.symmetric else "asymmetric"

    def expanded(self, shape: Sequence[int]):
        """Broadcast ``(scale, zero_point, qmin, qmax)`` to elementwise arrays for ``shape``."""
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.int64)
        bits = np.asarray(self.bit_width, dtype=np.int64)
        if self.granularity == "tensor":
            qmin, qmax = qrange(bits, self.symmetric)
            return scale, zp, qmin, qmax
        ndim = len(shape)
        axis = self.axis % ndim
        n = shape[axis]
        g = 1 if self.granularity == "channel" else self.group_size

        def grow(a):
            if a.ndim == 0:
                return a
            if a.ndim == 1 and ndim > 1:
                a = a.reshape([-1 if i == axis else 1 for i in range(ndim)])
            if a.shape[axis] * g < n or (a.shape[axis] - 1) * g >= n:
                raise DimensionError(
                    f"{a.shape[axis]} params with group {g} do not cover axis of length {n}"
                )
            return np.repeat(a, g, axis=axis).take(np.arange(n), axis=axis)

        scale, zp, bits = grow(scale), grow(zp), grow(bits)
        qmin, qmax = qrange(bits, self.symmetric)
        return scale, zp, qmin, qmax

    def max_bits(self) -> int:
        return int(np.max(np.asarray(self.bit_width)))


@dataclass(frozen=True)
class IntTensor:
    """Unpacked integer tensor: one value per byte plus its params."""

    data: np.ndarray
    params: QuantParams

    @property
    def shape(self):
        return self.data.shape


def _to_f32(raw: np.ndarray) -> np.ndarray:
    # float32 scales survive the container bit-exactly; ranges outside float32 keep float64
    r32 = np.asarray(raw, dtype=np.float64).astype(np.float32).astype(np.float64)
    ok = (r32 >= np.finfo(np.float32).tiny) & np.isfinite(r32)
    return np.where(ok, r32, raw)


def compute_scale(
    min_val,
    max_val,
    bit_width: int = 4,
    symmetric: bool = True,
    *,
    granularity: Optional[str] = None,
    axis: int = -1,
    group_size: int = 1,
) -> QuantParams:
    """Min-max scale and zero point, elementwise over ``min_val``/``max_val``.

    Degenerate ranges (``min == max == v``) get scale 1 when ``v == 0`` and
    scale ``|v|`` otherwise, with the zero point chosen so that ``v`` maps to
    an integer that dequantizes back to exactly ``v``.
    """
    mn = np.asarray(min_val, dtype=np.float64)
    mx = np.asarray(max_val, dtype=np.float64)
    if np.any(mn > mx):
        raise ValueError("min must not exceed max")
    if not (np.all(np.isfinite(mn)) and np.all(np.isfinite(mx))):
        raise QuantInputError("non-finite calibration range")
    qmin, qmax = qrange(bit_width, symmetric)
    degenerate = mn == mx
    const = mn
    if symmetric:
        span = np.maximum(np.abs(mn), np.abs(mx))
        raw = np.where(span > 0, span, 1.0) / qmax
        zp = np.zeros(mn.shape, dtype=np.int64)
        deg_zp = zp
    else:
        # range must contain zero or the clamped zero point cannot represent it
        lo = np.minimum(mn, 0.0)
        hi = np.maximum(mx, 0.0)
        raw = np.where(hi > lo, hi - lo, 1.0) / qmax
        raw32 = _to_f32(raw)
        zp = np.clip(round_half_away(-lo / raw32), 0, qmax).astype(np.int64)
        deg_zp = np.where(const < 0, 1, 0)
    scale = _to_f32(raw)
    deg_scale = np.where(const == 0, 1.0, np.abs(const))
    scale = np.where(degenerate, deg_scale, scale)
    zp = np.where(degenerate, deg_zp, zp).astype(np.int32)
    if granularity is None:
        granularity = "tensor" if scale.ndim == 0 else "channel"
    return QuantParams(scale, zp, bit_width, symmetric, granularity, axis, group_size)


def _storage_dtype(params: QuantParams):
    if not params.symmetric and params.max_bits() > 4:
        return np.uint8
    return np.int8


def quantize(t, params: QuantParams) -> IntTensor:
    """``q = clamp(round(x / scale) + zero_point, qmin, qmax)``."""
    x = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantInputError("cannot quantize non-finite values")
    scale, zp, qmin, qmax = params.expanded(x.shape)
    q = np.clip(round_half_away(x / scale) + zp, qmin, qmax)
    return IntTensor(q.astype(_storage_dtype(params)), params)


def dequantize(q: IntTensor) -> np.ndarray:
    scale, zp, _, _ = q.params.expanded(q.data.shape)
    return (q.data.astype(np.int64) - zp) * scale


def sqnr_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Signal-to-quantization-noise ratio in dB; ``inf`` for an exact reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    noise = float(np.sum((x - x_hat) ** 2))
    if noise == 0.0:
        return float("inf")
    return 10.0 * np.log10(float(np.sum(x**2)) / noise)


def grouped_minmax(x: np.ndarray, group_size: int, axis: int = 0):
    """Per-group min and max along ``axis``; the last group may be short."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n = x.shape[0]
    starts = np.arange(0, n, group_size)
    mn = np.minimum.reduceat(x, starts, axis=0)
    mx = np.maximum.reduceat(x, starts, axis=0)
    return np.moveaxis(mn, 0, axis), np.moveaxis(mx, 0, axis)


def quantize_grouped(
    x, group_size: int, bit_width: int = 4, symmetric: bool = True, axis: int = 0
) -> IntTensor:
    """Quantize with one param set per ``group_size`` slice along ``axis``.

    Every other axis keeps its own params, e.g. a (K, N) weight grouped along
    K gets params of shape (ceil(K/g), N).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise DimensionError("cannot group an empty axis")
    mn, mx = grouped_minmax(x, group_size, axis)
    params = compute_scale(
        mn, mx, bit_width, symmetric, granularity="group", axis=axis, group_size=group_size
    )
    return quantize(x, params)
