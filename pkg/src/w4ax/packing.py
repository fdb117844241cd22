"""Packed INT4 storage and the fast INT4 -> INT8 conversion.

Buffers are little-endian sequences of 16-bit words. In ``linear`` order
element ``i`` sits in nibble ``i`` (low nibble first). In ``swapped`` order
each word holds four elements as::

    bits 15..12  11..8  7..4  3..0
          w3      w1    w2    w0

so that two mask/shift word operations place every element in the high
nibble of its own output byte (value times 16, sign preserved).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, LayoutError, NibbleRangeError
from .quant import QuantParams

LINEAR = "linear"
SWAPPED = "swapped"
ORDERS = (LINEAR, SWAPPED)

# position of w0..w3 inside a swapped word, in nibble slots (slot i = bits 4i..4i+3)
_SWAPPED_SLOT = np.array([0, 2, 1, 3])


@dataclass(frozen=True)
class PackedNibbleBuffer:
    data: bytes
    num_elements: int
    nibble_order: str = SWAPPED
    interleave: Optional[Tuple[int, int]] = None
    shape: Optional[Tuple[int, ...]] = field(default=None)
    signed: bool = True

    def __post_init__(self):
        if self.nibble_order not in ORDERS:
            raise LayoutError(f"unknown nibble order {self.nibble_order!r}")
        if len(self.data) != packed_nbytes(self.num_elements, self.nibble_order):
            raise LayoutError(
                f"{len(self.data)} bytes cannot hold {self.num_elements} "
                f"{self.nibble_order} nibbles"
            )

    @property
    def nbytes(self) -> int:
        return len(self.data)


def packed_nbytes(n: int, order: str = SWAPPED) -> int:
    if order == SWAPPED:
        # the swapped layout puts w1 in the second byte, so storage is whole words
        return 2 * ((n + 3) // 4)
    return (n + 1) // 2


def _check_nibbles(v: np.ndarray, signed: bool) -> np.ndarray:
    lo, hi = (-8, 7) if signed else (0, 15)
    if v.size and (v.min() < lo or v.max() > hi):
        raise NibbleRangeError(f"values must lie in [{lo}, {hi}]")
    return (v.astype(np.int64) & 0xF).astype(np.uint16)


def pack_nibbles(values, order: str = SWAPPED, signed: bool = True) -> PackedNibbleBuffer:
    """Pack 4-bit integers (two's complement if ``signed``) into a buffer."""
    v = np.asarray(values)
    if v.dtype.kind not in "iu":
        if not np.all(v == np.round(v)):
            raise NibbleRangeError("nibble values must be integers")
        v = v.astype(np.int64)
    shape = v.shape if v.ndim > 1 else None
    nib = _check_nibbles(v.ravel(), signed)
    n = nib.size
    if order == SWAPPED:
        padded = np.zeros(4 * ((n + 3) // 4), dtype=np.uint16)
        padded[:n] = nib
        quads = padded.reshape(-1, 4)
        words = np.zeros(len(quads), dtype=np.uint16)
        for j in range(4):
            words |= quads[:, j] << np.uint16(4 * _SWAPPED_SLOT[j])
        data = words.astype("<u2").tobytes()
    elif order == LINEAR:
        padded = np.zeros(2 * ((n + 1) // 2), dtype=np.uint8)
        padded[:n] = nib
        pairs = padded.reshape(-1, 2)
        data = (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()
    else:
        raise LayoutError(f"unknown nibble order {order!r}")
    return PackedNibbleBuffer(data, n, order, None, shape, signed)


def _raw_nibbles(buf: PackedNibbleBuffer) -> np.ndarray:
    """Stored nibbles in storage order (interleave not undone), as uint8 0..15."""
    n = buf.num_elements
    if buf.nibble_order == SWAPPED:
        words = np.frombuffer(buf.data, dtype="<u2").astype(np.uint16)
        slots = np.stack([(words >> np.uint16(4 * s)) & 0xF for s in _SWAPPED_SLOT], axis=1)
        return slots.reshape(-1)[:n].astype(np.uint8)
    b = np.frombuffer(buf.data, dtype=np.uint8)
    return np.stack([b & 0xF, b >> 4], axis=1).reshape(-1)[:n]


def _sign_extend(nib: np.ndarray) -> np.ndarray:
    v = nib.astype(np.int8)
    return np.where(v > 7, v - 16, v).astype(np.int8)


def unpack_nibbles(buf: PackedNibbleBuffer) -> np.ndarray:
    """Exact inverse of :func:`pack_nibbles` / :func:`interleave_weights`."""
    nib = _raw_nibbles(buf)
    vals = _sign_extend(nib) if buf.signed else nib.astype(np.int8)
    if buf.interleave is not None:
        f, s = buf.interleave
        width = buf.shape[-1] if buf.shape else vals.size
        vals = deinterleave_values(vals.reshape(-1, width), f, s).reshape(-1)
    if buf.shape is not None:
        vals = vals.reshape(buf.shape)
    return vals


def _convert_words(words: np.ndarray) -> np.ndarray:
    """Two word operations per four nibbles.

    ``(w << 4) & 0xF0F0`` yields bytes (16*w0, 16*w1); ``w & 0xF0F0`` yields
    (16*w2, 16*w3). Nibbles land in the high half of each byte, so the
    int8 reinterpretation keeps the sign without any sign-extension step.
    """
    lo = (words << np.uint16(4)) & np.uint16(0xF0F0)
    hi = words & np.uint16(0xF0F0)
    return np.stack([lo, hi], axis=-1).astype("<u2").view(np.int8).reshape(*words.shape, 4)


def fast_convert_i4_to_i8(buf: PackedNibbleBuffer) -> np.ndarray:
    """INT4 -> INT8 by zero extension: ``out[i] == 16 * w[i]`` as int8.

    Pair the result with :func:`fold_conversion_scale` to undo the factor 16.
    """
    if buf.nibble_order != SWAPPED:
        raise LayoutError("fast conversion needs the swapped nibble order")
    if buf.interleave is not None:
        raise LayoutError("fast conversion needs a non-interleaved buffer")
    if not buf.signed:
        raise LayoutError("fast conversion is defined for signed nibbles only")
    words = np.frombuffer(buf.data, dtype="<u2").astype(np.uint16)
    out = _convert_words(words).reshape(-1)[: buf.num_elements]
    if buf.shape is not None:
        out = out.reshape(buf.shape)
    return out


def fold_conversion_scale(params: QuantParams) -> QuantParams:
    """Absorb the x16 of :func:`fast_convert_i4_to_i8` into the scale."""
    if not params.symmetric:
        raise ValueError("scale folding requires symmetric params")
    return QuantParams(
        np.asarray(params.scale, dtype=np.float64) / 16.0,
        params.zero_point,
        8,
        True,
        params.granularity,
        params.axis,
        params.group_size,
    )


def interleave_order(f: int = 4, s: int = 16) -> np.ndarray:
    """Logical index held at each stored position of one span.

    The span is cut into ``2r`` runs of ``f``; storage alternates runs from the
    first and second halves (0, r, 1, r+1, ...). For (4, 16) that is runs
    0, 2, 1, 3: positions 0-3, 8-11, 4-7, 12-15.
    """
    if f < 1 or s % (2 * f):
        raise DimensionError(f"span {s} must be a multiple of 2*f = {2 * f}")
    r = s // (2 * f)
    runs = np.ravel(np.column_stack([np.arange(r), np.arange(r, 2 * r)]))
    return (runs[:, None] * f + np.arange(f)).ravel()


def interleave_values(v: np.ndarray, f: int = 4, s: int = 16) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1] % s:
        raise DimensionError(f"reduction length {v.shape[-1]} not divisible by span {s}")
    spans = v.reshape(*v.shape[:-1], -1, s)
    return spans[..., interleave_order(f, s)].reshape(v.shape)


def deinterleave_values(v: np.ndarray, f: int = 4, s: int = 16) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1] % s:
        raise DimensionError(f"reduction length {v.shape[-1]} not divisible by span {s}")
    inv = np.argsort(interleave_order(f, s))
    spans = v.reshape(*v.shape[:-1], -1, s)
    return spans[..., inv].reshape(v.shape)


def interleave_weights(values, f: int = 4, s: int = 16, order: str = SWAPPED) -> PackedNibbleBuffer:
    """Pack an int4 matrix (rows x reduction) with per-span weight interleave."""
    v = np.asarray(values)
    if v.ndim == 1:
        v = v[None, :]
    inter = interleave_values(v, f, s)
    buf = pack_nibbles(inter, order)
    return PackedNibbleBuffer(buf.data, buf.num_elements, order, (f, s), tuple(np.shape(values)), True)


def deinterleave_weights(buf: PackedNibbleBuffer) -> np.ndarray:
    if buf.interleave is None:
        raise LayoutError("buffer is not interleaved")
    return unpack_nibbles(buf)


def consumer_fragments(f: int = 4, s: int = 16):
    """Logical indices each consumer of a span needs: runs ``h`` and ``h + r``."""
    r = s // (2 * f)
    return [np.concatenate([np.arange(h * f, h * f + f), np.arange((h + r) * f, (h + r + 1) * f)]) for h in range(r)]


def contiguous_runs(positions) -> list:
    """Split sorted storage positions into ``(start, length)`` runs."""
    p = np.sort(np.asarray(positions))
    if p.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(p) != 1) + 1
    return [(int(c[0]), len(c)) for c in np.split(p, breaks)]


def gather_runs(columns: int = 4, f: int = 4, s: int = 16, interleaved: bool = True):
    """Storage runs read by every consumer for a ``columns`` x ``s`` weight tile.

    With the defaults this is the m8n4k16 example: 4 columns, 2 consumers per
    column, 8 consumers in total.
    """
    inv = np.argsort(interleave_order(f, s)) if interleaved else np.arange(s)
    result = []
    for col in range(columns):
        for frag in consumer_fragments(f, s):
            result.append(contiguous_runs(col * s + inv[frag]))
    return result


def unpack_words(words: np.ndarray) -> np.ndarray:
    """Sign-extended (w0, w1, w2, w3) for each swapped-order word; shape (..., 4)."""
    words = np.asarray(words, dtype=np.uint16)
    nib = np.stack([(words >> np.uint16(4 * s)) & 0xF for s in _SWAPPED_SLOT], axis=-1)
    return _sign_extend(nib.astype(np.uint8))


def convert_words(words: np.ndarray) -> np.ndarray:
    """Public wrapper of the two-operation conversion; shape (..., 4), value 16*w."""
    return _convert_words(np.asarray(words, dtype=np.uint16))
