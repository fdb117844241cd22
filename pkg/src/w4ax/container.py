"""On-disk formats.

CMTQ (packed INT4 tensor), all fields little-endian::

    magic      4s   b"CMTQ"
    version    u16  1
    rank       u8
    dims       u32 * rank
    order      u8   0 = linear, 1 = swapped
    interleave u8   0 = none, 1 = fragment
    f, s       u8, u8  (zero when not interleaved)
    -- params block --
    scheme     u8   0 = symmetric, 1 = asymmetric
    granul.    u8   0 tensor, 1 channel, 2 group, 3 block
    axis       u8   quantized axis (non-negative)
    group      u32  group/block size (1 for tensor/channel)
    prank      u8   rank of the params array (0 = per-tensor)
    pdims      u32 * prank
    bits       u8 * P      (P = product of pdims, 1 when prank = 0)
    scales     f32 * P
    zero_pts   i32 * P
    -- payload --
    nbytes     u32
    payload    nbytes bytes of packed nibbles

CMTA (raw activations)::

    magic b"CMTA", rank u8, dims u32 * rank, f32 * prod(dims)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .packing import LINEAR, SWAPPED, PackedNibbleBuffer
from .quant import GRANULARITIES, QuantParams

CMTQ_MAGIC = b"CMTQ"
CMTA_MAGIC = b"CMTA"
CMTQ_VERSION = 1

_ORDERS = (LINEAR, SWAPPED)


class _Reader:
    def __init__(self, data: bytes):
        self.buf = io.BytesIO(data)

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        raw = self.buf.read(size)
        if len(raw) != size:
            raise FormatError("truncated file")
        return struct.unpack(fmt, raw)

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.buf.read(dt.itemsize * count)
        if len(raw) != dt.itemsize * count:
            raise FormatError("truncated file")
        return np.frombuffer(raw, dtype=dt, count=count)

    def rest(self) -> bytes:
        return self.buf.read()


def cmtq_bytes(buf: PackedNibbleBuffer, params: QuantParams) -> bytes:
    dims = buf.shape if buf.shape is not None else (buf.num_elements,)
    out = [CMTQ_MAGIC, struct.pack("<HB", CMTQ_VERSION, len(dims))]
    out.append(struct.pack(f"<{len(dims)}I", *dims))
    f, s = buf.interleave if buf.interleave else (0, 0)
    out.append(struct.pack("<BBBB", _ORDERS.index(buf.nibble_order), int(buf.interleave is not None), f, s))

    scale = np.asarray(params.scale, dtype=np.float64)
    pdims = scale.shape
    count = int(np.prod(pdims)) if pdims else 1
    bits = np.broadcast_to(np.asarray(params.bit_width, dtype=np.uint8).reshape(-1), (count,))
    if params.granularity == "block" and len(np.asarray(params.bit_width).reshape(-1)) != count:
        raise FormatError("per-block bit widths must match the number of scales")
    axis = params.axis % max(len(dims), 1)
    out.append(
        struct.pack(
            "<BBBIB",
            0 if params.symmetric else 1,
            GRANULARITIES.index(params.granularity),
            axis,
            params.group_size,
            len(pdims),
        )
    )
    out.append(struct.pack(f"<{len(pdims)}I", *pdims))
    out.append(bits.astype("<u1").tobytes())
    out.append(scale.reshape(-1).astype("<f4").tobytes())
    out.append(np.asarray(params.zero_point).reshape(-1).astype("<i4").tobytes())
    out.append(struct.pack("<I", len(buf.data)))
    out.append(buf.data)
    return b"".join(out)


def parse_cmtq(data: bytes):
    """Return ``(PackedNibbleBuffer, QuantParams)`` from CMTQ bytes."""
    r = _Reader(data)
    if r.take("4s")[0] != CMTQ_MAGIC:
        raise FormatError("not a CMTQ file")
    version, rank = r.take("<HB")
    if version != CMTQ_VERSION:
        raise FormatError(f"unsupported CMTQ version {version}")
    dims = r.take(f"<{rank}I")
    order, inter, f, s = r.take("<BBBB")
    if order >= len(_ORDERS):
        raise FormatError("bad nibble order")
    scheme, gran, axis, group, prank = r.take("<BBBIB")
    if gran >= len(GRANULARITIES):
        raise FormatError("bad granularity")
    pdims = r.take(f"<{prank}I")
    count = int(np.prod(pdims)) if prank else 1
    bits = r.array("<u1", count).astype(np.int64)
    scales = r.array("<f4", count).astype(np.float64).reshape(pdims)
    zps = r.array("<i4", count).astype(np.int32).reshape(pdims)
    (nbytes,) = r.take("<I")
    payload = r.rest()
    if len(payload) != nbytes:
        raise FormatError("payload length mismatch")
    granularity = GRANULARITIES[gran]
    if granularity == "block":
        bit_width = tuple(int(b) for b in bits)
    else:
        if len(set(bits.tolist())) != 1:
            raise FormatError("mixed bit widths need block granularity")
        bit_width = int(bits[0])
    params = QuantParams(scales, zps, bit_width, scheme == 0, granularity, axis, group)
    n = int(np.prod(dims))
    buf = PackedNibbleBuffer(
        payload,
        n,
        _ORDERS[order],
        (f, s) if inter else None,
        tuple(dims) if rank > 1 else None,
        signed=scheme == 0,
    )
    return buf, params


def write_cmtq(path, buf: PackedNibbleBuffer, params: QuantParams) -> int:
    data = cmtq_bytes(buf, params)
    Path(path).write_bytes(data)
    return len(data)


def read_cmtq(path):
    return parse_cmtq(Path(path).read_bytes())


def write_cmta(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    header = CMTA_MAGIC + struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape)
    Path(path).write_bytes(header + a.astype("<f4").tobytes())


def read_cmta(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise FormatError("empty file")
    r = _Reader(data)
    if r.take("4s")[0] != CMTA_MAGIC:
        raise FormatError("not a CMTA file")
    (rank,) = r.take("<B")
    dims = r.take(f"<{rank}I")
    count = int(np.prod(dims)) if rank else 1
    arr = r.array("<f4", count).astype(np.float64).reshape(dims)
    if r.rest():
        raise FormatError("trailing bytes after CMTA payload")
    return arr
