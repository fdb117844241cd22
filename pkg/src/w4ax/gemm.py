"""Tile-based mixed-precision integer GEMM.

``out = act @ W`` with activations quantized per FMPQ block (INT4 or INT8)
and INT4 group-quantized weights. Each (m, n, k) tile runs either the W4A4
path (int4 x int4) or the W4A8 path (weights zero-extended to 16*w via the
fast conversion, scale folded by 1/16). Integer partials are reduced per
(m, n) output tile in k order, so results do not depend on which worker
ran which tile.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, GemmConsistencyError, LayoutError
from .fmpq import BlockPrecisionMap, ChannelPermutation, permute_channels, quantize_activation_fmpq
from .packing import SWAPPED, PackedNibbleBuffer, convert_words, pack_nibbles, unpack_words
from .quant import IntTensor, QuantParams, dequantize, quantize_grouped

MAX_TILE_K = 4096


class Precision(str, Enum):
    W4A4 = "W4A4"
    W4A8 = "W4A8"

    @property
    def cost_units(self) -> int:
        return 1 if self is Precision.W4A4 else 2


@dataclass(frozen=True)
class TileConfig:
    tile_m: int = 128
    tile_n: int = 128
    tile_k: int = 128

    def __post_init__(self):
        if min(self.tile_m, self.tile_n, self.tile_k) < 1:
            raise ValueError("tile dimensions must be positive")
        if self.tile_k > MAX_TILE_K:
            # 127 * 127 * 4096 < 2**31 keeps int32 accumulators exact
            raise ValueError(f"tile_k is capped at {MAX_TILE_K}")


@dataclass(frozen=True)
class Segment:
    """A k-range inside one tile sharing one activation block and one weight group."""

    k_start: int
    k_end: int
    block: int
    group: int


@dataclass(frozen=True)
class TileTask:
    m_idx: int
    n_idx: int
    k_idx: int
    precision: Precision

    @property
    def cost_units(self) -> int:
        return self.precision.cost_units


@dataclass
class GemmPlan:
    M: int
    N: int
    K: int
    cfg: TileConfig
    tasks: List[TileTask]
    reduction_groups: Dict[Tuple[int, int], List[int]]
    segments: List[List[Segment]]  # per k_idx

    def m_range(self, i):
        return i * self.cfg.tile_m, min((i + 1) * self.cfg.tile_m, self.M)

    def n_range(self, j):
        return j * self.cfg.tile_n, min((j + 1) * self.cfg.tile_n, self.N)

    def k_range(self, kk):
        return kk * self.cfg.tile_k, min((kk + 1) * self.cfg.tile_k, self.K)


def _k_segments(k0: int, k1: int, block: int, group: int) -> List[Segment]:
    cuts = {k0, k1}
    for step in (block, group):
        cuts.update(range((k0 // step + 1) * step, k1, step))
    edges = sorted(cuts)
    return [Segment(a, b, a // block, a // group) for a, b in zip(edges, edges[1:])]


def plan_gemm(
    M: int,
    N: int,
    K: int,
    pmap: BlockPrecisionMap,
    cfg: TileConfig = TileConfig(),
    weight_group: Optional[int] = None,
) -> GemmPlan:
    """Enumerate tiles row-major over (m, n, k) and tag each with its precision.

    A tile is W4A8 iff its k-range overlaps an 8-bit activation block.
    """
    if min(M, N, K) < 1:
        raise DimensionError("GEMM dimensions must be positive")
    if pmap.num_channels != K:
        raise DimensionError(f"precision map covers {pmap.num_channels} channels, K = {K}")
    k = pmap.k
    if cfg.tile_k % k and k % cfg.tile_k:
        raise DimensionError(f"tile_k {cfg.tile_k} and block size {k} must nest")
    group = weight_group or K
    mt, nt, kt = (math.ceil(M / cfg.tile_m), math.ceil(N / cfg.tile_n), math.ceil(K / cfg.tile_k))
    segments, k_prec = [], []
    for kk in range(kt):
        k0, k1 = kk * cfg.tile_k, min((kk + 1) * cfg.tile_k, K)
        segments.append(_k_segments(k0, k1, k, group))
        hot = any(pmap.block_bits[b] == 8 for b in range(k0 // k, (k1 - 1) // k + 1))
        k_prec.append(Precision.W4A8 if hot else Precision.W4A4)
    tasks, groups = [], {}
    for i in range(mt):
        for j in range(nt):
            for kk in range(kt):
                groups.setdefault((i, j), []).append(len(tasks))
                tasks.append(TileTask(i, j, kk, k_prec[kk]))
    return GemmPlan(M, N, K, cfg, tasks, groups, segments)


@dataclass(frozen=True)
class QuantizedWeights:
    """INT4 weights for ``act @ W`` stored as W^T: (N, Kp) rows, reduction contiguous.

    K is permuted by the activation map's permutation and padded to a whole
    number of 16-bit words per row; the padding is zero.
    """

    packed: PackedNibbleBuffer
    params: QuantParams  # scale shape (N, G), grouped along axis 1
    K: int
    N: int
    group_size: int
    permutation: ChannelPermutation

    @property
    def padded_k(self) -> int:
        return self.packed.shape[1]

    @property
    def words(self) -> np.ndarray:
        return np.frombuffer(self.packed.data, dtype="<u2").reshape(self.N, self.padded_k // 4)

    def int_values(self) -> np.ndarray:
        """(N, K) signed int4 values in permuted reduction order."""
        return unpack_words(self.words).reshape(self.N, -1)[:, : self.K]

    def dequantized(self) -> np.ndarray:
        """(K, N) real weights in permuted reduction order."""
        return dequantize(IntTensor(self.int_values(), self.params)).T


def prepare_weights(W, pmap: Optional[BlockPrecisionMap] = None, group_size: int = 128) -> QuantizedWeights:
    """Permute W's reduction axis, group-quantize to INT4, pack in swapped order."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError("weights must be (K, N)")
    K, N = W.shape
    perm = pmap.permutation if pmap is not None else ChannelPermutation.identity(K)
    if len(perm) != K:
        raise DimensionError(f"map covers {len(perm)} channels, weights have K = {K}")
    Wt = permute_channels(W, perm, axis=0).T
    q = quantize_grouped(Wt, group_size, 4, True, axis=1)
    kp = 4 * math.ceil(K / 4)
    padded = np.zeros((N, kp), dtype=np.int8)
    padded[:, :K] = q.data
    return QuantizedWeights(pack_nibbles(padded, SWAPPED), q.params, K, N, group_size, perm)


@dataclass
class StagedTile:
    task: TileTask
    a: np.ndarray  # (tm, tk) int32 activations
    w: np.ndarray  # (tk, tn) int32 weights; 16*w on the W4A8 path
    folded: bool


@dataclass
class TileResult:
    task: TileTask
    partials: List[Tuple[Segment, np.ndarray]]
    folded: bool


def stage_tile(task: TileTask, plan: GemmPlan, a_q: IntTensor, w_q: QuantizedWeights) -> StagedTile:
    """Unpack (W4A4) or fast-convert (W4A8) this tile's operands."""
    m0, m1 = plan.m_range(task.m_idx)
    n0, n1 = plan.n_range(task.n_idx)
    k0, k1 = plan.k_range(task.k_idx)
    words = w_q.words[n0:n1, k0 // 4 : math.ceil(k1 / 4)]
    off = k0 - 4 * (k0 // 4)
    if task.precision is Precision.W4A8:
        w = convert_words(words)
    else:
        w = unpack_words(words)
        a_vals = a_q.data[m0:m1, k0:k1]
        if a_vals.size and (a_vals.min() < -8 or a_vals.max() > 7):
            raise LayoutError("W4A4 tile received activations outside the INT4 range")
    w = w.reshape(n1 - n0, -1)[:, off : off + (k1 - k0)]
    a = a_q.data[m0:m1, k0:k1].astype(np.int32)
    return StagedTile(task, a, np.ascontiguousarray(w.T, dtype=np.int32), task.precision is Precision.W4A8)


def compute_staged(staged: StagedTile, plan: GemmPlan) -> TileResult:
    k0 = plan.k_range(staged.task.k_idx)[0]
    partials = []
    for seg in plan.segments[staged.task.k_idx]:
        a, b = seg.k_start - k0, seg.k_end - k0
        acc = np.matmul(staged.a[:, a:b], staged.w[a:b, :], dtype=np.int32)
        partials.append((seg, acc))
    return TileResult(staged.task, partials, staged.folded)


def execute_tile(task: TileTask, a_q: IntTensor, w_q: QuantizedWeights, plan: GemmPlan) -> TileResult:
    """Integer accumulators (int32) for one tile, one per k-segment."""
    return compute_staged(stage_tile(task, plan, a_q, w_q), plan)


def reduce_and_dequant(
    results: Sequence[TileResult],
    plan: GemmPlan,
    act_scales: np.ndarray,
    weight_scales: np.ndarray,
) -> np.ndarray:
    """``sum_k s_a(block) * s_w(group, n) * acc`` in k order, in float64.

    ``weight_scales`` is (N, G); tiles on the W4A8 path use ``s_w / 16``.
    """
    if not results:
        raise GemmConsistencyError("empty reduction group")
    first = results[0].task
    by_k = {r.task.k_idx: r for r in results}
    kt = len(plan.segments)
    missing = [kk for kk in range(kt) if kk not in by_k]
    if missing or len(by_k) != len(results):
        raise GemmConsistencyError(
            f"group ({first.m_idx}, {first.n_idx}) missing k tiles {missing}"
        )
    n0, n1 = plan.n_range(first.n_idx)
    m0, m1 = plan.m_range(first.m_idx)
    out = np.zeros((m1 - m0, n1 - n0), dtype=np.float64)
    for kk in range(kt):
        r = by_k[kk]
        if (r.task.m_idx, r.task.n_idx) != (first.m_idx, first.n_idx):
            raise GemmConsistencyError("partial from another output tile")
        for seg, acc in r.partials:
            sw = weight_scales[n0:n1, seg.group]
            if r.folded:
                sw = sw / 16.0
            out += (act_scales[seg.block] * sw)[None, :] * acc
    return out


class WorkStealingPool:
    """Per-worker deques: owners pop from the tail, thieves steal from the head.

    Tasks are dealt to workers by longest-processing-time greedy on their cost.
    Each worker keeps two staging slots so the next tile's operands are ready
    before the current tile's compute starts.
    """

    def __init__(self, workers: int = 1, double_buffer: bool = True):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.double_buffer = double_buffer
        self.steals = 0

    def _deal(self, costs: Sequence[int]) -> List[deque]:
        queues = [deque() for _ in range(self.workers)]
        load = [0] * self.workers
        for t in sorted(range(len(costs)), key=lambda i: (-costs[i], i)):
            w = min(range(self.workers), key=lambda i: (load[i], i))
            load[w] += costs[t]
            queues[w].appendleft(t)  # owner pops from the tail, so keep deal order there
        return queues

    def run(self, costs: Sequence[int], stage: Callable, compute: Callable, finish: Callable) -> None:
        queues = self._deal(costs)
        errors: List[BaseException] = []
        steal_lock = threading.Lock()

        def next_task(wid: int) -> Optional[int]:
            try:
                return queues[wid].pop()
            except IndexError:
                pass
            for off in range(1, self.workers):
                try:
                    t = queues[(wid + off) % self.workers].popleft()
                except IndexError:
                    continue
                with steal_lock:
                    self.steals += 1
                return t
            return None

        def worker(wid: int) -> None:
            try:
                slots: List[Optional[object]] = [None, None]
                cur = 0
                t = next_task(wid)
                slots[cur] = stage(t) if t is not None else None
                while slots[cur] is not None:
                    if self.double_buffer:
                        nt = next_task(wid)
                        slots[1 - cur] = stage(nt) if nt is not None else None
                    finish(compute(slots[cur]))
                    slots[cur] = None
                    if not self.double_buffer:
                        nt = next_task(wid)
                        slots[1 - cur] = stage(nt) if nt is not None else None
                    cur = 1 - cur
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                for q in queues:
                    q.clear()

        if self.workers == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(i,)) for i in range(self.workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        if errors:
            raise errors[0]


def execute_plan(
    plan: GemmPlan,
    a_q: IntTensor,
    w_q: QuantizedWeights,
    act_scales: np.ndarray,
    workers: int = 1,
    double_buffer: bool = True,
) -> np.ndarray:
    out = np.zeros((plan.M, plan.N), dtype=np.float64)
    pending = {g: len(ix) for g, ix in plan.reduction_groups.items()}
    collected: Dict[Tuple[int, int], List[TileResult]] = {g: [] for g in plan.reduction_groups}
    lock = threading.Lock()
    w_scales = np.asarray(w_q.params.scale, dtype=np.float64).reshape(w_q.N, -1)

    def finish(res: TileResult) -> None:
        g = (res.task.m_idx, res.task.n_idx)
        with lock:
            collected[g].append(res)
            pending[g] -= 1
            done = pending[g] == 0
        if done:
            m0, m1 = plan.m_range(g[0])
            n0, n1 = plan.n_range(g[1])
            out[m0:m1, n0:n1] = reduce_and_dequant(collected[g], plan, act_scales, w_scales)

    pool = WorkStealingPool(workers, double_buffer)
    pool.run(
        [t.cost_units for t in plan.tasks],
        lambda i: stage_tile(plan.tasks[i], plan, a_q, w_q),
        lambda st: compute_staged(st, plan),
        finish,
    )
    if any(pending.values()):
        raise GemmConsistencyError("some reduction groups never completed")
    return out


def mixed_gemm(
    act,
    weights: QuantizedWeights,
    pmap: BlockPrecisionMap,
    cfg: TileConfig = TileConfig(),
    workers: int = 1,
    double_buffer: bool = True,
) -> np.ndarray:
    """Quantize ``act`` per ``pmap`` and compute ``act @ W`` on the tile engine.

    ``act`` is (..., K); the result is (..., N) in float64.
    """
    act = np.asarray(act, dtype=np.float64)
    lead = act.shape[:-1]
    a2 = act.reshape(-1, act.shape[-1])
    if a2.shape[1] != weights.K:
        raise DimensionError(f"activation K = {a2.shape[1]}, weights K = {weights.K}")
    if not np.array_equal(pmap.permutation.perm, weights.permutation.perm):
        raise DimensionError("weights were permuted with a different channel permutation")
    if a2.shape[0] == 0:
        return np.zeros((*lead, weights.N))
    a_q = quantize_activation_fmpq(a2, pmap)
    plan = plan_gemm(a2.shape[0], weights.N, weights.K, pmap, cfg, weights.group_size)
    out = execute_plan(plan, a_q, weights, pmap.scales, workers, double_buffer)
    return out.reshape(*lead, weights.N)


def dequantized_reference(act, weights: QuantizedWeights, pmap: BlockPrecisionMap) -> np.ndarray:
    """Dense float64 ``dequant(quant(act)) @ dequant(W)``; the check oracle for mixed_gemm."""
    act = np.asarray(act, dtype=np.float64)
    a2 = act.reshape(-1, act.shape[-1])
    a_deq = dequantize(quantize_activation_fmpq(a2, pmap))
    return (a_deq @ weights.dequantized()).reshape(*act.shape[:-1], weights.N)


def relative_error(x: np.ndarray, ref: np.ndarray) -> float:
    denom = float(np.linalg.norm(ref))
    diff = float(np.linalg.norm(np.asarray(x) - ref))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / denom
