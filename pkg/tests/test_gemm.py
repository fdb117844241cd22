import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w4ax.errors import DimensionError, GemmConsistencyError, LayoutError
from w4ax.fmpq import BlockPrecisionMap, ChannelPermutation, calibrate, permute_channels
from w4ax.gemm import (
    Precision,
    QuantizedWeights,
    TileConfig,
    TileResult,
    WorkStealingPool,
    dequantized_reference,
    execute_plan,
    execute_tile,
    mixed_gemm,
    plan_gemm,
    prepare_weights,
    reduce_and_dequant,
    relative_error,
    stage_tile,
)
from w4ax.packing import pack_nibbles
from w4ax.quant import IntTensor, QuantParams, collect_calib_stats
from w4ax.synthetic import synthetic_activations


def unit_map(bits, k=128, perm=None):
    """Block map with every scale 1 (lattice values quantize exactly)."""
    C = len(perm) if perm is not None else None
    params = tuple(QuantParams(np.asarray(1.0), np.asarray(0, np.int32), b, True) for b in bits)
    p = perm if perm is not None else ChannelPermutation.identity(k * len(bits))
    assert C is None or C == len(p)
    return BlockPrecisionMap(k, tuple(bits), params, p)


def int_weights(Wq, perm, group):
    """Integer (K, N) weights stored like prepare_weights but with unit scales."""
    K, N = Wq.shape
    Wt = permute_channels(Wq, perm, axis=0).T
    kp = 4 * math.ceil(K / 4)
    padded = np.zeros((N, kp), np.int8)
    padded[:, :K] = Wt
    G = math.ceil(K / group)
    params = QuantParams(np.ones((N, G)), np.zeros((N, G), np.int32), 4, True, "group", 1, group)
    return QuantizedWeights(pack_nibbles(padded), params, K, N, group, perm)


def engine_product(A, Wq, perm, k, cfg, workers=1, bits=None):
    bits = bits or [4] * math.ceil(A.shape[1] / k)
    pmap = unit_map(bits, k, perm)
    w = int_weights(Wq, perm, k)
    a_q = IntTensor(permute_channels(A, perm, 1).astype(np.int8), pmap.as_quant_params())
    plan = plan_gemm(A.shape[0], Wq.shape[1], A.shape[1], pmap, cfg, k)
    return execute_plan(plan, a_q, w, pmap.scales, workers)


def fmpq_problem(M, N, K, outliers=2, seed=0, block=128, group=128):
    act = synthetic_activations(M, K, outliers, 50.0, seed)
    W = np.random.default_rng(seed + 1).normal(size=(K, N))
    pmap = calibrate(collect_calib_stats(act), 8, block)
    return act, prepare_weights(W, pmap, group), pmap


# planning


def test_plan_256_256_384():
    pmap = unit_map([8, 4, 4])
    plan = plan_gemm(256, 256, 384, pmap)
    assert len(plan.tasks) == 12
    w4a8 = [t for t in plan.tasks if t.precision is Precision.W4A8]
    assert len(w4a8) == 4 and all(t.k_idx == 0 for t in w4a8)
    assert [(t.m_idx, t.n_idx, t.k_idx) for t in plan.tasks[:4]] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0)]


def test_plan_all_4bit():
    plan = plan_gemm(64, 64, 128, unit_map([4]))
    assert {t.precision for t in plan.tasks} == {Precision.W4A4}


@settings(max_examples=150, deadline=None)
@given(
    st.integers(1, 300),
    st.integers(1, 300),
    st.sampled_from([(32, 64), (64, 32), (64, 64), (16, 128)]),
    st.integers(1, 8),
    st.data(),
)
def test_plan_invariants(M, N, ks, nblocks, data):
    k, tile_k = ks
    bits = data.draw(st.lists(st.sampled_from([4, 8]), min_size=nblocks, max_size=nblocks))
    K = k * nblocks - data.draw(st.integers(0, k - 1))
    pmap = BlockPrecisionMap(k, tuple(bits), unit_map(bits, k).block_params, ChannelPermutation.identity(K))
    cfg = TileConfig(64, 64, tile_k)
    plan = plan_gemm(M, N, K, pmap, cfg)
    assert len(plan.tasks) == math.ceil(M / 64) * math.ceil(N / 64) * math.ceil(K / tile_k)
    seen = sorted(i for ix in plan.reduction_groups.values() for i in ix)
    assert seen == list(range(len(plan.tasks)))
    for t in plan.tasks:
        k0, k1 = plan.k_range(t.k_idx)
        overlaps_8 = any(bits[c // k] == 8 for c in range(k0, k1))
        assert (t.precision is Precision.W4A8) == overlaps_8
        for seg in plan.segments[t.k_idx]:
            if t.precision is Precision.W4A4:
                assert bits[seg.block] == 4


def test_plan_errors():
    with pytest.raises(DimensionError):
        plan_gemm(0, 4, 128, unit_map([4]))
    with pytest.raises(DimensionError):
        plan_gemm(4, 4, 256, unit_map([4]))
    with pytest.raises(DimensionError):
        plan_gemm(4, 4, 128, unit_map([4]), TileConfig(128, 128, 48))
    with pytest.raises(ValueError):
        TileConfig(128, 128, 8192)


# tiles


def small_plan(bits):
    cfg = TileConfig(16, 8, 16)
    return unit_map(bits, 16), cfg


def test_identity_tile_both_paths():
    rng = np.random.default_rng(0)
    Wq = rng.integers(-8, 8, size=(16, 8))
    for bits, factor in (([4], 1), ([8], 16)):
        pmap, cfg = small_plan(bits)
        plan = plan_gemm(16, 8, 16, pmap, cfg, 16)
        w = int_weights(Wq, pmap.permutation, 16)
        a_q = IntTensor(np.eye(16, dtype=np.int8), pmap.as_quant_params())
        res = execute_tile(plan.tasks[0], a_q, w, plan)
        assert res.folded == (factor == 16)
        (_, acc), = res.partials
        assert acc.dtype == np.int32
        assert np.array_equal(acc, factor * Wq)


def test_zero_activation_tile():
    pmap, cfg = small_plan([8])
    plan = plan_gemm(16, 8, 16, pmap, cfg, 16)
    w = int_weights(np.ones((16, 8), int), pmap.permutation, 16)
    res = execute_tile(plan.tasks[0], IntTensor(np.zeros((16, 16), np.int8), pmap.as_quant_params()), w, plan)
    assert not res.partials[0][1].any()


def test_random_tiles_match_triple_loop():
    rng = np.random.default_rng(1)
    for bits in ([4], [8]):
        pmap, cfg = small_plan(bits)
        plan = plan_gemm(16, 8, 16, pmap, cfg, 16)
        lim = 8 if bits == [4] else 128
        A = rng.integers(-lim + 1, lim, size=(16, 16))
        Wq = rng.integers(-8, 8, size=(16, 8))
        (_, acc), = execute_tile(plan.tasks[0], IntTensor(A.astype(np.int8), pmap.as_quant_params()), int_weights(Wq, pmap.permutation, 16), plan).partials
        oracle = [[sum(int(A[i, k]) * int(Wq[k, j]) for k in range(16)) for j in range(8)] for i in range(16)]
        scale = 16 if bits == [8] else 1
        assert (acc // scale).tolist() == oracle and np.all(acc % scale == 0)


def test_w4a4_tile_rejects_wide_activations():
    pmap, cfg = small_plan([4])
    plan = plan_gemm(16, 8, 16, pmap, cfg, 16)
    A = np.zeros((16, 16), np.int8)
    A[0, 0] = 9
    with pytest.raises(LayoutError):
        stage_tile(plan.tasks[0], plan, IntTensor(A, pmap.as_quant_params()), int_weights(np.zeros((16, 8), int), pmap.permutation, 16))


# reduction


def fake_results(plan, accs, folded=False):
    out = []
    for t, acc in zip(plan.tasks, accs):
        segs = plan.segments[t.k_idx]
        out.append(TileResult(t, [(segs[0], acc)], folded))
    return out


def test_reduce_single_block_unit_scales():
    pmap, cfg = small_plan([4])
    plan = plan_gemm(16, 8, 16, pmap, cfg, 16)
    acc = np.arange(128, dtype=np.int32).reshape(16, 8)
    out = reduce_and_dequant(fake_results(plan, [acc]), plan, np.array([1.0]), np.ones((8, 1)))
    assert np.array_equal(out, acc)


def test_reduce_two_blocks_folded_scale():
    pmap = unit_map([8, 4], 16)
    plan = plan_gemm(4, 8, 32, pmap, TileConfig(16, 8, 16), 16)
    rng = np.random.default_rng(2)
    raw = [rng.integers(-50, 50, size=(4, 8)).astype(np.int32) for _ in range(2)]
    res = [
        TileResult(plan.tasks[0], [(plan.segments[0][0], 16 * raw[0])], True),
        TileResult(plan.tasks[1], [(plan.segments[1][0], raw[1])], False),
    ]
    out = reduce_and_dequant(res, plan, np.array([1.0, 1.0]), np.ones((8, 2)))
    assert np.array_equal(out, raw[0] + raw[1])


def test_reduce_is_completion_order_independent():
    pmap = unit_map([4, 4, 4], 16)
    plan = plan_gemm(4, 8, 48, pmap, TileConfig(16, 8, 16), 16)
    rng = np.random.default_rng(3)
    res = fake_results(plan, [rng.integers(-99, 99, size=(4, 8)).astype(np.int32) for _ in range(3)])
    scales = np.array([0.3, 1.7, 0.011])
    ws = rng.uniform(0.1, 2, size=(8, 3))
    assert np.array_equal(reduce_and_dequant(res, plan, scales, ws), reduce_and_dequant(res[::-1], plan, scales, ws))


def test_missing_partial_raises():
    pmap = unit_map([4, 4], 16)
    plan = plan_gemm(4, 8, 32, pmap, TileConfig(16, 8, 16), 16)
    res = fake_results(plan, [np.zeros((4, 8), np.int32)] * 2)
    with pytest.raises(GemmConsistencyError):
        reduce_and_dequant(res[:1], plan, np.ones(2), np.ones((8, 2)))
    with pytest.raises(GemmConsistencyError):
        reduce_and_dequant([], plan, np.ones(2), np.ones((8, 2)))


# end to end


def test_identity_activation_returns_weights():
    rng = np.random.default_rng(4)
    K, N = 128, 32
    Wq = rng.integers(-7, 8, size=(K, N))
    perm = ChannelPermutation.from_perm(rng.permutation(K))
    pmap = unit_map([4], 128, perm)
    w = int_weights(Wq, perm, 128)
    out = mixed_gemm(np.eye(K), w, pmap, TileConfig(64, 64, 128))
    assert np.array_equal(out, Wq.astype(float))
    assert np.array_equal(permute_channels(out, perm, 0), w.dequantized())


def test_fmpq_gemm_against_reference():
    act, w, pmap = fmpq_problem(256, 256, 384)
    assert pmap.block_bits == (8, 4, 4)
    out = mixed_gemm(act, w, pmap, workers=4)
    assert relative_error(out, dequantized_reference(act, w, pmap)) <= 1e-6
    assert relative_error(out, act @ np.random.default_rng(1).normal(size=(384, 256))) < 0.2


@pytest.mark.parametrize("shape", [(1, 1, 1), (7, 13, 130), (130, 70, 257), (64, 200, 96)])
def test_ragged_shapes(shape):
    M, N, K = shape
    act, w, pmap = fmpq_problem(M, N, K, outliers=min(2, K), seed=5, block=32, group=48)
    out = mixed_gemm(act, w, pmap, TileConfig(32, 32, 64), workers=3)
    assert out.shape == (M, N)
    assert relative_error(out, dequantized_reference(act, w, pmap)) <= 1e-6


def test_worker_count_bit_identical():
    act, w, pmap = fmpq_problem(200, 160, 384, outliers=3, seed=6)
    cfg = TileConfig(64, 64, 128)
    ref = mixed_gemm(act, w, pmap, cfg, workers=1).tobytes()
    for workers in (2, 4, 8):
        assert mixed_gemm(act, w, pmap, cfg, workers=workers).tobytes() == ref
    assert mixed_gemm(act, w, pmap, cfg, workers=4, double_buffer=False).tobytes() == ref


def test_batched_activation_shape():
    act, w, pmap = fmpq_problem(12, 16, 128, seed=7)
    out = mixed_gemm(act.reshape(3, 4, 128), w, pmap)
    assert out.shape == (3, 4, 16)
    assert np.array_equal(out.reshape(12, 16), mixed_gemm(act, w, pmap))


def test_gemm_shape_errors():
    act, w, pmap = fmpq_problem(4, 8, 128, seed=8)
    with pytest.raises(DimensionError):
        mixed_gemm(act[:, :64], w, pmap)
    other = calibrate(collect_calib_stats(synthetic_activations(8, 128, 3, seed=99)), 8, 128)
    with pytest.raises(DimensionError):
        mixed_gemm(act, w, other)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40), st.sampled_from([16, 32, 48]))
def test_permutation_equivalence_in_engine(seed, M, N, K):
    rng = np.random.default_rng(seed)
    A = rng.integers(-7, 8, size=(M, K))
    Wq = rng.integers(-7, 8, size=(K, N))
    perm = ChannelPermutation.from_perm(rng.permutation(K))
    cfg = TileConfig(16, 16, 16)
    permuted = engine_product(A, Wq, perm, 16, cfg)
    plain = engine_product(A, Wq, ChannelPermutation.identity(K), 16, cfg)
    assert np.array_equal(permuted, plain)
    assert np.array_equal(plain, (A @ Wq).astype(float))


# pool


def test_pool_runs_every_task_once_with_stealing():
    costs = [2] * 3 + [1] * 40
    seen, lock = [], threading.Lock()
    pool = WorkStealingPool(4)

    def finish(t):
        with lock:
            seen.append(t)

    pool.run(costs, lambda t: t, lambda t: t, finish)
    assert sorted(seen) == list(range(len(costs)))


def test_pool_stages_next_tile_before_compute():
    log = []
    pool = WorkStealingPool(1, double_buffer=True)
    pool.run([1, 1, 1], lambda t: log.append(("stage", t)) or t, lambda t: log.append(("compute", t)) or t, lambda t: None)
    assert log[:3] == [("stage", 0), ("stage", 1), ("compute", 0)]


def test_pool_owner_lifo_thief_fifo():
    pool = WorkStealingPool(2)
    queues = pool._deal([1, 1, 1, 1])
    assert [list(q) for q in queues] == [[2, 0], [3, 1]]
    assert queues[0].pop() == 0
    assert queues[1].popleft() == 3


def test_pool_surfaces_errors():
    def bad(t):
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        WorkStealingPool(3).run([1] * 6, lambda t: t, bad, lambda r: None)
