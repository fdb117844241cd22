import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w4ax.errors import DimensionError
from w4ax.fmpq import (
    BlockPrecisionMap,
    ChannelPermutation,
    OutlierReport,
    assign_block_precision,
    build_permutation,
    calibrate,
    detect_outliers,
    eight_bit_blocks,
    kv_channel_params,
    permute_channels,
    quantize_activation_fmpq,
    quantize_kv_cache,
    quantize_weights_grouped,
    uniform_int4_like,
    unpermute_channels,
)
from w4ax.quant import CalibStats, collect_calib_stats, dequantize, sqnr_db
from w4ax.synthetic import llama_like_activations, planted_channels, synthetic_activations


def stats_from_scores(scores):
    s = np.asarray(scores, dtype=np.float64)
    return CalibStats(len(s), -s, s, 1)


def report_for(C, outliers, scores=None):
    score = np.ones(C)
    for c, v in zip(outliers, scores or [100.0] * len(outliers)):
        score[c] = v
    return detect_outliers(stats_from_scores(score), 8.0)


# detection


def test_single_spike():
    r = detect_outliers(stats_from_scores([1, 1, 1, 100]), 8)
    assert r.median_score == 1
    assert r.outliers.tolist() == [3]


def test_equal_scores_have_no_outliers():
    assert not detect_outliers(stats_from_scores([3.0] * 10), 8).outlier_flags.any()


def test_lower_middle_median():
    r = detect_outliers(stats_from_scores([1, 2, 3, 4]), 8)
    assert r.median_score == 2


def test_planted_channels_flagged_exactly():
    x = synthetic_activations(256, 512, outliers=5, gain=50.0, seed=3)
    stats = collect_calib_stats(x)
    r = detect_outliers(stats, 8)
    score = np.abs(x).max(axis=0)
    oracle = np.flatnonzero(score > 8 * np.sort(score)[255])
    assert r.outliers.tolist() == oracle.tolist() == planted_channels(512, 5, 3).tolist()


def test_theta_must_exceed_one():
    with pytest.raises(ValueError):
        detect_outliers(stats_from_scores([1, 2]), 1.0)


# permutation


def test_permutation_orders_outliers_by_score():
    r = report_for(512, [3, 200, 450], [100.0, 90.0, 80.0])
    perm = build_permutation(r, 128)
    assert perm.perm[:3].tolist() == [3, 200, 450]
    assert np.flatnonzero(eight_bit_blocks(r.outlier_flags[perm.perm], 128)).tolist() == [0]


def test_ties_break_by_index_and_rest_is_stable():
    r = report_for(10, [7, 2, 5], [50.0, 50.0, 90.0])
    perm = build_permutation(r, 4).perm
    assert perm[:3].tolist() == [5, 2, 7]
    assert perm[3:].tolist() == [0, 1, 3, 4, 6, 8, 9]


def test_no_outliers_identity():
    perm = build_permutation(report_for(20, []), 4)
    assert perm.perm.tolist() == list(range(20))


def test_140_outliers_two_blocks():
    r = report_for(1024, list(range(0, 1024, 7))[:140])
    perm = build_permutation(r, 128)
    assert np.flatnonzero(eight_bit_blocks(r.outlier_flags[perm.perm], 128)).tolist() == [0, 1]


def test_permutation_is_bijection():
    p = ChannelPermutation.from_perm([2, 0, 1])
    assert p.inverse[p.perm].tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        ChannelPermutation.from_perm([0, 0, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 600), st.integers(1, 200), st.data())
def test_block_count_is_ceil_and_optimal(C, k, data):
    o = data.draw(st.integers(0, C))
    chans = data.draw(st.permutations(range(C)))[:o]
    flags = np.zeros(C, dtype=bool)
    flags[chans] = True
    r = OutlierReport(np.where(flags, 100.0, 1.0), 8.0, 1.0, flags)
    permuted = eight_bit_blocks(r.outlier_flags[build_permutation(r, k).perm], k).sum()
    unpermuted = eight_bit_blocks(r.outlier_flags, k).sum()
    assert permuted == math.ceil(o / k)
    assert unpermuted >= permuted


# block precision


def test_block_bits_with_clustered_outliers():
    r = report_for(512, [10, 300])
    stats = stats_from_scores(r.channel_score)
    pmap = assign_block_precision(stats, build_permutation(r, 128), r, 128)
    assert pmap.block_bits == (8, 4, 4, 4)
    assert pmap.num_blocks == 4
    assert float(pmap.block_params[0].scale) == pytest.approx(100 / 127, rel=1e-7)
    assert float(pmap.block_params[1].scale) == pytest.approx(1 / 7, rel=1e-7)


def test_outliers_everywhere_pre_permutation():
    r = report_for(512, [5, 130, 260, 390])
    assert eight_bit_blocks(r.outlier_flags, 128).sum() == 4
    pmap = calibrate(stats_from_scores(r.channel_score), 8, 128)
    assert pmap.block_bits == (8, 4, 4, 4)


def test_llama_like_fraction_under_20_percent():
    stats = collect_calib_stats(llama_like_activations(256, 4096, 0.01, seed=0))
    pmap = calibrate(stats, 8, 128)
    flagged = detect_outliers(stats, 8).outlier_flags[pmap.permutation.perm]
    oracle = eight_bit_blocks(flagged, 128).mean()
    assert pmap.eight_bit_fraction() == oracle <= 0.2


def test_calibration_is_deterministic():
    stats = collect_calib_stats(synthetic_activations(64, 300, 4, seed=9))
    assert calibrate(stats, 8, 64).to_json() == calibrate(stats, 8, 64).to_json()


def test_map_json_roundtrip():
    stats = collect_calib_stats(synthetic_activations(64, 300, 4, seed=9))
    pmap = calibrate(stats, 8, 64)
    d = json.loads(pmap.to_json())
    assert {"k", "theta", "perm", "block_bits", "scales"} <= set(d)
    back = BlockPrecisionMap.from_json(pmap.to_json())
    assert back.block_bits == pmap.block_bits
    assert np.array_equal(back.scales, pmap.scales)
    assert np.array_equal(back.permutation.perm, pmap.permutation.perm)


def test_map_json_rejects_bad_block_count():
    d = json.loads(calibrate(stats_from_scores(np.ones(8)), 8, 4).to_json())
    d["block_bits"] = [4]
    with pytest.raises(DimensionError):
        BlockPrecisionMap.from_json(json.dumps(d))


# permuting tensors


def test_permute_identity_and_inverse():
    t = np.arange(24.0).reshape(2, 12)
    ident = ChannelPermutation.identity(12)
    assert np.array_equal(permute_channels(t, ident), t)
    p = ChannelPermutation.from_perm(np.random.default_rng(0).permutation(12))
    assert np.array_equal(unpermute_channels(permute_channels(t, p), p), t)


def test_permute_length_mismatch():
    with pytest.raises(DimensionError):
        permute_channels(np.zeros((2, 5)), ChannelPermutation.identity(4))


def test_permuted_product_exact():
    rng = np.random.default_rng(4)
    A = rng.integers(-8, 8, size=(8, 16))
    W = rng.integers(-8, 8, size=(16, 8))
    p = ChannelPermutation.from_perm(rng.permutation(16))
    assert np.array_equal(permute_channels(A, p, 1) @ permute_channels(W, p, 0), A @ W)


# activation quantization


def lattice_map(C=256, k=128):
    return calibrate(stats_from_scores(np.full(C, 7.0)), 8, k)


def test_all_4bit_lattice_exact():
    pmap = lattice_map()
    assert set(pmap.block_bits) == {4}
    x = np.random.default_rng(0).integers(-7, 8, size=(5, 256)).astype(float)
    assert np.array_equal(dequantize(quantize_activation_fmpq(x, pmap)), x)


def test_mixed_blocks_half_step_bound():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(32, 256))
    x[:, [3, 77]] = rng.uniform(-100, 100, size=(32, 2))
    pmap = calibrate(collect_calib_stats(x), 8, 128)
    assert pmap.block_bits == (8, 4)
    q = quantize_activation_fmpq(x, pmap)
    err = np.abs(dequantize(q) - permute_channels(x, pmap.permutation))
    for b, s in enumerate(pmap.scales):
        assert err[:, b * 128 : (b + 1) * 128].max() <= s / 2


def test_zero_activations():
    q = quantize_activation_fmpq(np.zeros((3, 256)), lattice_map())
    assert not q.data.any()


def test_activation_channel_mismatch():
    with pytest.raises(DimensionError):
        quantize_activation_fmpq(np.zeros((3, 255)), lattice_map())


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from([32, 64, 128]))
def test_mixed_precision_sqnr_dominates_uniform(seed, outliers, k):
    x = synthetic_activations(32, 256, outliers, 50.0, seed)
    stats = collect_calib_stats(x)
    pmap = calibrate(stats, 8, k)
    assert 8 in pmap.block_bits
    mixed = dequantize(quantize_activation_fmpq(x, pmap))
    uniform = dequantize(quantize_activation_fmpq(x, uniform_int4_like(pmap, stats)))
    xp = permute_channels(x, pmap.permutation)
    assert sqnr_db(xp, mixed) >= sqnr_db(xp, uniform)


# KV cache and weights


def test_kv_lattice_channel_exact():
    col = np.round(np.arange(16) * 0.1, 10)
    kv = np.stack([col, col * 2], axis=1)
    q = quantize_kv_cache(kv)
    assert float(q.params.scale[0]) == pytest.approx(0.1, rel=1e-7)
    assert q.params.zero_point.tolist() == [0, 0]
    assert np.allclose(dequantize(q), kv, rtol=0, atol=1e-7)
    assert q.data[:, 0].tolist() == list(range(16))


def test_kv_constant_channel():
    kv = np.full((6, 3), -0.42)
    assert np.array_equal(dequantize(quantize_kv_cache(kv)), kv)


def test_kv_uniform_half_step():
    kv = np.random.default_rng(6).uniform(-3, 5, size=(200, 16))
    p = kv_channel_params(kv)
    err = np.abs(dequantize(quantize_kv_cache(kv, p)) - kv)
    assert np.all(err.max(axis=0) <= p.scale / 2 + 1e-12)
    assert np.all((p.zero_point >= 0) & (p.zero_point <= 15))


def test_weights_with_maxabs_7_exact():
    rng = np.random.default_rng(7)
    W = rng.integers(-7, 8, size=(256, 4)).astype(float)
    W[0], W[128] = 7, -7
    q = quantize_weights_grouped(W, 128)
    assert np.all(q.params.scale == 1.0)
    assert np.array_equal(dequantize(q), W)


def test_zero_weights():
    q = quantize_weights_grouped(np.zeros((128, 3)))
    assert not q.data.any() and np.all(q.params.scale == 1.0)


def test_random_weights_sqnr_20db():
    W = np.random.default_rng(8).uniform(-1, 1, size=(256, 256))
    q = quantize_weights_grouped(W, 128)
    W_hat = dequantize(q)
    oracle = 10 * np.log10(np.sum(W**2) / np.sum((W - W_hat) ** 2))
    assert sqnr_db(W, W_hat) == pytest.approx(oracle)
    assert oracle >= 20


def test_gaussian_weights_sqnr_measured():
    # min-max INT4 over 128 Gaussian samples lands near 19 dB, below the uniform case
    W = np.random.default_rng(8).normal(size=(256, 256))
    assert 17.5 < sqnr_db(W, dequantize(quantize_weights_grouped(W, 128))) < 20


def test_outlier_report_fields():
    r = report_for(4, [0])
    assert isinstance(r, OutlierReport)
    assert r.threshold_factor == 8.0
