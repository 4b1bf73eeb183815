from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xnesim import golden
from xnesim.bintensor import BinaryTensor, BinaryWeights
from xnesim.errors import DegenerateBatchNorm, ShapeError
from xnesim.golden import (BatchNormParams, LayerSpec, ThresholdSpec,
                           apply_thresholds, choose_shift, conv_popcounts,
                           derive_thresholds, layer_golden, majority_avgpool,
                           or_maxpool, popcount_thresholds,
                           quantize_thresholds, real_reference,
                           round_half_up_shift)


def naive_popcounts(x: BinaryTensor, w: BinaryWeights, spec: LayerSpec):
    """Independent oracle: count agreeing bits element by element."""
    xb = x.to_bits()
    wb = w.to_bits()
    out = np.zeros((spec.nof, spec.h_out, spec.w_out), dtype=np.int64)
    for k in range(spec.nof):
        base = spec.band_start(k)
        for i in range(spec.h_out):
            for j in range(spec.w_out):
                pc = 0
                for ci in range(spec.d_eff):
                    for fi in range(spec.fs):
                        for fj in range(spec.fs):
                            pc += int(xb[base + ci, i + fi, j + fj]
                                      == wb[k, ci, fi, fj])
                out[k, i, j] = pc
    return out


CASES = [
    LayerSpec(nif=7, nof=3, fs=3, h_out=2, w_out=3),
    LayerSpec(nif=33, nof=2, fs=1, h_out=2, w_out=2),
    LayerSpec(nif=12, nof=4, fs=3, h_out=2, w_out=2, d=3),   # one band per output
    LayerSpec(nif=8, nof=4, fs=1, h_out=3, w_out=1, d=4),    # two outputs per band
    LayerSpec(nif=40, nof=1, fs=5, h_out=1, w_out=2),
    LayerSpec(nif=6, nof=6, fs=1, h_out=1, w_out=1, d=1),
]


@pytest.mark.parametrize("spec", CASES)
def test_conv_popcounts_match_naive(spec):
    rng = np.random.default_rng(hash((spec.nif, spec.nof, spec.fs)) % 2**31)
    x, w = golden.random_layer_data(rng, spec)
    assert np.array_equal(conv_popcounts(x, w, spec), naive_popcounts(x, w, spec))


def test_popcount_range():
    spec = LayerSpec(nif=5, nof=2, fs=3, h_out=2, w_out=2)
    rng = np.random.default_rng(0)
    x, w = golden.random_layer_data(rng, spec)
    pc = conv_popcounts(x, w, spec)
    assert pc.min() >= 0 and pc.max() <= spec.n_acc
    # all-agree and all-disagree extremes
    ones = BinaryTensor.from_bits(np.ones((5, 4, 4), dtype=np.uint8))
    wone = BinaryWeights.from_bits(np.ones((2, 5, 3, 3), dtype=np.uint8))
    assert np.all(conv_popcounts(ones, wone, spec) == spec.n_acc)
    wzero = BinaryWeights.from_bits(np.zeros((2, 5, 3, 3), dtype=np.uint8))
    assert np.all(conv_popcounts(ones, wzero, spec) == 0)


@given(st.integers(1, 2000), st.data())
@settings(max_examples=120)
def test_threshold_fold_matches_real_sign(n_acc, data):
    """Oracle for the batch-norm fold: for every reachable popcount,
    the popcount-domain comparison must reproduce the real-valued sign
    (with sign(0) = +1) of gamma*(t - mu)/sigma + beta."""
    f = st.floats(-50, 50, allow_nan=False)
    gamma = data.draw(f.filter(lambda v: abs(v) > 1e-3))
    sigma = data.draw(st.floats(1e-2, 50))
    beta = data.draw(f)
    mu = data.draw(st.floats(-2 * n_acc, 2 * n_acc))
    bias = data.draw(st.integers(-n_acc, n_acc))
    bn = BatchNormParams([gamma], [beta], [mu], [sigma], [float(bias)])
    tau_pc, lam_pos = popcount_thresholds(bn, n_acc)
    lam = gamma / sigma
    pcs = np.concatenate([np.arange(0, min(n_acc, 64) + 1),
                          np.arange(max(0, n_acc - 64), n_acc + 1)])
    for pc in pcs:
        t = bias + (2 * int(pc) - n_acc)
        real = gamma * (t - mu) / sigma + beta
        if abs(real) < 1e-7 * max(1.0, abs(lam) * n_acc):
            continue  # knife-edge: float rounding of tau may pick either side
        want = real >= 0
        got = (pc >= tau_pc[0]) if lam_pos[0] else (pc <= tau_pc[0])
        assert got == want, (pc, tau_pc[0], lam_pos[0], real)


def test_degenerate_batchnorm_rejected():
    bn = BatchNormParams([0.0, 1.0], [0, 0], [0, 0], [1, 1], [0, 0])
    with pytest.raises(DegenerateBatchNorm):
        popcount_thresholds(bn, 9)


def test_sigma_must_be_positive():
    with pytest.raises(ShapeError):
        BatchNormParams([1.0], [0.0], [0.0], [0.0], [0.0])


@given(st.integers(-10**6, 10**6), st.integers(0, 12))
def test_round_half_up_matches_fraction(v, s):
    import math
    want = math.floor(Fraction(v, 2**s) + Fraction(1, 2))
    assert round_half_up_shift(v, s) == want


def test_round_half_up_examples():
    assert round_half_up_shift(5, 1) == 3      # 2.5 -> 3
    assert round_half_up_shift(-5, 1) == -2    # -2.5 -> -2
    assert round_half_up_shift(7, 2) == 2      # 1.75 -> 2
    assert round_half_up_shift(6, 2) == 2      # 1.5 -> 2
    assert round_half_up_shift(-6, 2) == -1    # -1.5 -> -1


def test_quantize_clamps_to_7_bits():
    thr = quantize_thresholds(np.array([10000, -10000, 5]),
                              np.array([True, False, True]), 2)
    assert thr.tau_q.tolist() == [63, -64, 1]
    assert thr.effective_tau().tolist() == [252, -256, 4]


def test_choose_shift_minimal():
    assert choose_shift(np.array([63, -64])) == 0
    assert choose_shift(np.array([64])) == 1
    # 127 at shift 1 rounds half-up to 64, still out of range
    assert round_half_up_shift(127, 1) == 64
    assert choose_shift(np.array([127])) == 2
    assert choose_shift(np.array([126])) == 1   # 63, in range
    assert choose_shift(np.array([1150])) == 5  # 36


def test_threshold_spec_validation():
    with pytest.raises(ShapeError):
        ThresholdSpec(np.array([70]), np.array([True]), 0)
    with pytest.raises(ShapeError):
        ThresholdSpec(np.array([1, 2]), np.array([True]), 0)


@pytest.mark.parametrize("spec", CASES)
def test_layer_golden_against_naive_threshold(spec):
    rng = np.random.default_rng(spec.nif * 31 + spec.nof)
    x, w = golden.random_layer_data(rng, spec)
    bn = golden.random_batchnorm(rng, spec.nof, spec.n_acc)
    thr = derive_thresholds(bn, spec)
    out = layer_golden(x, w, spec, thr).to_bits()
    pc = naive_popcounts(x, w, spec)
    eff = thr.effective_tau()
    for k in range(spec.nof):
        for i in range(spec.h_out):
            for j in range(spec.w_out):
                if thr.lambda_positive[k]:
                    want = pc[k, i, j] >= eff[k]
                else:
                    want = pc[k, i, j] <= eff[k]
                assert out[k, i, j] == int(want)


def test_real_reference_equals_golden_when_shift_exact():
    # lambda = 1, kappa = -tau makes tau_pc land exactly on tau_q << shift
    spec = LayerSpec(nif=16, nof=8, fs=3, h_out=3, w_out=3)
    rng = np.random.default_rng(5)
    x, w = golden.random_layer_data(rng, spec)
    shift = 2
    tau_q = rng.integers(-20, 20, spec.nof)
    tau = (tau_q << shift) * 2 - spec.n_acc  # popcount tau back to sum domain
    bn = BatchNormParams(np.ones(spec.nof), -tau.astype(float),
                         np.zeros(spec.nof), np.ones(spec.nof),
                         np.zeros(spec.nof))
    tau_pc, lam_pos = popcount_thresholds(bn, spec.n_acc)
    assert np.array_equal(tau_pc, tau_q << shift)
    thr = quantize_thresholds(tau_pc, lam_pos, shift)
    assert np.array_equal(thr.effective_tau(), tau_pc)
    a = layer_golden(x, w, spec, thr).to_bits()
    b = real_reference(x, w, spec, bn).to_bits()
    assert np.array_equal(a, b)


def test_or_maxpool_matches_pm1_max():
    rng = np.random.default_rng(9)
    t = BinaryTensor.from_bits(rng.integers(0, 2, (3, 4, 6), dtype=np.uint8))
    pooled = or_maxpool(t, 2).to_pm1()
    ref = t.to_pm1()
    for c in range(3):
        for i in range(2):
            for j in range(3):
                assert pooled[c, i, j] == ref[c, 2*i:2*i+2, 2*j:2*j+2].max()


def test_majority_avgpool_ties_go_positive():
    bits = np.zeros((1, 2, 2), dtype=np.uint8)
    bits[0, 0, 0] = 1
    bits[0, 1, 1] = 1  # two of four positive -> mean 0 -> +1
    t = BinaryTensor.from_bits(bits)
    assert majority_avgpool(t, 2).to_pm1()[0, 0, 0] == 1
    bits[0, 1, 1] = 0  # one of four -> -1
    assert majority_avgpool(BinaryTensor.from_bits(bits), 2).to_pm1()[0, 0, 0] == -1


def test_layer_spec_properties_and_validation():
    s = LayerSpec(nif=128, nof=128, fs=3, h_out=16, w_out=16)
    assert s.n_acc == 1152
    assert s.macs == 128 * 256 * 1152
    assert s.ops == 75_497_472
    assert (s.h_in, s.w_in) == (18, 18)
    g = LayerSpec(nif=12, nof=4, fs=1, h_out=1, w_out=1, d=3)
    assert g.groups == 4 and g.d_eff == 3 and g.n_acc == 3
    assert [g.band_start(k) for k in range(4)] == [0, 3, 6, 9]
    with pytest.raises(ShapeError):
        LayerSpec(nif=10, nof=4, fs=1, h_out=1, w_out=1, d=3)  # 3 !| 10
    with pytest.raises(ShapeError):
        LayerSpec(nif=12, nof=5, fs=1, h_out=1, w_out=1, d=3)  # 4 bands !| 5
