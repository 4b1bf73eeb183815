"""End-to-end acceptance gate.

One test per shipped guarantee, each pinned at its stated tolerance:

 1. engine == reference over >= 500 randomized layers, zero mismatches
 2. the walk program assembles to exactly 28 bytes and round-trips
 3. interpreter offsets == closed-form nest on 200 random geometries
 4. calibration layer sustains 220 +/- 11 op/cycle at TP=128
 5. ResNet-18/34 descriptors report 3.64e9 / 7.34e9 ops within 2%
 6. default coefficients reproduce 1.45 / 2.17 mJ per frame within 15%
    and the memory:compute ratios within 30%
 7. threshold truncation errors stay inside [tau_pc +/- 2^(s-1)];
    an exactly representable tau gives zero disagreements
 8. accumulators clamp at 65535; layers with n_acc <= 65535 are
    unaffected by the clamp
 9. realigner output is byte-exact for offsets 0..3 x 200 lengths
10. per-frame energy keeps the operating-point ordering
    scm < marshal < sram-direct < hyperram wherever the network fits
"""

import time

import numpy as np
import pytest

from xnesim.bintensor import BinaryTensor, BinaryWeights
from xnesim.engine import ACC_MAX, EngineConfig, JobDescriptor, run_single_job
from xnesim.errors import CapacityError
from xnesim.golden import (BatchNormParams, LayerSpec, ThresholdSpec,
                           conv_popcounts, popcount_thresholds,
                           random_batchnorm, random_layer_data,
                           real_reference, round_half_up_shift)
from xnesim.memory import Memory, realign
from xnesim.microcode import (BITSTREAM_LEN, JobGeometry, disassemble,
                              offset_sequence, reference_program,
                              reference_range_regs)
from xnesim.networks import get_network
from xnesim.runner import (execute_layer, plan_layer, run_network,
                           threshold_stream_bytes, verify_layers,
                           weight_stream_words)

CFG = EngineConfig(tp=128)


# 1 -----------------------------------------------------------------------

def test_engine_equals_golden_500_random_layers():
    t0 = time.perf_counter()
    records = verify_layers(500, seed=20260815, tp=128, max_spatial=8)
    elapsed = time.perf_counter() - t0
    assert len(records) == 500
    bad = [r for r in records if r["mismatches"]]
    assert bad == []
    assert elapsed < 120.0


# 2 -----------------------------------------------------------------------

def test_walk_program_occupies_28_bytes_and_roundtrips():
    prog = reference_program()
    blob = prog.assemble()
    assert len(blob) == BITSTREAM_LEN == 28
    assert len(prog.instructions) <= 22 and len(prog.loops) == 6
    back = disassemble(blob, reference_range_regs())
    assert back.assemble() == blob
    assert [i.encode() for i in back.instructions] == \
        [i.encode() for i in prog.instructions]
    assert [(l.base, l.count, l.range_reg) for l in back.loops] == \
        [(l.base, l.count, l.range_reg) for l in prog.loops]


# 3 -----------------------------------------------------------------------

def _closed_form_offsets(g: JobGeometry):
    M = 1 << 32
    out = []
    for i in range(g.h_out):
        for j in range(g.w_out):
            for ko in range(g.kout_tiles):
                for ui in range(g.fs):
                    for uj in range(g.fs):
                        for ki in range(g.kin_tiles):
                            w = (((ko * g.fs + ui) * g.fs + uj)
                                 * g.kin_tiles + ki) * g.tp * g.tp
                            x = ((i + ui) * g.x_row_stride
                                 + (j + uj) * g.x_pixel_stride
                                 + ko * g.band_step + ki * g.tp)
                            y = (i * g.y_row_stride + j * g.y_pixel_stride
                                 + ko * g.tp)
                            out.append((w % M, x % M, y % M))
    return out


def test_interpreter_matches_closed_form_200_geometries():
    rng = np.random.default_rng(99)
    prog = reference_program()
    for _ in range(200):
        g = JobGeometry(
            tp=int(rng.choice([32, 64, 128])),
            fs=int(rng.choice([1, 3, 5])),
            h_out=int(rng.integers(1, 5)),
            w_out=int(rng.integers(1, 5)),
            kin_tiles=int(rng.integers(1, 4)),
            kout_tiles=int(rng.integers(1, 4)),
            band_step=32 * int(rng.integers(0, 1 << 20)),
            x_pixel_stride=32 * int(rng.integers(1, 1 << 20)),
            x_row_stride=32 * int(rng.integers(1, 1 << 20)),
            y_pixel_stride=32 * int(rng.integers(1, 1 << 20)),
            y_row_stride=32 * int(rng.integers(1, 1 << 20)))
        assert offset_sequence(prog, g) == _closed_form_offsets(g)


# 4 -----------------------------------------------------------------------

def test_throughput_calibration_220_op_per_cycle():
    spec = LayerSpec(nif=128, nof=128, fs=3, h_out=16, w_out=16)
    rng = np.random.default_rng(1)
    x, w = random_layer_data(rng, spec)
    from xnesim.runner import random_threshold_spec
    thr = random_threshold_spec(rng, spec)
    run = execute_layer(CFG, spec, x, w, thr)
    opc = run.ops / run.cycles
    assert 220 - 11 <= opc <= 220 + 11
    assert run.cycles == run.plan.cycles(CFG)   # simulated == scheduled


# 5 -----------------------------------------------------------------------

@pytest.mark.parametrize("name,target", [("resnet18", 3.64e9),
                                         ("resnet34", 7.34e9)])
def test_network_op_counts(name, target):
    net = get_network(name)
    assert abs(net.total_ops / target - 1.0) <= 0.02


# 6 -----------------------------------------------------------------------

def test_resnet_energy_reproduction():
    r18 = run_network(get_network("resnet18"), "hyperram")
    e18 = r18.energy
    assert e18.total_j == pytest.approx(1.45e-3, rel=0.15)
    ratio18 = e18.memory_j / e18.compute_j
    assert 2.5 * 0.7 <= ratio18 <= 2.5 * 1.3

    r34 = run_network(get_network("resnet34"), "hyperram")
    e34 = r34.energy
    assert e34.total_j == pytest.approx(2.17e-3, rel=0.15)
    ratio34 = e34.memory_j / e34.compute_j
    assert 1.6 * 0.7 <= ratio34 <= 1.6 * 1.3


# 7 -----------------------------------------------------------------------

def _engine_bits(spec, x, w, thr):
    return execute_layer(CFG, spec, x, w, thr).output.to_bits()


def test_truncation_disagreements_stay_in_window():
    spec = LayerSpec(nif=17, nof=16, fs=3, h_out=4, w_out=4)
    rng = np.random.default_rng(7)
    x, w = random_layer_data(rng, spec)
    pc = conv_popcounts(x, w, spec)
    checked = disagreements = 0
    for draw in range(4):
        bn = random_batchnorm(rng, spec.nof, spec.n_acc)
        tau_pc, lam_pos = popcount_thresholds(bn, spec.n_acc)
        exact_bits = real_reference(x, w, spec, bn).to_bits()
        for s in range(1, 7):
            tq = np.array([round_half_up_shift(int(t), s) for t in tau_pc])
            live = (tq >= -64) & (tq <= 63)   # clamping is a separate story
            if not live.any():
                continue
            thr = ThresholdSpec(np.clip(tq, -64, 63).astype(np.int32),
                                lam_pos, s)
            got = _engine_bits(spec, x, w, thr)
            diff = got != exact_bits
            checked += int(live.sum())
            for k in np.nonzero(live)[0]:
                where = diff[k]
                if where.any():
                    disagreements += int(where.sum())
                    err = np.abs(pc[k][where] - tau_pc[k])
                    assert err.max() <= 1 << (s - 1), (draw, s, k)
    assert checked > 0
    assert disagreements > 0    # the sweep actually exercises the window


def test_exact_tau_has_zero_disagreements():
    spec = LayerSpec(nif=17, nof=16, fs=3, h_out=4, w_out=4)
    rng = np.random.default_rng(8)
    x, w = random_layer_data(rng, spec)
    for s in (0, 2, 4):
        tq = rng.integers(0, 40, spec.nof)    # reachable popcount window
        tau_pc = tq << s
        # lam = 1, kappa = n_acc - 2*tau_pc gives exactly these tau_pc
        bn = BatchNormParams(gamma=np.ones(spec.nof),
                             beta=(spec.n_acc - 2 * tau_pc).astype(float),
                             mu=np.zeros(spec.nof),
                             sigma=np.ones(spec.nof),
                             bias=np.zeros(spec.nof))
        chk, lam_pos = popcount_thresholds(bn, spec.n_acc)
        assert np.array_equal(chk, tau_pc) and lam_pos.all()
        thr = ThresholdSpec(tq.astype(np.int32), lam_pos, s)
        got = _engine_bits(spec, x, w, thr)
        want = real_reference(x, w, spec, bn).to_bits()
        assert np.array_equal(got, want)


# 8 -----------------------------------------------------------------------

def test_accumulator_saturates_at_65535():
    spec = LayerSpec(nif=65550, nof=8, fs=1, h_out=1, w_out=1)
    assert spec.n_acc > ACC_MAX
    xt = BinaryTensor.from_bits(np.ones((spec.nif, 1, 1), dtype=np.uint8))
    wt = BinaryWeights.from_bits(
        np.ones((spec.nof, spec.nif, 1, 1), dtype=np.uint8))
    thr = ThresholdSpec(np.full(8, 32), np.ones(8, dtype=bool), 11)  # 65536

    def run(sat):
        mem = Memory()
        job = plan_layer(spec, 128).jobs[0]
        mem.write_words(mem.base("l1"), xt.flat_words())
        stream = weight_stream_words(job, spec, wt)
        mem.write_words(mem.base("hyperram"), stream)
        tb = mem.base("hyperram") + 4 * len(stream)
        mem.write(tb, threshold_stream_bytes(job, thr))
        desc = JobDescriptor(geom=job.geom, w_base=mem.base("hyperram"),
                             x_base=mem.base("l1"),
                             y_base=mem.base("l1") + 0x8000, thr_base=tb,
                             shift=thr.shift, masks=job.masks(),
                             valid_out=job.valid_out)
        run_single_job(EngineConfig(tp=128, saturate=sat), mem, desc)
        return int(mem.read(mem.base("l1") + 0x8000, 1)[0])

    assert run(False) == 0xFF   # true count 65550 >= 65536
    assert run(True) == 0x00    # clamped count 65535 < 65536: defined, low


def test_small_layers_unaffected_by_saturation():
    rng = np.random.default_rng(12)
    from xnesim.runner import random_threshold_spec
    for _ in range(5):
        spec = LayerSpec(nif=int(rng.integers(1, 257)),
                         nof=int(rng.integers(1, 257)),
                         fs=int(rng.choice([1, 3, 5])),
                         h_out=int(rng.integers(1, 5)),
                         w_out=int(rng.integers(1, 5)))
        assert spec.n_acc <= ACC_MAX
        x, w = random_layer_data(rng, spec)
        thr = random_threshold_spec(rng, spec)
        a = execute_layer(EngineConfig(tp=128, saturate=True),
                          spec, x, w, thr)
        b = execute_layer(EngineConfig(tp=128, saturate=False),
                          spec, x, w, thr)
        assert np.array_equal(a.output.to_bits(), b.output.to_bits())


# 9 -----------------------------------------------------------------------

def test_realigner_byte_exact_all_offsets_200_lengths():
    rng = np.random.default_rng(31)
    for offset in range(4):
        for _ in range(200):
            nbytes = int(rng.integers(1, 257))
            span = offset + nbytes
            n_words = (span + 3) // 4
            words = rng.integers(0, 1 << 32, n_words, dtype=np.uint64)
            words = words.astype(np.uint32)
            flat = words.tobytes()
            want = flat[offset:offset + nbytes]
            want = want + b"\x00" * (-len(want) % 4)
            got = realign(words, offset, nbytes).tobytes()
            assert got == want, (offset, nbytes)


# 10 ----------------------------------------------------------------------

def test_energy_pareto_ordering_full_chain():
    net = get_network("mvgg-f")     # 6.5 KiB of parameters: fits everywhere
    e = {m: run_network(net, m).energy.total_j
         for m in ("scm-0v4", "marshal-0v6", "sram-0v6", "hyperram")}
    assert e["scm-0v4"] < e["marshal-0v6"] < e["sram-0v6"] < e["hyperram"]


def test_energy_pareto_ordering_where_fits():
    for name in ("mvgg-2", "mvgg-8"):
        net = get_network(name)
        with pytest.raises(CapacityError):
            run_network(net, "scm-0v4")     # does not fit the 8 KiB scm
        e = {m: run_network(net, m).energy.total_j
             for m in ("marshal-0v6", "sram-0v6", "hyperram")}
        assert e["marshal-0v6"] < e["sram-0v6"] < e["hyperram"]
