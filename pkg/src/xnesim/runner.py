"""Mapping layers onto the engine and running whole networks.

plan_layer turns a layer into one or more engine jobs:

  * full connectivity: one job, input tiles walked per output tile;
  * banded connectivity whose bands fold linearly onto output tiles
    (band-per-lane groups, or any grouping where a whole number of
    lanes share a band and tp is a multiple of it): one job using the
    band_step walk plus per-lane masks;
  * other groupings: one dense job per band, offset into the shared
    input/output images (band and group sizes must be word-aligned).

The weight stream holds, per (output tile, tap, input tile), TP lanes
of TP bits each, lane vectors aligned with where the feature vector
carries that lane's band; remainder tiles are padded to full blocks in
storage. Thresholds are one byte per lane, TP bytes per output tile.

Network runs are analytic by default: per-layer cycle budgets from the
engine's phase schedule, energy from the operating point, and transfer
time overlapped with compute (parameters stream through a ring buffer
at block granularity, so staging capacity never serializes a layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bintensor import BinaryTensor, BinaryWeights
from .bits import lane_mask, words_for_bits
from .engine import (Engine, EngineConfig, JobDescriptor, PhaseSchedule,
                     encode_thresholds, phase_schedule)
from .errors import CapacityError, PlanError, ShapeError
from .golden import LayerSpec, ThresholdSpec
from .memory import (KIB, CoefficientSet, EnergyBreakdown, Memory,
                     account_energy, coefficients_from_env)
from .microcode import JobGeometry
from .networks import NetLayer, NetworkDescriptor

ONCHIP_SHARED_BYTES = (448 + 8) * KIB  # sram + scm, the activation budget

REGION_PARAM_CAPACITY_BITS = {
    "scm": 8 * KIB * 8,
    "sram": 448 * KIB * 8,
    "sram_marshal": 448 * KIB * 8,
    "hyperram": 8 * 1024 * KIB * 8,
}


@dataclass
class JobPlan:
    """One engine job of a layer: geometry, connectivity, and where it
    sits inside the layer's shared input/output images."""

    geom: JobGeometry
    valid_out: np.ndarray
    d_eff: int                # band width seen by one lane
    npg: int                  # lanes sharing a band within a tile
    ch_base: int              # first global output channel
    n_out: int
    x_bit_offset: int
    y_bit_offset: int

    @property
    def storage_bits(self) -> int:
        g = self.geom
        return g.kout_tiles * g.fs * g.fs * g.kin_tiles * g.tp * g.tp

    @property
    def fetch_bits(self) -> int:
        """Stream bits actually read per pass: valid lanes only."""
        g = self.geom
        return int(self.valid_out.sum()) * g.fs * g.fs * g.kin_tiles * g.tp

    def masks(self) -> np.ndarray:
        g = self.geom
        wpv = g.tp // 32
        base = np.zeros((g.kin_tiles, g.tp, wpv), dtype=np.uint32)
        for ki in range(g.kin_tiles):
            lo = ki * g.tp
            for q, a, b in _band_chunks(g.tp, self.d_eff, self.npg, lo):
                m = lane_mask(b - lo, wpv) & ~lane_mask(a - lo, wpv)
                base[ki, q * self.npg:(q + 1) * self.npg] = m
        out = np.broadcast_to(base, (g.kout_tiles,) + base.shape).copy()
        for ko in range(g.kout_tiles):
            out[ko, :, int(self.valid_out[ko]):, :] = 0
        return out


def _band_chunks(tp: int, d_eff: int, npg: int, lo: int):
    """Bands overlapping the vector window [lo, lo+tp).

    Lane L belongs to band q = L // npg, whose bits sit at
    [q * d_eff, q * d_eff + d_eff) along the walked span. Yields
    (q, a, b) for every band whose intersection [a, b) with the
    window is non-empty. Full connectivity is npg = tp: one band
    covering the whole input.
    """
    hi = lo + tp
    for q in range(tp // npg):
        a = max(q * d_eff, lo)
        b = min(q * d_eff + d_eff, hi)
        if b > a:
            yield q, a, b


@dataclass
class LayerPlan:
    spec: LayerSpec
    tp: int
    jobs: list[JobPlan]
    x_pixel_stride: int
    x_row_stride: int
    y_pixel_stride: int
    y_row_stride: int

    @property
    def storage_bits(self) -> int:
        return sum(j.storage_bits for j in self.jobs)

    @property
    def fetch_bits(self) -> int:
        return sum(j.fetch_bits for j in self.jobs)

    def schedules(self, cfg: EngineConfig) -> list[PhaseSchedule]:
        return [phase_schedule(j.geom, j.valid_out, cfg) for j in self.jobs]

    def cycles(self, cfg: EngineConfig) -> int:
        return sum(s.total for s in self.schedules(cfg))


def plan_layer(spec: LayerSpec, tp: int) -> LayerPlan:
    wpp_in = words_for_bits(spec.nif)
    wpp_out = words_for_bits(spec.nof)
    xp, xr = 32 * wpp_in, 32 * wpp_in * spec.w_in
    yp, yr = 32 * wpp_out, 32 * wpp_out * spec.w_out
    npg_layer = spec.nof // spec.groups

    def tiles(n: int) -> np.ndarray:
        k = (n + tp - 1) // tp
        return np.array([min(tp, n - i * tp) for i in range(k)])

    jobs = []
    if spec.groups == 1:
        vo = tiles(spec.nof)
        geom = JobGeometry(tp, spec.fs, spec.h_out, spec.w_out,
                           kin_tiles=(spec.nif + tp - 1) // tp,
                           kout_tiles=len(vo), band_step=0,
                           x_pixel_stride=xp, x_row_stride=xr,
                           y_pixel_stride=yp, y_row_stride=yr)
        jobs.append(JobPlan(geom, vo, d_eff=spec.nif, npg=tp,
                            ch_base=0, n_out=spec.nof,
                            x_bit_offset=0, y_bit_offset=0))
    elif tp % npg_layer == 0 and ((tp // npg_layer) * spec.d_eff) % 32 == 0:
        # bands fold linearly: one job, banded walk
        span = (tp // npg_layer) * spec.d_eff
        vo = tiles(spec.nof)
        geom = JobGeometry(tp, spec.fs, spec.h_out, spec.w_out,
                           kin_tiles=(span + tp - 1) // tp,
                           kout_tiles=len(vo), band_step=span,
                           x_pixel_stride=xp, x_row_stride=xr,
                           y_pixel_stride=yp, y_row_stride=yr)
        jobs.append(JobPlan(geom, vo, d_eff=spec.d_eff, npg=npg_layer,
                            ch_base=0, n_out=spec.nof,
                            x_bit_offset=0, y_bit_offset=0))
    else:
        # one dense job per band
        if spec.d_eff % 32 or npg_layer % 32:
            raise PlanError(
                f"band width {spec.d_eff} / band outputs {npg_layer} "
                f"must be word-aligned to split into per-band jobs")
        for g in range(spec.groups):
            vo = tiles(npg_layer)
            geom = JobGeometry(tp, spec.fs, spec.h_out, spec.w_out,
                               kin_tiles=(spec.d_eff + tp - 1) // tp,
                               kout_tiles=len(vo), band_step=0,
                               x_pixel_stride=xp, x_row_stride=xr,
                               y_pixel_stride=yp, y_row_stride=yr)
            jobs.append(JobPlan(geom, vo, d_eff=spec.d_eff, npg=tp,
                                ch_base=g * npg_layer, n_out=npg_layer,
                                x_bit_offset=g * spec.d_eff,
                                y_bit_offset=g * npg_layer))
    return LayerPlan(spec, tp, jobs, xp, xr, yp, yr)


def weight_stream_words(job: JobPlan, spec: LayerSpec,
                        w: BinaryWeights) -> np.ndarray:
    """Engine-ready stream: blocks of TP lane vectors in
    (k_out tile, fi, fj, k_in tile) order."""
    g = job.geom
    tp = g.tp
    wb = w.to_bits().transpose(0, 2, 3, 1)  # (nof, fs, fs, d_eff)
    bits = np.zeros((g.kout_tiles, g.fs, g.fs, g.kin_tiles, tp, tp),
                    dtype=np.uint8)
    for ko in range(g.kout_tiles):
        v = int(job.valid_out[ko])
        for ki in range(g.kin_tiles):
            lo = ki * tp
            for q, a, b in _band_chunks(tp, job.d_eff, job.npg, lo):
                l0, l1 = q * job.npg, min((q + 1) * job.npg, v)
                if l1 <= l0:
                    continue
                k0 = job.ch_base + ko * tp + l0
                src = slice(a - q * job.d_eff, b - q * job.d_eff)
                dst = slice(a - lo, b - lo)
                bits[ko, :, :, ki, l0:l1, dst] = \
                    wb[k0:k0 + (l1 - l0), :, :, src].transpose(1, 2, 0, 3)
    packed = np.packbits(bits.reshape(-1, tp), axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u4").astype(np.uint32).reshape(-1)


def threshold_stream_bytes(job: JobPlan, thr: ThresholdSpec) -> np.ndarray:
    g = job.geom
    enc = encode_thresholds(thr)
    out = np.zeros(g.kout_tiles * g.tp, dtype=np.uint8)
    for ko in range(g.kout_tiles):
        v = int(job.valid_out[ko])
        k0 = job.ch_base + ko * g.tp
        out[ko * g.tp:ko * g.tp + v] = enc[k0:k0 + v]
    return out


@dataclass
class LayerRun:
    output: BinaryTensor
    results: list
    plan: LayerPlan

    @property
    def cycles(self) -> int:
        return sum(r.cycles for r in self.results)

    @property
    def ops(self) -> int:
        return sum(r.ops for r in self.results)


def execute_layer(cfg: EngineConfig, spec: LayerSpec, x: BinaryTensor,
                  w: BinaryWeights, thr: ThresholdSpec,
                  mem: Memory | None = None) -> LayerRun:
    """Build memory images, run every job, decode the output tensor."""
    if x.c != spec.nif or x.h != spec.h_in or x.w != spec.w_in:
        raise ShapeError(f"input is {(x.c, x.h, x.w)}, layer needs "
                         f"{(spec.nif, spec.h_in, spec.w_in)}")
    if thr.nof != spec.nof:
        raise ShapeError("threshold channel count mismatch")
    plan = plan_layer(spec, cfg.tp)
    mem = mem or Memory()

    x_base = mem.base("l1")
    x_words = x.flat_words()
    mem.write_words(x_base, x_words)
    # masked tail reads may run past the image: worst case the whole
    # banded walk plus one vector beyond the final pixel
    slack = max(4 * cfg.tp,
                max((j.geom.kout_tiles * j.geom.band_step
                     + (j.geom.kin_tiles + 1) * cfg.tp) // 8
                    for j in plan.jobs))
    slack = (slack + 3) & ~3
    y_base = x_base + 4 * len(x_words) + slack
    y_words = spec.h_out * spec.w_out * words_for_bits(spec.nof)
    y_end = y_base + 4 * y_words + slack
    if y_end - mem.base("l1") > mem.regions["l1"].size:
        raise CapacityError("activations exceed the core-coupled memory")

    cursor = mem.base("sram")
    sram_end = cursor + mem.regions["sram"].size
    eng = Engine(cfg, mem)
    runs = []
    for job in plan.jobs:
        stream = weight_stream_words(job, spec, w)
        thr_bytes = threshold_stream_bytes(job, thr)
        if cursor + 4 * len(stream) + len(thr_bytes) > sram_end:
            raise CapacityError("weight stream exceeds the shared memory")
        mem.write_words(cursor, stream)
        w_base = cursor
        cursor += 4 * len(stream)
        mem.write(cursor, thr_bytes)
        thr_base = cursor
        cursor += (len(thr_bytes) + 3) & ~3
        desc = JobDescriptor(
            geom=job.geom, w_base=w_base,
            x_base=x_base + job.x_bit_offset // 8,
            y_base=y_base + job.y_bit_offset // 8,
            thr_base=thr_base, shift=thr.shift,
            masks=job.masks(), valid_out=job.valid_out)
        eng.submit(desc)
        runs.append(eng.run_next())

    out_words = mem.read_words(y_base, y_words).reshape(
        spec.h_out, spec.w_out, words_for_bits(spec.nof))
    return LayerRun(BinaryTensor(spec.nof, spec.h_out, spec.w_out, out_words),
                    runs, plan)


# ---------------------------------------------------------------------------
# Analytic network runs


@dataclass
class LayerRow:
    name: str
    ops: int
    param_bits: int
    cycles: int
    compute_s: float
    transfer_s: float
    bound: str
    energy: EnergyBreakdown

    @property
    def seconds(self) -> float:
        return max(self.compute_s, self.transfer_s)


@dataclass
class NetworkReport:
    network: str
    mode: str
    tp: int
    rows: list[LayerRow] = field(default_factory=list)

    @property
    def total_ops(self) -> int:
        return sum(r.ops for r in self.rows)

    @property
    def total_cycles(self) -> int:
        return sum(r.cycles for r in self.rows)

    @property
    def total_seconds(self) -> float:
        return sum(r.seconds for r in self.rows)

    @property
    def fps(self) -> float:
        return 1.0 / self.total_seconds if self.total_seconds else 0.0

    @property
    def energy(self) -> EnergyBreakdown:
        tot = EnergyBreakdown()
        for r in self.rows:
            tot = tot + r.energy
        return tot

    def to_text(self) -> str:
        h = (f"{'layer':<12}{'ops':>14}{'cycles':>12}{'op/cy':>8}"
             f"{'time[us]':>11}{'bound':>9}{'E[uJ]':>10}")
        lines = [f"network {self.network}  mode {self.mode}  tp {self.tp}",
                 h, "-" * len(h)]
        for r in self.rows:
            opc = r.ops / r.cycles if r.cycles else 0.0
            lines.append(
                f"{r.name:<12}{r.ops:>14}{r.cycles:>12}{opc:>8.1f}"
                f"{r.seconds * 1e6:>11.2f}{r.bound:>9}"
                f"{r.energy.total_j * 1e6:>10.4f}")
        e = self.energy
        lines.append("-" * len(h))
        lines.append(
            f"{'total':<12}{self.total_ops:>14}{self.total_cycles:>12}"
            f"{self.total_ops / max(self.total_cycles, 1):>8.1f}"
            f"{self.total_seconds * 1e6:>11.2f}{'':>9}"
            f"{e.total_j * 1e6:>10.4f}")
        lines.append(
            f"energy[uJ]: compute {e.compute_j * 1e6:.4f} "
            f"(engine {e.engine_j * 1e6:.4f} local {e.local_j * 1e6:.4f}) "
            f"marshal {e.marshal_j * 1e6:.4f} dma {e.dma_j * 1e6:.4f} "
            f"leakage {e.leakage_j * 1e6:.4f}")
        lines.append(f"throughput: {self.fps:.2f} inference/s "
                     f"({self.total_ops / max(self.total_seconds, 1e-12) / 1e9:.2f} Gop/s)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["layer,ops,param_bits,cycles,compute_s,transfer_s,bound,"
                 "compute_j,marshal_j,dma_j,leakage_j,total_j"]
        for r in self.rows:
            e = r.energy
            lines.append(
                f"{r.name},{r.ops},{r.param_bits},{r.cycles},"
                f"{r.compute_s:.9g},{r.transfer_s:.9g},{r.bound},"
                f"{e.compute_j:.9g},{e.marshal_j:.9g},{e.dma_j:.9g},"
                f"{e.leakage_j:.9g},{e.total_j:.9g}")
        return "\n".join(lines)


def check_fit(net: NetworkDescriptor, mode_region: str) -> None:
    cap = REGION_PARAM_CAPACITY_BITS[mode_region]
    bits = net.packed_param_bits
    if bits > cap:
        raise CapacityError(
            f"{net.name}: {bits / 8 / KIB:.1f} KiB of parameters exceed "
            f"the {cap / 8 / KIB:.0f} KiB of the {mode_region} placement")
    act = net.activation_peak_bytes()
    if act > ONCHIP_SHARED_BYTES:
        raise CapacityError(
            f"{net.name}: {act / KIB:.1f} KiB of live activations exceed "
            f"the {ONCHIP_SHARED_BYTES / KIB:.0f} KiB on chip")


def run_network(net: NetworkDescriptor, mode: str, tp: int = 128,
                coeffs: CoefficientSet | None = None,
                cfg: EngineConfig | None = None) -> NetworkReport:
    """Analytic pass: cycle budgets, transfer overlap, energy."""
    cs = coeffs or coefficients_from_env()
    m = cs.mode(mode)
    check_fit(net, m.weights_region)
    cfg = cfg or EngineConfig(tp=tp)
    if cfg.tp != tp:
        raise PlanError("tp disagrees with the engine config")
    f_hz = m.freq_mhz * 1e6
    rep = NetworkReport(net.name, mode, tp)
    for nl in net.layers:
        plan = plan_layer(nl.spec, tp)
        cycles = plan.cycles(cfg)
        compute_s = cycles / f_hz
        bits = nl.packed_param_bits
        marshal_bits = bits if m.weights_region == "sram_marshal" else 0
        hyper_bits = bits if m.weights_region == "hyperram" else 0
        if m.weights_region == "hyperram":
            transfer_s = bits / cs.hyperram_bits_per_s
        elif m.weights_region == "sram_marshal":
            transfer_s = bits / (cs.marshal_bits_per_cycle * f_hz)
        else:
            transfer_s = 0.0
        bound = "memory" if transfer_s > compute_s else "compute"
        sec = max(compute_s, transfer_s)
        energy = account_energy(nl.spec.ops, marshal_bits, hyper_bits,
                                sec, mode, cs)
        rep.rows.append(LayerRow(nl.name, nl.spec.ops, bits, cycles,
                                 compute_s, transfer_s, bound, energy))
    return rep


def verify_layers(n_layers: int, seed: int, tp: int = 128,
                  max_spatial: int = 8,
                  cfg: EngineConfig | None = None) -> list[dict]:
    """Random engine-vs-reference sweeps; returns a record per layer
    with a `mismatches` count (0 everywhere when the engine is right)."""
    from . import golden as G
    rng = np.random.default_rng(seed)
    cfg = cfg or EngineConfig(tp=tp)
    records = []
    for i in range(n_layers):
        spec = random_layer_spec(rng, max_spatial=max_spatial)
        x, w = G.random_layer_data(rng, spec)
        thr = random_threshold_spec(rng, spec)
        run = execute_layer(cfg, spec, x, w, thr)
        want = G.layer_golden(x, w, spec, thr)
        mism = int(np.sum(run.output.to_bits() != want.to_bits()))
        records.append({"layer": i, "spec": spec, "mismatches": mism,
                        "ops": run.ops})
    return records


def random_layer_spec(rng: np.random.Generator,
                      max_spatial: int = 8) -> LayerSpec:
    """Geometry mix the verifier sweeps: any channel counts, the three
    filter sizes, dense or banded with one band per output channel."""
    fs = int(rng.choice([1, 3, 5]))
    h = int(rng.integers(1, max_spatial + 1))
    w = int(rng.integers(1, max_spatial + 1))
    kind = int(rng.integers(0, 4))
    if kind == 0:  # banded, nif = d * nof
        d = int(rng.choice([1, 2, 4]))
        nof = int(rng.integers(1, 256 // d + 1))
        return LayerSpec(nif=d * nof, nof=nof, fs=fs, h_out=h, w_out=w, d=d)
    nif = int(rng.integers(1, 257))
    nof = int(rng.integers(1, 257))
    return LayerSpec(nif=nif, nof=nof, fs=fs, h_out=h, w_out=w)


def random_threshold_spec(rng: np.random.Generator,
                          spec: LayerSpec) -> ThresholdSpec:
    """Thresholds folded from random batch-norm parameters, so they
    mostly land inside the reachable popcount range."""
    from . import golden as G
    bn = G.random_batchnorm(rng, spec.nof, spec.n_acc)
    return G.derive_thresholds(bn, spec)
