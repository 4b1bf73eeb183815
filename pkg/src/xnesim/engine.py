"""The convolution engine.

Per job the engine walks the offsets produced by the microcode and runs
a three-phase pipeline per output tile:

  FeatureLoad   fetch one TP-bit feature vector (reused for all lanes)
  Accumulate    one lane per cycle: xnor the feature vector with that
                lane's TP-bit weight vector, AND with the lane's
                connectivity mask, popcount into a 16-bit saturating
                accumulator
  Threshold     fetch TP threshold bytes, compare (inclusive), emit one
                output bit per valid lane

A threshold byte holds the 7-bit two's-complement quantized threshold
in bits 6..0 and the comparison direction in bit 7 (set = negative
batch-norm scale, compare acc <= tau). The job's shift scales tau back
to the popcount domain.

Two job register sets are double buffered; offloading a third while
both are pending is an error. Cycle counts use fixed per-phase
constants (stream setup, inter-phase gap, job overhead) calibrated so
a TP=128, 128x128x3x3 layer sustains ~218 ops/cycle; the weight FIFO
is deep enough (4 blocks) that weight streaming never stalls the lane
pipeline at these constants.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .bits import popcount_words
from .errors import BusyError, PlanError, ShapeError
from .golden import ThresholdSpec
from .memory import Memory
from .microcode import (JobGeometry, MicrocodeProgram, UcodeState,
                        reference_program, ucode_registers)

ACC_MAX = 0xFFFF
VALID_TPS = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class EngineConfig:
    tp: int = 128
    stream_setup: int = 2     # cycles to arm a streamer channel
    phase_gap: int = 8        # drain/settle cycles between phases
    job_overhead: int = 16    # offload + register copy per job
    weight_fifo_depth: int = 4
    stream_fifo_depth: int = 2
    saturate: bool = True

    def __post_init__(self):
        if self.tp not in VALID_TPS:
            raise ShapeError(f"tp must be one of {VALID_TPS}")

    @property
    def ports(self) -> int:
        return self.tp // 32


class Fifo:
    """Bounded FIFO; push on full or pop on empty is a modelling bug."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ShapeError("fifo depth must be >= 1")
        self.depth = depth
        self._q: deque = deque()

    def __len__(self):
        return len(self._q)

    @property
    def full(self) -> bool:
        return len(self._q) >= self.depth

    @property
    def empty(self) -> bool:
        return not self._q

    def push(self, item) -> None:
        if self.full:
            raise BusyError("fifo overflow")
        self._q.append(item)

    def pop(self):
        if self.empty:
            raise BusyError("fifo underflow")
        return self._q.popleft()


def encode_threshold_byte(tau_q: int, lambda_positive: bool) -> int:
    if not -64 <= tau_q <= 63:
        raise ShapeError(f"tau_q {tau_q} outside 7 signed bits")
    return (tau_q & 0x7F) | (0 if lambda_positive else 0x80)


def decode_threshold_byte(b: int) -> tuple[int, bool]:
    t = b & 0x7F
    if t >= 64:
        t -= 128
    return t, (b & 0x80) == 0


def encode_thresholds(thr: ThresholdSpec) -> np.ndarray:
    """One byte per output channel, in channel order."""
    return np.array([encode_threshold_byte(int(t), bool(p))
                     for t, p in zip(thr.tau_q, thr.lambda_positive)],
                    dtype=np.uint8)


@dataclass
class JobDescriptor:
    """Everything one offload carries: the walk geometry, the four base
    byte addresses, the threshold shift, per-(tile, input tile, lane)
    connectivity masks and the number of valid lanes per output tile."""

    geom: JobGeometry
    w_base: int
    x_base: int
    y_base: int
    thr_base: int
    shift: int
    masks: np.ndarray       # (kout_tiles, kin_tiles, tp, tp//32) uint32
    valid_out: np.ndarray   # (kout_tiles,) int

    def __post_init__(self):
        g = self.geom
        wpv = g.tp // 32
        shape = (g.kout_tiles, g.kin_tiles, g.tp, wpv)
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint32)
        if self.masks.shape != shape:
            raise ShapeError(f"masks shape {self.masks.shape} != {shape}")
        self.valid_out = np.asarray(self.valid_out, dtype=np.int64)
        if self.valid_out.shape != (g.kout_tiles,):
            raise ShapeError("need one valid-lane count per output tile")
        if np.any(self.valid_out < 1) or np.any(self.valid_out > g.tp):
            raise ShapeError("valid lanes per tile must be in [1, tp]")
        for name in ("w_base", "x_base", "y_base"):
            if getattr(self, name) % 4:
                raise ShapeError(f"{name} must be word aligned")
        if not 0 <= self.shift <= 15:
            raise ShapeError("shift outside [0, 15]")


@dataclass
class PhaseSchedule:
    """Closed-form cycle budget of one job."""

    feature_load: int
    accumulate: int
    threshold: int
    gaps: int
    overhead: int

    @property
    def total(self) -> int:
        return (self.feature_load + self.accumulate + self.threshold
                + self.gaps + self.overhead)


def phase_schedule(geom: JobGeometry, valid_out, cfg: EngineConfig
                   ) -> PhaseSchedule:
    """Cycle budget: per block (stream_setup+1) load + 2 gaps + one
    accumulate cycle per valid lane; per tile a threshold phase of
    stream_setup + 8 + 1 + 1 plus 2 gaps; one overhead per job."""
    valid_out = np.asarray(valid_out)
    pixels = geom.h_out * geom.w_out
    blocks_per_tile = geom.fs * geom.fs * geom.kin_tiles
    n_tiles = pixels * geom.kout_tiles
    n_blocks = n_tiles * blocks_per_tile
    thr_fetch = (geom.tp * 8 + 32 * cfg.ports - 1) // (32 * cfg.ports)
    accumulate = int(pixels * blocks_per_tile * valid_out.sum())
    return PhaseSchedule(
        feature_load=n_blocks * (cfg.stream_setup + 1),
        accumulate=accumulate,
        threshold=n_tiles * (cfg.stream_setup + thr_fetch + 1 + 1),
        gaps=(2 * n_blocks + 2 * n_tiles) * cfg.phase_gap,
        overhead=cfg.job_overhead)


@dataclass
class JobResult:
    cycles: int
    ops: int
    outputs_written: int
    schedule: PhaseSchedule
    accumulate_cycles: int

    @property
    def ops_per_cycle(self) -> float:
        return self.ops / self.cycles if self.cycles else 0.0


class Engine:
    """Functional block-level model with exact phase accounting."""

    def __init__(self, cfg: EngineConfig, mem: Memory,
                 program: MicrocodeProgram | None = None):
        self.cfg = cfg
        self.mem = mem
        self.program = program or reference_program()
        self._pending: deque[JobDescriptor] = deque()
        self.on_job_end: list = []   # callbacks (job, result)
        self.results: list[JobResult] = []

    @property
    def busy(self) -> bool:
        return len(self._pending) >= 2

    def submit(self, job: JobDescriptor) -> None:
        """Offload into one of the two job register sets."""
        if self.busy:
            raise BusyError("both job register sets are occupied")
        if job.geom.tp != self.cfg.tp:
            raise PlanError(f"job wants tp={job.geom.tp}, "
                            f"engine is tp={self.cfg.tp}")
        self._pending.append(job)

    def run_next(self) -> JobResult | None:
        if not self._pending:
            return None
        job = self._pending.popleft()
        res = self._execute(job)
        self.results.append(res)
        for cb in self.on_job_end:
            cb(job, res)
        return res

    def run_all(self) -> list[JobResult]:
        out = []
        while (r := self.run_next()) is not None:
            out.append(r)
        return out

    def _execute(self, job: JobDescriptor) -> JobResult:
        cfg = self.cfg
        g = job.geom
        tp = g.tp
        wpv = tp // 32
        state = UcodeState(self.program, ucode_registers(g))
        n_inner = g.fs * g.fs * g.kin_tiles

        mask_bits = np.array(
            [[popcount_words(job.masks[ko, ki])
              for ki in range(g.kin_tiles)] for ko in range(g.kout_tiles)],
            dtype=np.int64)

        acc = np.zeros(tp, dtype=np.int64)
        ops = 0
        outputs = 0
        acc_cycles = 0
        step = 0
        ko = 0
        tile_y_off = 0
        while (off := state.step()) is not None:
            w_off, x_off, y_off = off
            s = step % n_inner
            if s == 0:
                ko = (step // n_inner) % g.kout_tiles
                tile_y_off = y_off
                acc[:] = 0
            ki = s % g.kin_tiles

            w_words = self.mem.read_words(job.w_base + w_off // 8, tp * wpv)
            w_block = w_words.reshape(tp, wpv)
            x_vec = self.mem.read_words(job.x_base + x_off // 8, wpv)
            agree = (~(w_block ^ x_vec[None, :])) & job.masks[ko, ki]
            acc += np.bitwise_count(agree).sum(axis=1, dtype=np.int64)
            if cfg.saturate:
                np.minimum(acc, ACC_MAX, out=acc)
            ops += 2 * int(mask_bits[ko, ki])
            acc_cycles += int(job.valid_out[ko])

            if s == n_inner - 1:
                outputs += self._threshold_store(job, ko, acc, tile_y_off)
            step += 1

        sched = phase_schedule(g, job.valid_out, cfg)
        assert sched.accumulate == acc_cycles
        return JobResult(cycles=sched.total, ops=ops,
                         outputs_written=outputs, schedule=sched,
                         accumulate_cycles=acc_cycles)

    def _threshold_store(self, job: JobDescriptor, ko: int,
                         acc: np.ndarray, y_off: int) -> int:
        tp = job.geom.tp
        thr_bytes = self.mem.read(job.thr_base + ko * tp, tp)
        tau = (thr_bytes & 0x7F).astype(np.int64)
        tau[tau >= 64] -= 128
        lam_pos = (thr_bytes & 0x80) == 0
        eff = tau << job.shift
        bits = np.where(lam_pos, acc >= eff, acc <= eff).astype(np.uint8)
        v = int(job.valid_out[ko])
        bits[v:] = 0  # invalid remainder lanes emit zero
        payload = np.packbits(bits, bitorder="little")
        nbytes = (v + 7) // 8  # sink drops bytes past the valid lanes
        self.mem.write(job.y_base + y_off // 8, payload[:nbytes])
        return v


def run_single_job(cfg: EngineConfig, mem: Memory,
                   job: JobDescriptor) -> JobResult:
    eng = Engine(cfg, mem)
    eng.submit(job)
    return eng.run_next()
