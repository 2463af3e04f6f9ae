"""Transaction-level tile models: VEC, STX, and VRP.

Tiles are traffic and timing engines, not instruction emulators: each owns a
private coherent L1 (the requester machine from `protocol`) and reproduces
its published architectural rates — outstanding-line parallelism and vector
op latency for VEC, DMA/compute overlap and peak FLOPS for STX, strided
access under a fixed FPU feed for VRP. All memory traffic flows through the
L1 controller, so the coherence oracle observes tile workloads unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .kernel import Component, Simulator
from .protocol import (
    CommitLog, L1CacheController, LINE_BYTES, line_address, ZERO_LINE,
)


# ---------------------------------------------------------------------------
# model parameter blocks
# ---------------------------------------------------------------------------

@dataclass
class VecTileModel:
    l1d_bytes: int = 32 * 1024
    l1i_bytes: int = 16 * 1024          # modeled as hit-always
    max_outstanding_lines: int = 32     # miss-parallelism unit depth
    max_vector_bytes: int = 2048        # 256 double-precision elements
    elems_dp: int = 256
    lanes: int = 8
    phys_regs: int = 40
    decode_overhead: int = 3


@dataclass
class StxTileModel:
    clusters: int = 4
    cores_per_cluster: int = 8
    tcdm_bytes: int = 128 * 1024
    flops_per_core_cycle: int = 2       # fused multiply-add
    double_buffering: bool = True
    spu_multiplier: float = 1.0

    def peak_flops_per_cycle(self) -> float:
        return (self.clusters * self.cores_per_cluster *
                self.flops_per_core_cycle * self.spu_multiplier)

    def peak_gflops(self, frequency_hz: float) -> float:
        return self.peak_flops_per_cycle() * frequency_hz / 1e9


@dataclass
class VrpTileModel:
    l1d_bytes: int = 32 * 1024
    l1i_bytes: int = 16 * 1024
    max_outstanding_misses: int = 128
    fpu_feed_bytes_per_cycle: int = 16
    prefetch_degree: int = 4
    prefetch_distance: int = 4


class PhaseKind(Enum):
    StreamTriad = "StreamTriad"
    BlockedDgemm = "BlockedDgemm"
    StencilSweep = "StencilSweep"
    StridedVectorAxpy = "StridedVectorAxpy"
    SramPattern = "SramPattern"
    AtomicHammer = "AtomicHammer"


@dataclass
class TrafficPhase:
    kind: PhaseKind
    footprint_bytes: int
    stride_bytes: int = LINE_BYTES
    iterations: int = 1
    arithmetic_intensity: float = 0.0   # flops per byte moved

    def validate(self) -> list[str]:
        errs = []
        if self.footprint_bytes % LINE_BYTES:
            errs.append(f"{self.kind.value}: footprint must be line-aligned")
        if self.footprint_bytes < 0 or self.iterations < 0:
            errs.append(f"{self.kind.value}: negative size")
        if self.stride_bytes <= 0:
            errs.append(f"{self.kind.value}: stride must be positive")
        return errs


# ---------------------------------------------------------------------------
# VEC timing
# ---------------------------------------------------------------------------

def vec_op_latency(active_elements: int, lanes: int = 8,
                   decode_overhead: int = 3, max_elements: int = 256) -> int:
    """Cycles for one vector arithmetic op: the lane array retires `lanes`
    elements per cycle after a small decode overhead."""
    if not 1 <= active_elements <= max_elements:
        raise ValueError(
            f"active_elements {active_elements} outside 1..{max_elements}")
    return -(-active_elements // lanes) + decode_overhead


def vector_load_lines(base: int, stride: int, vl_bytes: int,
                      elem_bytes: int = 8) -> list[int]:
    """Distinct cache lines touched by a strided vector load, in first-touch
    order: vl_bytes/elem_bytes elements at base + i*stride."""
    if stride <= 0 or elem_bytes <= 0:
        raise ValueError("stride and element size must be positive")
    lines: list[int] = []
    seen = set()
    for i in range(vl_bytes // elem_bytes):
        addr = base + i * stride
        for a in (addr, addr + elem_bytes - 1):
            ln = line_address(a)
            if ln not in seen:
                seen.add(ln)
                lines.append(ln)
    return lines


# ---------------------------------------------------------------------------
# STX analytic pipeline
# ---------------------------------------------------------------------------

@dataclass
class StxPhaseResult:
    cycles: int
    flops: int
    bytes_moved: int
    utilization: float


def stx_run_phase(model: StxTileModel, phase: TrafficPhase,
                  delivered_bandwidth: float) -> StxPhaseResult:
    """Closed-form DMA/compute pipeline for one phase.

    The footprint is processed in `iterations` tiles staged through TCDM.
    With double buffering a tile may use half the scratchpad and the three
    stages (DMA-in, compute, DMA-out) overlap across tiles, so the steady
    state costs max(stages) per tile plus fill and drain.
    """
    if phase.iterations == 0 or phase.footprint_bytes == 0:
        return StxPhaseResult(0, 0, 0, 0.0)
    buf = model.tcdm_bytes // (2 if model.double_buffering else 1)
    tile_bytes = -(-phase.footprint_bytes // phase.iterations)
    if tile_bytes > buf * model.clusters:
        raise ValueError(
            f"tile of {tile_bytes} bytes exceeds "
            f"{'half-' if model.double_buffering else ''}TCDM capacity "
            f"{buf * model.clusters}")
    write_fraction = {
        PhaseKind.StreamTriad: 1 / 3,
        PhaseKind.SramPattern: 1 / 2,
    }.get(phase.kind, 0.0)
    peak = model.peak_flops_per_cycle()
    in_bytes = tile_bytes * (1.0 - write_fraction)
    out_bytes = tile_bytes * write_fraction
    tile_flops = phase.arithmetic_intensity * tile_bytes
    dma_in = in_bytes / delivered_bandwidth
    dma_out = out_bytes / delivered_bandwidth
    compute = tile_flops / peak
    n = phase.iterations
    if model.double_buffering:
        # DMA-in and DMA-out share the delivered channel; compute overlaps
        steady = max(dma_in + dma_out, compute)
        cycles = dma_in + n * steady + compute + dma_out
    else:
        cycles = n * (dma_in + compute + dma_out)
    flops = int(tile_flops * n)
    bytes_moved = tile_bytes * n
    cycles_i = max(1, math.ceil(cycles))
    return StxPhaseResult(cycles=cycles_i, flops=flops,
                          bytes_moved=bytes_moved,
                          utilization=flops / (peak * cycles_i))


# ---------------------------------------------------------------------------
# tile traffic engines
# ---------------------------------------------------------------------------

class TileBase(Component):
    """A tile: one private-L1 requester plus a pluggable traffic driver."""

    def __init__(self, sim: Simulator, name: str, port, home_of,
                 l1_capacity: int = 32 * 1024, max_outstanding: int = 32,
                 commit_log: Optional[CommitLog] = None):
        super().__init__(sim, name)
        self.ctl = L1CacheController(
            sim, name, port, home_of, capacity=l1_capacity,
            max_outstanding=max_outstanding, commit_log=commit_log)
        self._drivers: list = []

    def add_driver(self, driver) -> None:
        self._drivers.append(driver)

    def step(self) -> None:
        for d in self._drivers:
            d.drive()
        self.ctl.step()

    def busy(self) -> bool:
        return self.ctl.busy() or any(d.active() for d in self._drivers)

    def idle(self) -> bool:
        return not self.busy()


class ProgramDriver:
    """Feeds a fixed list of AccessOps, keeping up to `window` unfinished
    submissions in the controller (issue order preserved per line)."""

    def __init__(self, tile: TileBase, window: int = 8):
        self.tile = tile
        self.window = window
        self.program: list = []
        self.submitted = 0
        self.completed = 0
        tile.add_driver(self)

    def extend(self, ops: list) -> None:
        self.program.extend(ops)

    def _done_one(self, cycle, value):
        self.completed += 1

    def drive(self) -> None:
        ctl = self.tile.ctl
        while self.submitted < len(self.program) and \
                self.submitted - self.completed < self.window:
            op = self.program[self.submitted]
            prev = op.on_complete
            if prev is None:
                op.on_complete = self._done_one
            else:
                def chain(cycle, value, _prev=prev):
                    _prev(cycle, value)
                    self._done_one(cycle, value)
                op.on_complete = chain
            ctl.submit(op)
            self.submitted += 1

    def active(self) -> bool:
        return self.completed < len(self.program)


class StreamDriver:
    """Software-pipelined stream kernel: non-temporal input streams plus an
    owned output stream (read-for-ownership, then dirty write-back on
    eviction), issued line by line up to the tile's outstanding budget."""

    def __init__(self, tile: TileBase, read_bases: list[int],
                 write_base: Optional[int], stream_bytes: int,
                 value_of: Optional[Callable[[int], bytes]] = None,
                 use_nt: bool = True):
        self.tile = tile
        self.reads = read_bases
        self.write_base = write_base
        self.lines = stream_bytes // LINE_BYTES
        self.value_of = value_of or (lambda line: ZERO_LINE)
        self.use_nt = use_nt
        self.cursor = 0
        self.issued = 0
        self.completed = 0
        self._ops_per_line = len(read_bases) + (1 if write_base is not None else 0)
        tile.add_driver(self)

    def _done(self, cycle, value):
        self.completed += 1

    def drive(self) -> None:
        ctl = self.tile.ctl
        budget = ctl.max_outstanding - 2
        while self.cursor < self.lines and \
                (self.issued - self.completed) < budget and \
                len(ctl.issue_q) < budget:
            off = self.cursor * LINE_BYTES
            for base in self.reads:
                if self.use_nt:
                    ctl.nt_load(base + off, on_complete=self._done)
                else:
                    ctl.load(base + off, on_complete=self._done)
                self.issued += 1
            if self.write_base is not None:
                line = self.write_base + off
                ctl.store_line(line, self.value_of(line), on_complete=self._done)
                self.issued += 1
            self.cursor += 1

    def active(self) -> bool:
        return self.completed < self.lines * self._ops_per_line


class VecTile(TileBase):
    """Vector tile: wide unit-stride/strided loads decomposed into line
    requests with deep miss parallelism, plus lane-array op timing."""

    def __init__(self, sim, name, port, home_of, model: VecTileModel = None,
                 commit_log=None):
        self.model = model or VecTileModel()
        super().__init__(sim, name, port, home_of,
                         l1_capacity=self.model.l1d_bytes,
                         max_outstanding=self.model.max_outstanding_lines,
                         commit_log=commit_log)
        self._vl_pending: dict[int, dict] = {}
        self._vl_seq = 0

    def op_latency(self, active_elements: int) -> int:
        return vec_op_latency(active_elements, self.model.lanes,
                              self.model.decode_overhead, self.model.elems_dp)

    def issue_vector_load(self, base: int, stride: int, vl_bytes: int,
                          elem_bytes: int = 8, nt: bool = False,
                          on_complete=None) -> int:
        """Issue the line requests for one vector load; returns how many."""
        if vl_bytes > self.model.max_vector_bytes:
            raise ValueError(f"vl {vl_bytes} exceeds "
                             f"{self.model.max_vector_bytes}-byte vectors")
        lines = vector_load_lines(base, stride, vl_bytes, elem_bytes)
        self._vl_seq += 1
        handle = self._vl_seq
        state = {"remaining": len(lines), "on_complete": on_complete}
        self._vl_pending[handle] = state

        def line_done(cycle, value, h=handle):
            st = self._vl_pending[h]
            st["remaining"] -= 1
            if st["remaining"] == 0:
                del self._vl_pending[h]
                if st["on_complete"]:
                    st["on_complete"](cycle)

        for line in lines:
            if nt:
                self.ctl.nt_load(line, on_complete=line_done)
            else:
                self.ctl.load(line, on_complete=line_done)
        return len(lines)

    def busy(self) -> bool:
        return super().busy() or bool(self._vl_pending)


class StxTile(TileBase):
    """Stencil/tensor tile: scratchpad-managed DMA traffic. Compute timing
    uses the closed-form pipeline (stx_run_phase); on-fabric traffic moves
    line-granular DMA bursts through the coherent requester."""

    def __init__(self, sim, name, port, home_of, model: StxTileModel = None,
                 commit_log=None):
        self.model = model or StxTileModel()
        super().__init__(sim, name, port, home_of,
                         l1_capacity=4096,  # DMA staging lines, not a cache
                         max_outstanding=self.model.clusters * 8,
                         commit_log=commit_log)

    def run_phase(self, phase: TrafficPhase,
                  delivered_bandwidth: float) -> StxPhaseResult:
        return stx_run_phase(self.model, phase, delivered_bandwidth)

    def dma_burst(self, base: int, nbytes: int, write: bool = False,
                  value_of=None, on_complete=None) -> None:
        """Line-granular DMA: reads are non-temporal, writes take ownership."""
        if not hasattr(self, "_dma"):
            self._dma = ProgramDriver(self, window=self.model.clusters * 4)
        from .protocol import AccessOp, OpKind
        ops = []
        for off in range(0, nbytes, LINE_BYTES):
            line = base + off
            if write:
                payload = value_of(line) if value_of else ZERO_LINE
                ops.append(AccessOp(OpKind.STORE_LINE, line, payload=payload))
            else:
                ops.append(AccessOp(OpKind.NT_LOAD, line))
        if ops and on_complete is not None:
            ops[-1].on_complete = on_complete
        self._dma.extend(ops)


class VrpTile(TileBase):
    """Variable-precision tile: strided element loads with a configurable
    strided prefetcher, consumed by the FPU at a fixed feed-rate cap."""

    def __init__(self, sim, name, port, home_of, model: VrpTileModel = None,
                 commit_log=None):
        self.model = model or VrpTileModel()
        super().__init__(sim, name, port, home_of,
                         l1_capacity=self.model.l1d_bytes,
                         max_outstanding=self.model.max_outstanding_misses,
                         commit_log=commit_log)
        self._stream = None
        self._feed_credit = 0.0
        self.consumed_bytes = 0
        self.consume_cycles = 0

    def start_solver_phase(self, base: int, elements: int, element_bytes: int,
                           stride: Optional[int] = None) -> None:
        if element_bytes not in (16, 32, 64):
            raise ValueError("element_bytes must be 16, 32, or 64")
        stride = stride if stride is not None else element_bytes
        self._stream = {
            "base": base, "elements": elements, "eb": element_bytes,
            "stride": stride,
            "next_issue": 0,       # next element whose lines get requested
            "next_consume": 0,     # next element the FPU will take, in order
            "remaining": {},       # element index -> lines still in flight
        }
        self.consumed_bytes = 0
        self.consume_cycles = 0

    def _element_lines(self, idx: int) -> list[int]:
        s = self._stream
        addr = s["base"] + idx * s["stride"]
        first = line_address(addr)
        last = line_address(addr + s["eb"] - 1)
        return [first] if first == last else \
            list(range(first, last + LINE_BYTES, LINE_BYTES))

    def _issue_element(self, idx: int) -> None:
        s = self._stream
        lines = self._element_lines(idx)
        s["remaining"][idx] = len(lines)

        def line_done(cycle, value, i=idx):
            st = self._stream
            if st is not None and i in st["remaining"]:
                st["remaining"][i] -= 1

        for line in lines:
            self.ctl.load(line, on_complete=line_done)

    def step(self) -> None:
        if self._stream is not None:
            self._pump_stream()
        super().step()
        if self._stream is not None:
            self._consume()

    def _pump_stream(self) -> None:
        s = self._stream
        m = self.model
        window = 4 + m.prefetch_degree * m.prefetch_distance
        limit = min(s["elements"], s["next_consume"] + window)
        while s["next_issue"] < limit and \
                self.ctl.in_flight + len(self.ctl.issue_q) < \
                m.max_outstanding_misses - 4:
            self._issue_element(s["next_issue"])
            s["next_issue"] += 1

    def _consume(self) -> None:
        s = self._stream
        if s["next_consume"] >= s["elements"]:
            self._stream = None
            return
        self.consume_cycles += 1
        new_credit = min(self._feed_credit + self.model.fpu_feed_bytes_per_cycle,
                         4.0 * self.model.fpu_feed_bytes_per_cycle)
        if new_credit != self._feed_credit:
            self._feed_credit = new_credit
            self.sim.progress()  # credit accrual is real state while draining
        while s["next_consume"] < s["elements"] and \
                self._feed_credit >= s["eb"] and \
                s["remaining"].get(s["next_consume"], 1) == 0:
            self._feed_credit -= s["eb"]
            self.consumed_bytes += s["eb"]
            del s["remaining"][s["next_consume"]]
            s["next_consume"] += 1
            self.sim.progress()

    def busy(self) -> bool:
        return super().busy() or self._stream is not None

    @property
    def delivered_bandwidth(self) -> float:
        return self.consumed_bytes / self.consume_cycles \
            if self.consume_cycles else 0.0
