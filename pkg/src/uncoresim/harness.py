"""Scenario library, run reports, and the randomized coherence campaign.

Every scenario self-validates: it runs a workload on a configured system,
evaluates explicit bounds, and returns a report whose canonical JSON form
is byte-identical for identical (config digest, seed). Wall-clock time is
reported on the side, never inside the canonical byte stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .c2c import C2CLink, LinkConfig
from .config import ConfigError, SimConfig
from .kernel import Simulator
from .noc import NodeId
from .protocol import (
    AccessOp, AtomicKind, LINE_BYTES, OpKind, ZERO_LINE, export_commit_log,
    oracle_check, read_word, write_word,
)
from .system import System
from .tiles import (
    PhaseKind, ProgramDriver, StreamDriver, TrafficPhase, stx_run_phase,
)


# ---------------------------------------------------------------------------
# checks and reports
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    value: float
    comparator: str
    bound: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value,
                "comparator": self.comparator, "bound": self.bound,
                "passed": self.passed}

    def __str__(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:g} {self.comparator} {self.bound:g}"


def check(name: str, value: float, comparator: str, bound: float,
          rel: float = 0.0) -> CheckResult:
    if comparator == "<=":
        ok = value <= bound * (1 + rel) + 1e-12
    elif comparator == ">=":
        ok = value >= bound * (1 - rel) - 1e-12
    elif comparator == "==":
        ok = value == bound
    elif comparator == "~=":
        ok = abs(value - bound) <= abs(bound) * rel + 1e-12
    else:
        raise ValueError(f"unknown comparator {comparator}")
    return CheckResult(name, value, comparator, bound, ok)


@dataclass
class RunReport:
    scenario: str
    config_digest: str
    seed: int
    stats: dict
    checks: list[CheckResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0   # side channel only; excluded from canonical form

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_canonical_json(self) -> str:
        doc = {
            "scenario": self.scenario,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "notes": list(self.notes),
            "stats": self.stats,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_canonical_json())


class TraceWriter:
    """CSV per-flit trace: cycle,component,event,channel,txn_id,addr,src,dst"""

    HEADER = ["cycle", "component", "event", "channel", "txn_id", "addr",
              "src", "dst"]

    def __init__(self, path: str):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(self.HEADER)

    def __call__(self, cycle, component, event, channel, txn_id, addr,
                 src, dst) -> None:
        self._w.writerow([cycle, component, event, channel, txn_id,
                          f"{addr:#x}", src, dst])

    def close(self) -> None:
        self._f.close()


# ---------------------------------------------------------------------------
# scenario infrastructure
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    description: str
    runner: Callable

    def run(self, cfg: SimConfig, seed: int,
            trace: Optional[TraceWriter] = None, **params) -> RunReport:
        from .kernel import ProtocolError
        cfg.seed = seed
        t0 = time.perf_counter()
        try:
            report = self.runner(cfg, trace=trace, **params)
        except ProtocolError as e:
            report = RunReport(
                scenario=self.name, config_digest=cfg.digest(), seed=seed,
                stats={}, checks=[check("protocol_fatal", 1, "==", 0)],
                notes=[f"protocol-fatal: {line}" for line in e.dump().split("\n")])
        report.scenario = self.name
        report.seed = seed
        report.wall_clock_s = time.perf_counter() - t0
        return report


SCENARIOS: dict[str, Scenario] = {}


def scenario(name: str, description: str):
    def wrap(fn):
        SCENARIOS[name] = Scenario(name, description, fn)
        return fn
    return wrap


def list_scenarios() -> list[tuple[str, str]]:
    return [(s.name, s.description) for s in SCENARIOS.values()]


def _report(system: System, checks: list[CheckResult],
            notes: Optional[list[str]] = None) -> RunReport:
    return RunReport(scenario="", config_digest=system.cfg.digest(),
                     seed=system.cfg.seed,
                     stats=system.sim.stats.to_dict(),
                     checks=checks, notes=notes or [])


def _oracle_checks(system: System, checks: list[CheckResult]) -> None:
    violations = oracle_check(system.commit_log)
    checks.append(check("oracle_violations", len(violations), "==", 0))
    inclusion = system.check_inclusion()
    checks.append(check("inclusion_violations", len(inclusion), "==", 0))
    liveness = system.check_liveness()
    checks.append(check("liveness_violations", len(liveness), "==", 0))


# ---------------------------------------------------------------------------
# pattern helpers
# ---------------------------------------------------------------------------

def walking_pattern(line: int, invert: bool = False) -> bytes:
    """Walking-ones (or zeros) across each 64-bit word of the line."""
    out = bytearray()
    base = (line >> 6)
    for w in range(8):
        bit = (base + w) % 64
        word = 1 << bit
        if invert:
            word ^= (1 << 64) - 1
        out += word.to_bytes(8, "little")
    return bytes(out)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@scenario("sram-pattern",
          "walking-ones/zeros write-read over a shared region via each tile")
def _sram_pattern(cfg: SimConfig, trace=None, footprint_bytes: int = 1 << 20,
                  **_) -> RunReport:
    system = System(cfg, trace=trace)
    lines = footprint_bytes // LINE_BYTES
    mismatches = [0]
    per_tile = {}

    def verify(expect: bytes):
        def cb(cycle, value):
            if value != expect:
                mismatches[0] += 1
        return cb

    for t_idx, tile in enumerate(system.tiles):
        drv = ProgramDriver(tile, window=16)
        per_tile[tile.name] = drv
        invert = bool(t_idx % 2)
        ops = []
        for k in range(lines):
            line = k * LINE_BYTES
            pattern = walking_pattern(line, invert)
            ops.append(AccessOp(OpKind.STORE_LINE, line, payload=pattern))
            ops.append(AccessOp(OpKind.LOAD, line,
                                on_complete=verify(pattern)))
        drv.extend(ops)
        # tiles take turns over the same region (write-read, then the next
        # tile overwrites): serialize by running each program to completion
        stats = system.run()
        if stats.deadlock is not None:
            break
        drv.program.clear()

    stats = system.run()
    checks = [
        check("readback_mismatches", mismatches[0], "==", 0),
        check("deadlocks", 0 if stats.deadlock is None else 1, "==", 0),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks,
                   notes=[f"footprint_bytes={footprint_bytes}"])


@scenario("connectivity",
          "every tile pair exchanges lines through the coherent fabric")
def _connectivity(cfg: SimConfig, trace=None, **_) -> RunReport:
    system = System(cfg, trace=trace)
    mismatches = [0]
    exchanges = [0]
    base = 0x100000
    pair = 0
    for writer in system.tiles:
        for reader in system.tiles:
            if writer is reader:
                continue
            line = base + pair * LINE_BYTES
            pair += 1
            value = 0xC0FFEE00 + pair
            expect = write_word(ZERO_LINE, 0, 8, value)

            def cb(cycle, got, expect=expect):
                exchanges[0] += 1
                if got != expect:
                    mismatches[0] += 1

            writer.ctl.store_line(line, expect)
            system.run()
            reader.ctl.load(line, on_complete=cb)
            system.run()
    checks = [
        check("exchanges", exchanges[0], "==", pair),
        check("value_mismatches", mismatches[0], "==", 0),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks)


@scenario("snoop-delivery",
          "dirty lines are snooped out of writers and delivered to readers")
def _snoop_delivery(cfg: SimConfig, trace=None, **_) -> RunReport:
    system = System(cfg, trace=trace)
    if len(system.tiles) < 3:
        raise ConfigError(["snoop-delivery needs at least 3 tiles"])
    writer, r1, r2 = system.tiles[:3]
    values = []
    line = 0x200000
    writer.ctl.store(line, 0, 0xABCD)
    system.run()
    r1.ctl.load(line, on_complete=lambda c, v: values.append(v))
    system.run()
    r2.ctl.load(line, on_complete=lambda c, v: values.append(v))
    system.run()
    # after both reads the writer must have been downgraded to a sharer
    held = dict(writer.ctl.valid_lines())
    correct = sum(1 for v in values if read_word(v, 0, 8) == 0xABCD)
    snoops = sum(s.stats.get("hits", 0) for s in system.slices)
    checks = [
        check("readers_observed_dirty_value", correct, "==", 2),
        check("writer_downgraded_to_shared", 1 if held.get(line) == "S" else 0,
              "==", 1),
        check("home_hits", snoops, ">=", 2),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks)


def _random_ops(system: System, rng, tiles, lines, total_ops: int,
                window: int = 10) -> None:
    """Issue a random op mix, keeping each requester a few ops deep."""
    drivers = [ProgramDriver(t, window=window) for t in tiles]
    for i in range(total_ops):
        d = drivers[rng.randrange(len(drivers))]
        line = lines[rng.randrange(len(lines))]
        dice = rng.random()
        if dice < 0.40:
            d.program.append(AccessOp(OpKind.LOAD, line))
        elif dice < 0.72:
            d.program.append(AccessOp(
                OpKind.STORE, line, offset=8 * rng.randrange(8), width=8,
                operand=rng.randrange(2**32)))
        elif dice < 0.82:
            d.program.append(AccessOp(
                OpKind.ATOMIC, line, offset=8 * rng.randrange(8), width=8,
                operand=rng.randrange(256), atomic=AtomicKind.Add))
        elif dice < 0.90:
            d.program.append(AccessOp(
                OpKind.ATOMIC, line, offset=8 * rng.randrange(8), width=8,
                operand=rng.randrange(2**32), compare=rng.randrange(2**32),
                atomic=AtomicKind.CompareSwap))
        else:
            d.program.append(AccessOp(OpKind.NT_LOAD, line))


def litmus_config(base: Optional[SimConfig] = None) -> SimConfig:
    """Four generic requesters, three slices, one link on the 2x2 mesh."""
    cfg = base or SimConfig()
    cfg.topology.num_slices = 3
    cfg.topology.tiles = ("generic", "generic", "generic", "generic")
    # coherence stress cares about message orderings, not wire time: short
    # hops and a fast memory pack more race interleavings into each run
    cfg.noc.link_latency = 0
    cfg.mem.latency_cycles = min(cfg.mem.latency_cycles, 10)
    return cfg


@scenario("coherency-litmus",
          "randomized mixed ops refereed by the sequential oracle")
def _coherency_litmus(cfg: SimConfig, trace=None, ops: int = 10_000,
                      num_lines: int = 64, **_) -> RunReport:
    cfg = litmus_config(cfg)
    system = System(cfg, trace=trace)
    rng = system.sim.rng
    lines = [i * LINE_BYTES for i in range(num_lines)]
    _random_ops(system, rng, system.tiles, lines, ops)
    stats = system.run()
    checks = [check("deadlocks", 0 if stats.deadlock is None else 1, "==", 0)]
    _oracle_checks(system, checks)
    return _report(system, checks, notes=[f"ops={ops}", f"lines={num_lines}"])


@scenario("stream-vec",
          "vector tile streams through warm L2 at the port data-rate cap")
def _stream_vec(cfg: SimConfig, trace=None, array_bytes: int = 64 * 1024,
                **_) -> RunReport:
    cfg.mem.latency_cycles = 20
    system = System(cfg, trace=trace)
    vec = system.tile("vec")
    b_base, c_base, a_base = 0x000000, 0x400000, 0x800000
    # warm all three arrays into the distributed L2 so the measured pass
    # exercises the port data-rate cap, not the off-chip link
    for base in (b_base, c_base, a_base):
        system.preload_region(base, array_bytes)
    port_scope = f"port{vec.ctl.port.node_id!r}"
    before = system.sim.stats.snapshot()
    start = system.sim.now
    StreamDriver(vec, [b_base, c_base], a_base, array_bytes,
                 value_of=lambda line: walking_pattern(line))
    stats = system.run()
    window = system.sim.now - start
    inbound = system.sim.stats.delta(before, port_scope, "dat_bytes_in")
    rate = inbound / window if window else 0.0
    bound = 64.0  # one 512-bit beat per port per cycle
    checks = [
        check("port_dat_bytes_per_cycle_cap", rate, "<=", bound),
        check("port_dat_bytes_per_cycle", rate, ">=", 0.9 * bound),
        check("deadlocks", 0 if stats.deadlock is None else 1, "==", 0),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks, notes=[f"array_bytes={array_bytes}",
                                          f"measured_cycles={window}"])


@scenario("dgemm-stx",
          "compute-bound blocked matrix multiply through the DMA pipeline")
def _dgemm_stx(cfg: SimConfig, trace=None, tiles: int = 32, **_) -> RunReport:
    system = System(cfg, trace=trace)
    stx = system.tile("stx")
    block = 52  # 3 x 8 x 52^2 bytes fits a 64 kB working tile
    tile_bytes = 64 * 1024
    intensity = 2 * block**3 / tile_bytes
    phase = TrafficPhase(PhaseKind.BlockedDgemm,
                         footprint_bytes=tile_bytes * tiles,
                         iterations=tiles, arithmetic_intensity=intensity)
    delivered = min(64.0, 25.0, cfg.mem.bandwidth_bytes_per_cycle)
    result = stx.run_phase(phase, delivered)
    peak = stx.model.peak_gflops(cfg.frequency_hz)
    checks = [
        check("peak_gflops", peak, "==", 64.0),
        check("utilization", result.utilization, ">=", 0.9),
    ]
    return _report(system, checks,
                   notes=[f"cycles={result.cycles}", f"flops={result.flops}"])


@scenario("stream-stx",
          "bandwidth-bound stream phase tracks the delivered-bandwidth bound")
def _stream_stx(cfg: SimConfig, trace=None, tiles: int = 64, **_) -> RunReport:
    system = System(cfg, trace=trace)
    stx = system.tile("stx")
    phase = TrafficPhase(PhaseKind.StreamTriad,
                         footprint_bytes=64 * 1024 * tiles, iterations=tiles,
                         arithmetic_intensity=0.03)
    delivered = min(64.0, 25.0, cfg.mem.bandwidth_bytes_per_cycle)
    result = stx.run_phase(phase, delivered)
    analytic = result.bytes_moved / delivered
    ratio = result.cycles / analytic
    checks = [check("cycles_over_analytic_bound", ratio, "~=", 1.0, rel=0.05)]
    return _report(system, checks, notes=[f"cycles={result.cycles}"])


@scenario("stream-vrp",
          "variable-precision tile saturates its FPU feed with ideal memory")
def _stream_vrp(cfg: SimConfig, trace=None, elements: int = 4096,
                **_) -> RunReport:
    cfg.mem.latency_cycles = 2
    cfg.mem.bandwidth_bytes_per_cycle = 1024.0
    cfg.mem.direct = True
    system = System(cfg, trace=trace)
    vrp = system.tile("vrp")
    vrp.start_solver_phase(0, elements, 64)
    stats = system.run()
    rate = vrp.delivered_bandwidth
    feed = vrp.model.fpu_feed_bytes_per_cycle
    checks = [
        check("feed_bytes_per_cycle_cap", rate, "<=", feed),
        check("feed_bytes_per_cycle", rate, "~=", feed, rel=0.01),
        check("outstanding_misses_cap", vrp.ctl.outstanding_high_water, "<=",
              vrp.model.max_outstanding_misses),
        check("deadlocks", 0 if stats.deadlock is None else 1, "==", 0),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks, notes=[f"elements={elements}"])


@scenario("atomic-hammer",
          "all requesters hammer one counter line with far atomics")
def _atomic_hammer(cfg: SimConfig, trace=None, per_tile: int = 1000,
                   **_) -> RunReport:
    cfg = litmus_config(cfg)
    system = System(cfg, trace=trace)
    line = 0x40
    for tile in system.tiles:
        drv = ProgramDriver(tile, window=2)
        drv.extend([AccessOp(OpKind.ATOMIC, line, offset=0, width=8,
                             operand=1, atomic=AtomicKind.Add)
                    for _ in range(per_tile)])
    system.run()
    final = []
    system.tiles[0].ctl.load(line, on_complete=lambda c, v: final.append(v))
    stats = system.run()
    value = read_word(final[0], 0, 8) if final else -1
    expect = per_tile * len(system.tiles)
    checks = [
        check("final_counter", value, "==", expect),
        check("deadlocks", 0 if stats.deadlock is None else 1, "==", 0),
    ]
    _oracle_checks(system, checks)
    return _report(system, checks)


@scenario("c2c-capacity",
          "link-level saturation at the configured lane rate and overhead")
def _c2c_capacity(cfg: SimConfig, trace=None, packets: int = 400,
                  **_) -> RunReport:
    from .noc import Flit
    from .protocol import Channel, CoherenceMessage, Grant, MessageKind
    sim = Simulator(seed=cfg.seed)
    link_cfg = LinkConfig(
        lanes=cfg.c2c.lanes, lane_rate_gbps=cfg.c2c.lane_rate_gbps,
        encapsulation_overhead=cfg.c2c.encapsulation_overhead,
        replay_window=cfg.c2c.replay_window,
        packet_flits=cfg.c2c.packet_flits,
        bit_error_rate=cfg.c2c.bit_error_rate,
        propagation_cycles=cfg.c2c.propagation_cycles)
    link = C2CLink(sim, link_cfg, cfg.frequency_hz)
    marks = {"tx": [], "rx": []}

    def consumer(name):
        def consume(flits):
            marks[name].append(
                (sim.now, sum(64 for ch, _ in flits if ch is Channel.DAT)))
            return True
        return consume

    link.tx.consumer = consumer("tx")
    link.rx.consumer = consumer("rx")

    def feed(direction, count, base):
        from .kernel import Component

        class F(Component):
            def __init__(self, sim, name):
                super().__init__(sim, name)
                self.i = 0

            def step(self):
                while self.i < count:
                    msg = CoherenceMessage(
                        kind=MessageKind.CompData, txn_id=base + self.i,
                        src=NodeId(0, 0, 0), dst=NodeId(1, 1, 1),
                        line=(self.i * 64), payload=ZERO_LINE,
                        grant=Grant.NONE)
                    if not direction.offer(Flit(Channel.DAT, msg, msg.src,
                                                msg.dst)):
                        return
                    self.i += 1

            def busy(self):
                return self.i < count

        return F(sim, f"feed{base}")

    nflits = packets * link_cfg.packet_flits
    feed(link.tx, nflits, 0)
    feed(link.rx, nflits, 10**6)
    sim.run_until()

    def rate(name, skip=50, span=300):
        seq = marks[name]
        span_n = min(span, len(seq) - skip - 1)
        cycles = seq[skip + span_n][0] - seq[skip][0]
        moved = sum(b for _, b in seq[skip + 1:skip + span_n + 1])
        return moved / cycles if cycles else 0.0

    tx_rate = rate("tx")
    rx_rate = rate("rx")
    cap = link_cfg.goodput_cap_bytes_per_second() / cfg.frequency_hz
    checks = [
        check("tx_goodput_bytes_per_cycle", tx_rate, "~=", cap, rel=0.001),
        check("rx_goodput_bytes_per_cycle", rx_rate, "~=", cap, rel=0.001),
        check("tx_under_cap", tx_rate, "<=", cap),
    ]
    report = RunReport(scenario="", config_digest=cfg.digest(), seed=cfg.seed,
                       stats=sim.stats.to_dict(), checks=checks,
                       notes=[f"aggregate_bytes_per_cycle={tx_rate + rx_rate}"])
    return report


@scenario("c2c-reliability",
          "injected bit errors never corrupt or reorder delivered payloads")
def _c2c_reliability(cfg: SimConfig, trace=None, min_bits: int = 10**8,
                     ber: float = 1e-6, **_) -> RunReport:
    sim = Simulator(seed=cfg.seed)
    link_cfg = LinkConfig(bit_error_rate=ber)
    link = C2CLink(sim, link_cfg, cfg.frequency_hz)
    from .kernel import Component
    from .noc import Flit
    from .protocol import Channel, CoherenceMessage, Grant, MessageKind

    sent = hashlib.sha256()
    got = hashlib.sha256()
    delivered = [0]

    def consume(flits):
        for ch, msg in flits:
            got.update(msg.payload)
            delivered[0] += 1
        return True

    link.tx.consumer = consume
    packet_bits = link.tx._wire_bits(64 * link_cfg.packet_flits)
    total_flits = (min_bits // packet_bits + 1) * link_cfg.packet_flits

    # stage the whole stream up front: an always-ready source, so the run
    # is purely event-driven between wire arrivals and acks
    for i in range(total_flits):
        word = (i * 0x9E3779B97F4A7C15 + 7) & (2**64 - 1)
        payload = word.to_bytes(8, "little") * 8
        msg = CoherenceMessage(
            kind=MessageKind.CompData, txn_id=i,
            src=NodeId(0, 0, 0), dst=NodeId(1, 1, 1),
            line=(i * 64) & ((1 << 45) - 1), payload=payload,
            grant=Grant.NONE)
        link.tx.send_q.append(Flit(Channel.DAT, msg, msg.src, msg.dst))
        sent.update(payload)
    link.tx.pump()
    sim.run_until()
    bits_raw = sim.stats.get("c2c.tx", "bits_raw")
    retrans = sim.stats.get("c2c.tx", "retransmissions")
    goodput = delivered[0] * 64 / sim.now
    checks = [
        check("bits_transferred", bits_raw, ">=", min_bits),
        check("payload_hash_match", 1 if got.hexdigest() == sent.hexdigest()
              else 0, "==", 1),
        check("flits_delivered", delivered[0], "==", total_flits),
        check("retransmissions", retrans, ">=", 1),
    ]
    return RunReport(scenario="", config_digest=cfg.digest(), seed=cfg.seed,
                     stats=sim.stats.to_dict(), checks=checks,
                     notes=[f"goodput_bytes_per_cycle={goodput}",
                            f"ber={ber}"])


# ---------------------------------------------------------------------------
# litmus campaign
# ---------------------------------------------------------------------------

def run_litmus_once(seed: int, ops: int, num_lines: int = 64,
                    mutate: bool = False) -> tuple[bool, list[str]]:
    """One independent litmus run; returns (passed, failure descriptions).

    Protocol-fatal conditions (illegal state/event pairs) are reported as
    failures with their transaction history, like deadlocks.
    """
    from .kernel import ProtocolError
    cfg = litmus_config()
    cfg.seed = seed
    if mutate:
        cfg.faults.disable_back_invalidation = True
        # shrink the L2 so evictions (and thus back-invalidation) matter
        cfg.l2.capacity_bytes = 8 * 64
        cfg.l2.ways = 8
    system = System(cfg)
    rng = system.sim.rng
    lines = [i * LINE_BYTES for i in range(num_lines)]
    _random_ops(system, rng, system.tiles, lines, ops)
    problems: list[str] = []
    try:
        stats = system.run()
        if stats.deadlock is not None:
            problems.append(f"deadlock: {stats.deadlock}")
    except ProtocolError as e:
        problems.append(f"protocol-fatal: {e.dump()}")
    problems += [str(v) for v in oracle_check(system.commit_log)]
    problems += system.check_inclusion()
    problems += system.check_liveness()
    return not problems, problems


@dataclass
class CampaignResult:
    runs: int
    ops_per_run: int
    violations: int
    failing_seed: Optional[int]
    problems: list[str]
    vacuous: bool = False

    @property
    def passed(self) -> bool:
        return self.violations == 0 and not self.vacuous

    def to_dict(self) -> dict:
        return {"runs": self.runs, "ops_per_run": self.ops_per_run,
                "violations": self.violations,
                "failing_seed": self.failing_seed,
                "problems": self.problems[:16], "vacuous": self.vacuous,
                "passed": self.passed}


def _litmus_worker(args) -> tuple[int, bool, list[str]]:
    sub_seed, ops, num_lines, mutate = args
    ok, problems = run_litmus_once(sub_seed, ops, num_lines=num_lines,
                                   mutate=mutate)
    return sub_seed, ok, problems


def litmus_campaign(num_runs: int, ops_per_run: int, seed: int,
                    mutate: bool = False, num_lines: int = 64,
                    progress: Optional[Callable[[int], None]] = None,
                    workers: Optional[int] = None) -> CampaignResult:
    """Independent seeded litmus runs; any violation fails the campaign and
    names the reproducing seed. Runs dispatch across processes when more
    than one CPU is available (each run stays single-threaded)."""
    if num_runs == 0:
        return CampaignResult(0, ops_per_run, 0, None,
                              ["no evidence: zero runs requested"],
                              vacuous=True)
    jobs = [((seed * 1_000_003 + i) & 0xFFFFFFFF, ops_per_run, num_lines,
             mutate) for i in range(num_runs)]
    if workers is None:
        workers = min(num_runs, os.cpu_count() or 1)
    results: list[tuple[int, bool, list[str]]] = []
    if workers > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(_litmus_worker, jobs,
                                             chunksize=4)):
                results.append(res)
                if progress is not None:
                    progress(i)
    else:
        import gc
        was_enabled = gc.isenabled()
        gc.disable()  # per-run heaps are short-lived; collect between runs
        try:
            for i, job in enumerate(jobs):
                results.append(_litmus_worker(job))
                gc.collect(0)
                if i % 8 == 7:
                    gc.collect()
                if progress is not None:
                    progress(i)
                if not results[-1][1]:
                    break
        finally:
            if was_enabled:
                gc.enable()
    for sub_seed, ok, problems in results:
        if not ok:
            return CampaignResult(num_runs, ops_per_run, len(problems),
                                  sub_seed, problems)
    return CampaignResult(num_runs, ops_per_run, 0, None, [])
