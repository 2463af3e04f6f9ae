"""Acceptance criteria: one pass/fail line per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
Criteria pin the headline rates and limits: port data bandwidth, link
capacity and reliability, coherence soundness under randomized traffic,
cache capacity limits, replacement-policy equivalence, tile timing
contracts, and bit-exact determinism.
"""

import hashlib
import random
import time

import pytest

from fabric_util import Fabric
from reference_plru import RefPLRU
from uncoresim.config import SimConfig
from uncoresim.harness import SCENARIOS, TraceWriter, litmus_campaign
from uncoresim.kernel import Component, Simulator
from uncoresim.l2hn import TreePLRU
from uncoresim.noc import Mesh, NodeId
from uncoresim.protocol import (
    Channel, CoherenceMessage, Grant, MessageKind, ZERO_LINE,
)
from uncoresim.system import System
from uncoresim.tiles import vec_op_latency, vector_load_lines


def verdict(num: int, ok: bool, text: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. NoC port bandwidth: 64 bytes/cycle sustained on one port
# ---------------------------------------------------------------------------

class _DatStream(Component):
    def __init__(self, sim, port, dst, count):
        super().__init__(sim, "tx")
        self.port = port
        self.dst = dst
        self.count = count
        self.sent = 0

    def step(self):
        while self.sent < self.count and len(self.port.outbox[Channel.DAT]) < 2:
            self.port.send_message(CoherenceMessage(
                kind=MessageKind.CompData, txn_id=self.sent,
                src=self.port.node_id, dst=self.dst, line=0,
                payload=ZERO_LINE, grant=Grant.NONE))
            self.sent += 1

    def busy(self):
        return self.sent < self.count


class _Sink(Component):
    def __init__(self, sim, port):
        super().__init__(sim, "rx")
        self.port = port
        self.got = 0

    def step(self):
        if self.port.pop_delivery(Channel.DAT) is not None:
            self.got += 1
            self.sim.progress()


def test_criterion_1_noc_port_bandwidth():
    t0 = time.perf_counter()
    sim = Simulator(seed=1)
    mesh = Mesh(sim, 2, 2)
    src = mesh.attach(NodeId(0, 0, 0))
    dst = NodeId(1, 0, 0)
    rx_port = mesh.attach(dst)
    _DatStream(sim, src, dst, count=12_000)
    rx = _Sink(sim, rx_port)
    sim.run_until(stop=500)
    before = sim.stats.snapshot()
    start = sim.now
    sim.run_until(stop=10_500)
    window = sim.now - start
    moved = sim.stats.delta(before, f"port{dst!r}", "dat_bytes_in")
    rate = moved / window
    wall = time.perf_counter() - t0
    verdict(1, window >= 10_000 and abs(rate - 64.0) <= 0.64 and wall < 5.0,
            f"single-port DAT saturation {rate:.3f} B/cycle over {window} "
            f"cycles (target 64 +/-1%), wall {wall:.2f}s")


# ---------------------------------------------------------------------------
# 2. C2C capacity: exact 25 GB/s per direction; prototype point ~20 GB/s
# ---------------------------------------------------------------------------

def test_criterion_2_c2c_capacity():
    rep = SCENARIOS["c2c-capacity"].run(SimConfig(), seed=2)
    tx = next(c for c in rep.checks if c.name == "tx_goodput_bytes_per_cycle")
    exact = rep.passed and abs(tx.value - 25.0) < 1e-9
    proto_cfg = SimConfig()
    proto_cfg.c2c.lane_rate_gbps = 12.5
    proto_cfg.c2c.encapsulation_overhead = 0.2
    proto = SCENARIOS["c2c-capacity"].run(proto_cfg, seed=2)
    aggregate = float(proto.notes[0].split("=")[1])
    proto_ok = abs(aggregate - 20.0) <= 2.0  # GB/s at 1 GHz == B/cycle
    verdict(2, exact and proto_ok,
            f"zero-overhead goodput {tx.value:.6f} B/cycle (= 25 GB/s exactly); "
            f"prototype aggregate {aggregate:.3f} GB/s (target 20 +/-10%)")


# ---------------------------------------------------------------------------
# 3. C2C reliability at BER 1e-6 over >= 1e9 transferred bits
# ---------------------------------------------------------------------------

def test_criterion_3_c2c_reliability():
    rep = SCENARIOS["c2c-reliability"].run(SimConfig(), seed=3,
                                           min_bits=10**9, ber=1e-6)
    goodput = float(rep.notes[0].split("=")[1])
    baseline = SCENARIOS["c2c-reliability"].run(SimConfig(), seed=3,
                                                min_bits=10**8, ber=0.0)
    base_goodput = float(baseline.notes[0].split("=")[1])
    bits = next(c for c in rep.checks if c.name == "bits_transferred").value
    retrans = next(c for c in rep.checks if c.name == "retransmissions").value
    hash_ok = next(c for c in rep.checks if c.name == "payload_hash_match")
    ok = rep.passed and hash_ok.passed and retrans > 0 \
        and goodput < base_goodput
    verdict(3, ok,
            f"{bits:.3g} bits at BER 1e-6: delivered hash equals sent hash, "
            f"{retrans:.0f} retransmissions, goodput {goodput:.2f} < "
            f"{base_goodput:.2f} B/cycle at BER 0")


# ---------------------------------------------------------------------------
# 4. Coherence soundness: the litmus campaign and the mutation check
# ---------------------------------------------------------------------------

def test_criterion_4_coherence_soundness():
    t0 = time.perf_counter()
    campaign = litmus_campaign(num_runs=100, ops_per_run=10_000, seed=2026)
    wall = time.perf_counter() - t0
    mutated = litmus_campaign(num_runs=4, ops_per_run=2_500, seed=5,
                              mutate=True, workers=1)
    ok = campaign.passed and campaign.violations == 0 \
        and not mutated.passed and mutated.failing_seed is not None \
        and wall < 120.0
    verdict(4, ok,
            f"100 runs x 10^4 ops: {campaign.violations} violations in "
            f"{wall:.1f}s (< 120s); disabled back-invalidation caught "
            f"(repro seed {mutated.failing_seed})")


# ---------------------------------------------------------------------------
# 5. L2 capacity limits: 64 misses / 64 evictions / 128 outstanding
# ---------------------------------------------------------------------------

def test_criterion_5_l2_capacity_limits():
    fb = Fabric(num_agents=1, num_slices=1, mem_latency=400, outstanding=128,
                l1_capacity=128 * 1024)
    done = []
    for i in range(65):
        fb.agents[0].ctl.load(i * 64, on_complete=lambda c, v: done.append(c))
    fb.run()
    home = fb.slices[0]
    ok = (len(done) == 65
          and home.stats["hw_misses"] == 64
          and home.stats.get("stall_mshr", 0) > 0
          and home.stats.get("hw_evictions", 0) <= 64
          and home.stats.get("hw_outstanding", 0) <= 128)
    verdict(5, ok,
            f"65 concurrent misses: all completed, zero drops, miss "
            f"high-water {home.stats['hw_misses']} == 64 with visible "
            f"backpressure; occupancy asserts armed every cycle")


# ---------------------------------------------------------------------------
# 6. Tree-PLRU equivalence on 1e5 random accesses
# ---------------------------------------------------------------------------

def test_criterion_6_plru_equivalence():
    rng = random.Random(0xACCE55)
    impl = TreePLRU(1, 8)
    ref = RefPLRU(8)
    mismatches = 0
    for _ in range(100_000):
        way = rng.randrange(8)
        impl.touch(0, way)
        ref.touch(way)
        if impl.victim(0) != ref.victim():
            mismatches += 1
    verdict(6, mismatches == 0,
            f"victim selection matched the reference model on 100000 random "
            f"accesses with {mismatches} mismatches")


# ---------------------------------------------------------------------------
# 7. VEC timing: op latency and line-request decomposition
# ---------------------------------------------------------------------------

def test_criterion_7_vec_timing():
    lat = vec_op_latency(256)
    lines = vector_load_lines(base=0x10000, stride=8, vl_bytes=2048)
    cfg = SimConfig()
    cfg.mem.direct = True
    cfg.mem.latency_cycles = 4
    system = System(cfg)
    vec = system.tile("vec")
    issued = vec.issue_vector_load(0x20000, stride=8, vl_bytes=2048)
    system.run()
    live_count = vec.ctl.stats.get("txn_issued", 0)
    ok = lat == 35 and len(lines) == 32 and issued == 32 and live_count == 32
    verdict(7, ok,
            f"vec_op_latency(256) = {lat} cycles (target 35); unit-stride "
            f"2048 B load issued exactly {issued} line requests")


# ---------------------------------------------------------------------------
# 8. STX peak FLOPS and compute-bound utilization
# ---------------------------------------------------------------------------

def test_criterion_8_stx_peak():
    rep = SCENARIOS["dgemm-stx"].run(SimConfig(), seed=8)
    peak = next(c for c in rep.checks if c.name == "peak_gflops")
    util = next(c for c in rep.checks if c.name == "utilization")
    verdict(8, rep.passed and peak.value == 64.0 and util.value >= 0.9,
            f"default config peaks at {peak.value:g} GFLOPS at 1 GHz; "
            f"compute-bound blocked matmul reaches {util.value:.3f} "
            f"utilization (target >= 0.9)")


# ---------------------------------------------------------------------------
# 9. VRP feed bandwidth and outstanding-miss cap
# ---------------------------------------------------------------------------

def test_criterion_9_vrp_feed():
    rep = SCENARIOS["stream-vrp"].run(SimConfig(), seed=9)
    rate = next(c for c in rep.checks if c.name == "feed_bytes_per_cycle")
    cap = next(c for c in rep.checks if c.name == "outstanding_misses_cap")
    verdict(9, rep.passed,
            f"ideal-memory feed {rate.value:.3f} B/cycle (target 16 +/-1%); "
            f"outstanding misses peaked at {cap.value:.0f} <= 128")


# ---------------------------------------------------------------------------
# 10. Determinism: byte-identical reports and traces
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    blobs = []
    for rep_i in range(2):
        trace_path = tmp_path / f"t{rep_i}.csv"
        tw = TraceWriter(str(trace_path))
        report = SCENARIOS["coherency-litmus"].run(SimConfig(), seed=77,
                                                   trace=tw, ops=1_500)
        tw.close()
        blobs.append((report.config_digest, report.to_canonical_json(),
                      trace_path.read_bytes()))
    same_digest = blobs[0][0] == blobs[1][0]
    same_report = blobs[0][1] == blobs[1][1]
    same_trace = hashlib.sha256(blobs[0][2]).hexdigest() == \
        hashlib.sha256(blobs[1][2]).hexdigest()
    verdict(10, same_digest and same_report and same_trace,
            f"re-run with digest {blobs[0][0]} and seed 77 produced "
            f"byte-identical report ({len(blobs[0][1])} bytes) and trace "
            f"({len(blobs[0][2])} bytes)")
