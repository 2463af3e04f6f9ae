#!/usr/bin/env python3
"""Reproduce the headline bandwidth figures in one table.

Runs the port-saturation, link-capacity, prototype-link, vector-stream,
and FPU-feed measurements and prints achieved versus published rates.
"""

import sys

from uncoresim.config import SimConfig
from uncoresim.harness import SCENARIOS


def row(name, achieved, target, unit):
    print(f"{name:34s} {achieved:>10.3f} {target:>10.3f}  {unit}")


def main() -> int:
    print(f"{'measurement':34s} {'achieved':>10} {'target':>10}  unit")

    rep = SCENARIOS["c2c-capacity"].run(SimConfig(), seed=1)
    tx = next(c for c in rep.checks if c.name == "tx_goodput_bytes_per_cycle")
    row("c2c goodput per direction", tx.value, 25.0, "GB/s at 1 GHz")

    proto_cfg = SimConfig()
    proto_cfg.c2c.lane_rate_gbps = 12.5
    proto_cfg.c2c.encapsulation_overhead = 0.2
    proto = SCENARIOS["c2c-capacity"].run(proto_cfg, seed=1)
    aggregate = float(proto.notes[0].split("=")[1])
    row("c2c prototype aggregate", aggregate, 20.0, "GB/s at 1 GHz")

    rep = SCENARIOS["stream-vec"].run(SimConfig(), seed=1)
    rate = next(c for c in rep.checks if c.name == "port_dat_bytes_per_cycle")
    row("vector-stream port bandwidth", rate.value, 64.0, "GB/s at 1 GHz")

    rep = SCENARIOS["stream-vrp"].run(SimConfig(), seed=1)
    rate = next(c for c in rep.checks if c.name == "feed_bytes_per_cycle")
    row("variable-precision FPU feed", rate.value, 16.0, "B/cycle")

    rep = SCENARIOS["dgemm-stx"].run(SimConfig(), seed=1)
    peak = next(c for c in rep.checks if c.name == "peak_gflops")
    util = next(c for c in rep.checks if c.name == "utilization")
    row("stencil/tensor peak", peak.value, 64.0, "GFLOPS")
    row("stencil/tensor dgemm utilization", util.value, 0.9, "fraction (floor)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
