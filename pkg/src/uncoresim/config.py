"""Configuration: typed parameter blocks, text-file loading, validation.

The on-disk format is line-oriented INI: `[section]` headers with
`key = value` lines. Every field has a default; loading an empty file gives
the default system (2x2 mesh, four L2/HN slices, the three tiles, one
chip-to-chip link). Unknown keys and out-of-range values are rejected with
one itemized message per problem. The canonical rendering echoes every
resolved field, so its digest changes exactly when the configuration does.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields
from typing import Optional

from .l2hn import INTERLEAVE_GRANULES

TILE_KINDS = ("vec", "stx", "vrp", "generic")


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" +
                         "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


@dataclass
class NocConfig:
    buffer_depth: int = 4
    endpoint_depth: int = 4
    router_latency: int = 1
    link_latency: int = 1


@dataclass
class L2Config:
    capacity_bytes: int = 256 * 1024
    ways: int = 8
    max_misses: int = 64
    max_evictions: int = 64
    max_outstanding: int = 128
    granule: int = 64


@dataclass
class C2CConfig:
    lanes: int = 8
    lane_rate_gbps: float = 25.0
    encapsulation_overhead: float = 0.0
    replay_window: int = 64
    packet_flits: int = 4
    bit_error_rate: float = 0.0
    propagation_cycles: int = 8


@dataclass
class MemConfig:
    latency_cycles: int = 100
    bandwidth_bytes_per_cycle: float = 25.6
    direct: bool = False      # attach memory on-mesh, bypassing the link


@dataclass
class VecConfig:
    l1d_bytes: int = 32 * 1024
    outstanding_lines: int = 32
    max_vector_bytes: int = 2048
    lanes: int = 8
    decode_overhead: int = 3


@dataclass
class StxConfig:
    clusters: int = 4
    cores_per_cluster: int = 8
    tcdm_bytes: int = 128 * 1024
    flops_per_core_cycle: int = 2
    double_buffering: bool = True
    spu_multiplier: float = 1.0


@dataclass
class VrpConfig:
    l1d_bytes: int = 32 * 1024
    max_outstanding_misses: int = 128
    fpu_feed_bytes_per_cycle: int = 16
    prefetch_degree: int = 4
    prefetch_distance: int = 4


@dataclass
class TopologyConfig:
    num_slices: int = 4
    tiles: tuple[str, ...] = ("vec", "stx", "vrp")


@dataclass
class FaultConfig:
    disable_back_invalidation: bool = False


@dataclass
class SimConfig:
    mesh_cols: int = 2
    mesh_rows: int = 2
    frequency_hz: float = 1e9
    seed: int = 0
    max_cycles: int = 10_000_000
    noc: NocConfig = field(default_factory=NocConfig)
    l2: L2Config = field(default_factory=L2Config)
    c2c: C2CConfig = field(default_factory=C2CConfig)
    mem: MemConfig = field(default_factory=MemConfig)
    vec: VecConfig = field(default_factory=VecConfig)
    stx: StxConfig = field(default_factory=StxConfig)
    vrp: VrpConfig = field(default_factory=VrpConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)

    # -- validation --------------------------------------------------------

    def validate(self) -> list[str]:
        p = []
        if self.mesh_cols < 1:
            p.append("sim.mesh_cols must be >= 1")
        if self.mesh_rows < 1:
            p.append("sim.mesh_rows must be >= 1")
        if self.frequency_hz <= 0:
            p.append("sim.frequency_hz must be positive")
        if self.seed < 0:
            p.append("sim.seed must be non-negative")
        if self.max_cycles <= 0:
            p.append("sim.max_cycles must be positive")
        for name in ("buffer_depth", "endpoint_depth"):
            if getattr(self.noc, name) < 1:
                p.append(f"noc.{name} must be >= 1")
        for name in ("router_latency", "link_latency"):
            if getattr(self.noc, name) < 0:
                p.append(f"noc.{name} must be >= 0")
        if self.l2.capacity_bytes <= 0:
            p.append("l2.capacity_bytes must be positive")
        if self.l2.ways < 1 or self.l2.ways & (self.l2.ways - 1):
            p.append("l2.ways must be a positive power of two")
        elif self.l2.capacity_bytes % (self.l2.ways * 64):
            p.append("l2.capacity_bytes must be a multiple of ways x 64")
        for name in ("max_misses", "max_evictions", "max_outstanding"):
            if getattr(self.l2, name) < 1:
                p.append(f"l2.{name} must be positive")
        if self.l2.granule not in INTERLEAVE_GRANULES:
            p.append(f"l2.granule must be one of {list(INTERLEAVE_GRANULES)}, "
                     f"got {self.l2.granule}")
        if self.c2c.lanes < 1:
            p.append("c2c.lanes must be positive")
        if self.c2c.lane_rate_gbps <= 0:
            p.append("c2c.lane_rate_gbps must be positive")
        if not 0.0 <= self.c2c.encapsulation_overhead < 1.0:
            p.append("c2c.encapsulation_overhead must be in [0, 1)")
        if not 0.0 <= self.c2c.bit_error_rate < 1.0:
            p.append("c2c.bit_error_rate must be in [0, 1)")
        if self.c2c.replay_window < 1 or self.c2c.packet_flits < 1:
            p.append("c2c.replay_window and c2c.packet_flits must be positive")
        if self.c2c.propagation_cycles < 0:
            p.append("c2c.propagation_cycles must be >= 0")
        if self.mem.latency_cycles < 0:
            p.append("mem.latency_cycles must be >= 0")
        if self.mem.bandwidth_bytes_per_cycle <= 0:
            p.append("mem.bandwidth_bytes_per_cycle must be positive")
        for blk, names in (
                (self.vec, ("l1d_bytes", "outstanding_lines",
                            "max_vector_bytes", "lanes")),
                (self.stx, ("clusters", "cores_per_cluster", "tcdm_bytes",
                            "flops_per_core_cycle")),
                (self.vrp, ("l1d_bytes", "max_outstanding_misses",
                            "fpu_feed_bytes_per_cycle"))):
            prefix = type(blk).__name__[:3].lower()
            for name in names:
                if getattr(blk, name) < 1:
                    p.append(f"{prefix}.{name} must be positive")
        if self.vrp.prefetch_degree < 0 or self.vrp.prefetch_distance < 0:
            p.append("vrp.prefetch parameters must be >= 0")
        if self.topology.num_slices < 1:
            p.append("topology.num_slices must be >= 1")
        for t in self.topology.tiles:
            if t not in TILE_KINDS:
                p.append(f"topology.tiles entry {t!r} not in {list(TILE_KINDS)}")
        ports = 2 * self.mesh_cols * self.mesh_rows
        need = self.topology.num_slices + len(self.topology.tiles) + 1
        if need > ports:
            p.append(f"topology needs {need} device ports but a "
                     f"{self.mesh_cols}x{self.mesh_rows} mesh has {ports}")
        return p

    # -- canonical form ------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        for section, blk in self._sections():
            out.write(f"[{section}]\n")
            for f in fields(blk):
                v = getattr(blk, f.name)
                if isinstance(v, tuple):
                    v = ",".join(v)
                out.write(f"{f.name} = {v}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def _sections(self):
        head = _Head(self.mesh_cols, self.mesh_rows, self.frequency_hz,
                     self.seed, self.max_cycles)
        return [("sim", head), ("noc", self.noc), ("l2", self.l2),
                ("c2c", self.c2c), ("mem", self.mem), ("vec", self.vec),
                ("stx", self.stx), ("vrp", self.vrp),
                ("topology", self.topology), ("faults", self.faults)]


@dataclass
class _Head:
    mesh_cols: int
    mesh_rows: int
    frequency_hz: float
    seed: int
    max_cycles: int


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _convert(raw: str, like, where: str, problems: list[str]):
    raw = raw.strip()
    if isinstance(like, bool):
        v = _BOOL.get(raw.lower())
        if v is None:
            problems.append(f"{where}: expected a boolean, got {raw!r}")
        return v
    if isinstance(like, int):
        try:
            return int(raw, 0)
        except ValueError:
            problems.append(f"{where}: expected an integer, got {raw!r}")
            return None
    if isinstance(like, float):
        try:
            return float(raw)
        except ValueError:
            problems.append(f"{where}: expected a number, got {raw!r}")
            return None
    if isinstance(like, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_config(text: str) -> SimConfig:
    """Parse and fully validate configuration text (may be empty)."""
    cfg = SimConfig()
    problems: list[str] = []
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"syntax: {e}"]) from None
    sections = dict(cfg._sections())
    for section in parser.sections():
        blk = sections.get(section)
        if blk is None:
            problems.append(f"unknown section [{section}]")
            continue
        valid = {f.name for f in fields(blk)}
        for key, raw in parser.items(section):
            if key not in valid:
                problems.append(f"unknown key {section}.{key}")
                continue
            v = _convert(raw, getattr(blk, key), f"{section}.{key}", problems)
            if v is not None:
                if section == "sim":
                    setattr(cfg, key, v)
                else:
                    setattr(blk, key, v)
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Optional[str]) -> SimConfig:
    """Load a config file; None or a missing-path error is itemized."""
    if path is None:
        cfg = SimConfig()
        problems = cfg.validate()
        if problems:
            raise ConfigError(problems)
        return cfg
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError([f"cannot read {path}: {e}"]) from None
    return parse_config(text)
