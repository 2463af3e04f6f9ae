"""Whole-system wiring: mesh, slices, tiles, link, and memory from a config.

Placement on the default 2x2 mesh: the four L2/HN slices take the port-1
positions, the tiles fill port-0 positions in declaration order, and the
chip-to-chip bridge takes the last free port. Any R x C mesh with enough
device ports is accepted.
"""

from __future__ import annotations

from typing import Optional

from .c2c import C2CBridge, C2CLink, DirectMemory, LinkConfig
from .config import SimConfig
from .kernel import Simulator, TraceFn
from .l2hn import InterleaveMap, L2HomeSlice, SliceGeometry, slice_for
from .noc import Mesh, NodeId
from .protocol import CommitLog
from .tiles import (
    StxTile, StxTileModel, TileBase, VecTile, VecTileModel, VrpTile,
    VrpTileModel,
)


class System:
    def __init__(self, cfg: SimConfig, trace: Optional[TraceFn] = None,
                 collect_commits: bool = True):
        problems = cfg.validate()
        if problems:
            from .config import ConfigError
            raise ConfigError(problems)
        self.cfg = cfg
        self.sim = Simulator(seed=cfg.seed, trace=trace)
        self.commit_log = CommitLog() if collect_commits else None
        self.mesh = Mesh(self.sim, cfg.mesh_cols, cfg.mesh_rows,
                         buffer_depth=cfg.noc.buffer_depth,
                         endpoint_depth=cfg.noc.endpoint_depth,
                         router_latency=cfg.noc.router_latency,
                         link_latency=cfg.noc.link_latency)

        ports = [NodeId(x, y, p)
                 for p in (1, 0)
                 for y in range(cfg.mesh_rows)
                 for x in range(cfg.mesh_cols)]
        cursor = 0

        def take() -> NodeId:
            nonlocal cursor
            node = ports[cursor]
            cursor += 1
            return node

        self.slice_nodes = [take() for _ in range(cfg.topology.num_slices)]
        tile_nodes = [take() for _ in cfg.topology.tiles]
        bridge_node = ports[-1]
        if bridge_node in self.slice_nodes or bridge_node in tile_nodes:
            raise ValueError("no device port left for the chip-to-chip bridge")
        self.memory_node = bridge_node

        self.interleave = InterleaveMap(granule=cfg.l2.granule,
                                        num_slices=cfg.topology.num_slices)

        def home_of(line: int) -> NodeId:
            return self.slice_nodes[slice_for(line, self.interleave)]

        self.home_of = home_of

        # memory transport: behind the serial link by default
        if cfg.mem.direct:
            self.link = None
            self.bridge = None
            mem_port = self.mesh.attach(bridge_node)
        else:
            link_cfg = LinkConfig(
                lanes=cfg.c2c.lanes, lane_rate_gbps=cfg.c2c.lane_rate_gbps,
                encapsulation_overhead=cfg.c2c.encapsulation_overhead,
                replay_window=cfg.c2c.replay_window,
                packet_flits=cfg.c2c.packet_flits,
                bit_error_rate=cfg.c2c.bit_error_rate,
                propagation_cycles=cfg.c2c.propagation_cycles)
            self.link = C2CLink(self.sim, link_cfg, cfg.frequency_hz)

        geometry = SliceGeometry(capacity=cfg.l2.capacity_bytes,
                                 ways=cfg.l2.ways)
        self.slices = [
            L2HomeSlice(self.sim, f"l2hn{i}", self.mesh.attach(node),
                        self.memory_node, tile_nodes, geometry=geometry,
                        max_misses=cfg.l2.max_misses,
                        max_evictions=cfg.l2.max_evictions,
                        max_outstanding=cfg.l2.max_outstanding,
                        commit_log=self.commit_log,
                        disable_back_invalidation=
                        cfg.faults.disable_back_invalidation)
            for i, node in enumerate(self.slice_nodes)]

        self.tiles: list[TileBase] = []
        counts: dict[str, int] = {}
        for kind, node in zip(cfg.topology.tiles, tile_nodes):
            n = counts.get(kind, 0)
            counts[kind] = n + 1
            name = f"{kind}{n}" if cfg.topology.tiles.count(kind) > 1 else kind
            port = self.mesh.attach(node)
            if kind == "vec":
                model = VecTileModel(
                    l1d_bytes=cfg.vec.l1d_bytes,
                    max_outstanding_lines=cfg.vec.outstanding_lines,
                    max_vector_bytes=cfg.vec.max_vector_bytes,
                    lanes=cfg.vec.lanes,
                    decode_overhead=cfg.vec.decode_overhead)
                tile = VecTile(self.sim, name, port, home_of, model,
                               commit_log=self.commit_log)
            elif kind == "stx":
                model = StxTileModel(
                    clusters=cfg.stx.clusters,
                    cores_per_cluster=cfg.stx.cores_per_cluster,
                    tcdm_bytes=cfg.stx.tcdm_bytes,
                    flops_per_core_cycle=cfg.stx.flops_per_core_cycle,
                    double_buffering=cfg.stx.double_buffering,
                    spu_multiplier=cfg.stx.spu_multiplier)
                tile = StxTile(self.sim, name, port, home_of, model,
                               commit_log=self.commit_log)
            elif kind == "vrp":
                model = VrpTileModel(
                    l1d_bytes=cfg.vrp.l1d_bytes,
                    max_outstanding_misses=cfg.vrp.max_outstanding_misses,
                    fpu_feed_bytes_per_cycle=cfg.vrp.fpu_feed_bytes_per_cycle,
                    prefetch_degree=cfg.vrp.prefetch_degree,
                    prefetch_distance=cfg.vrp.prefetch_distance)
                tile = VrpTile(self.sim, name, port, home_of, model,
                               commit_log=self.commit_log)
            else:
                tile = TileBase(self.sim, name, port, home_of,
                                max_outstanding=32,
                                commit_log=self.commit_log)
            self.tiles.append(tile)

        if cfg.mem.direct:
            self.memory = DirectMemory(
                self.sim, mem_port, latency=cfg.mem.latency_cycles,
                bandwidth_bytes_per_cycle=cfg.mem.bandwidth_bytes_per_cycle)
            self.bridge = None
        else:
            self.bridge = C2CBridge(
                self.sim, self.mesh.attach(bridge_node), self.link,
                latency=cfg.mem.latency_cycles,
                bandwidth_bytes_per_cycle=cfg.mem.bandwidth_bytes_per_cycle)
            self.memory = self.bridge

    def tile(self, name: str) -> TileBase:
        for t in self.tiles:
            if t.name == name:
                return t
        raise KeyError(name)

    def run(self, stop: Optional[int] = None):
        """Advance to `stop`, else to quiescence (bounded by max_cycles)."""
        limit = self.cfg.max_cycles
        return self.sim.run_until(limit if stop is None else min(stop, limit))

    def preload_region(self, base: int, nbytes: int,
                       value_of=None) -> None:
        """Install a line-aligned region straight into the home slices
        (warm-up helper: no traffic, no directory holders)."""
        from .protocol import LINE_BYTES, ZERO_LINE
        for off in range(0, nbytes, LINE_BYTES):
            line = base + off
            data = value_of(line) if value_of else ZERO_LINE
            self.slices[slice_for(line, self.interleave)].preload(line, data)

    # -- audits ---------------------------------------------------------------

    def check_inclusion(self) -> list[str]:
        """Every line a tile holds must be tracked by its home slice."""
        problems = []
        for tile in self.tiles:
            node = tile.ctl.port.node_id
            for line, state in tile.ctl.valid_lines():
                home = self.slices[slice_for(line, self.interleave)]
                if not home.tracks(line, node):
                    problems.append(
                        f"{tile.name} holds {line:#x} ({state}) but "
                        f"{home.name} does not track it")
        return problems

    def check_liveness(self) -> list[str]:
        if self.sim.injected != self.sim.completed:
            return [f"injected {self.sim.injected} != completed "
                    f"{self.sim.completed}"]
        return []
