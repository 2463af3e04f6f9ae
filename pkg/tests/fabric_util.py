"""Hand-wired test fabric: L1 agents + L2/HN slices + memory on a 2x2 mesh."""

from uncoresim.c2c import DirectMemory
from uncoresim.kernel import Component, Simulator
from uncoresim.l2hn import InterleaveMap, L2HomeSlice, SliceGeometry, slice_for
from uncoresim.noc import Mesh, NodeId
from uncoresim.protocol import CommitLog, L1CacheController, oracle_check

AGENT_NODES = [NodeId(0, 0, 0), NodeId(1, 0, 0), NodeId(0, 1, 0), NodeId(1, 1, 0)]
SLICE_NODES = [NodeId(0, 0, 1), NodeId(1, 0, 1), NodeId(1, 1, 1)]
MEM_NODE = NodeId(0, 1, 1)


class Agent(Component):
    def __init__(self, sim, name, port, home_of, log, outstanding=32,
                 capacity=32768):
        super().__init__(sim, name)
        self.ctl = L1CacheController(sim, name, port, home_of,
                                     capacity=capacity,
                                     max_outstanding=outstanding,
                                     commit_log=log)

    def step(self):
        self.ctl.step()

    def busy(self):
        return self.ctl.busy()


class Fabric:
    def __init__(self, seed=0, num_agents=2, num_slices=2, mem_latency=20,
                 mem_bw=64.0, outstanding=32, l1_capacity=32768,
                 geometry=None, fault_no_backinval=False, max_misses=64,
                 max_evictions=64, max_outstanding=128):
        self.sim = Simulator(seed=seed)
        self.mesh = Mesh(self.sim, 2, 2)
        self.log = CommitLog()
        self.slice_nodes = SLICE_NODES[:num_slices]
        imap = InterleaveMap(granule=64, num_slices=num_slices)
        self.imap = imap

        def home_of(line):
            return self.slice_nodes[slice_for(line, imap)]

        requesters = AGENT_NODES[:num_agents]
        self.slices = [
            L2HomeSlice(self.sim, f"l2hn{i}", self.mesh.attach(node), MEM_NODE,
                        requesters, geometry=geometry,
                        commit_log=self.log, max_misses=max_misses,
                        max_evictions=max_evictions,
                        max_outstanding=max_outstanding,
                        disable_back_invalidation=fault_no_backinval)
            for i, node in enumerate(self.slice_nodes)]
        self.agents = [
            Agent(self.sim, f"agent{i}", self.mesh.attach(node), home_of,
                  self.log, outstanding=outstanding, capacity=l1_capacity)
            for i, node in enumerate(requesters)]
        self.memory = DirectMemory(self.sim, self.mesh.attach(MEM_NODE),
                                   latency=mem_latency,
                                   bandwidth_bytes_per_cycle=mem_bw)

    def run(self, stop=None):
        stats = self.sim.run_until(stop)
        assert stats.deadlock is None, stats.deadlock
        return stats

    def check_oracle(self):
        violations = oracle_check(self.log)
        assert violations == [], "\n".join(str(v) for v in violations)

    def check_inclusion(self):
        for agent in self.agents:
            node = agent.ctl.port.node_id
            for line, state in agent.ctl.valid_lines():
                home = self.slices[slice_for(line, self.imap)]
                assert home.tracks(line, node), \
                    f"{agent.name} holds {line:#x} ({state}) untracked at home"


def make_single_set_fabric(seed=0):
    """One agent, one single-set (8-way) slice: every line contends."""
    return Fabric(seed=seed, num_agents=1, num_slices=1,
                  geometry=SliceGeometry(capacity=8 * 64), l1_capacity=512,
                  mem_latency=4)
