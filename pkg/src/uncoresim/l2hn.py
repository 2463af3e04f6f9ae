"""Combined L2 cache slice and Home Node directory controller.

Each slice owns a subset of the address space (programmable interleave),
an inclusive 8-way write-back array with tree-PLRU replacement, and the
coherence directory: one presence bit-vector and home state per tag entry.
The pipeline accepts at most one new request and one response per cycle;
same-line requests are serialized behind a per-line hazard that is held
until the requester's completion acknowledgment.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .kernel import Component, ProtocolError, Simulator
from .noc import EndpointPort, NodeId
from .protocol import (
    Channel, CoherenceMessage, CommitLog, Grant, LINE_BYTES, MessageKind,
    ZERO_LINE, atomic_apply, read_word, write_word,
)


# ---------------------------------------------------------------------------
# address interleaving
# ---------------------------------------------------------------------------

INTERLEAVE_GRANULES = (64, 256, 4096)


@dataclass(frozen=True)
class InterleaveMap:
    granule: int
    num_slices: int

    def __post_init__(self):
        if self.granule not in INTERLEAVE_GRANULES:
            raise ValueError(
                f"granule {self.granule} not in {INTERLEAVE_GRANULES}")
        if self.num_slices < 1:
            raise ValueError("num_slices must be positive")


def slice_for(addr: int, imap: InterleaveMap) -> int:
    return (addr // imap.granule) % imap.num_slices


# ---------------------------------------------------------------------------
# tree-PLRU
# ---------------------------------------------------------------------------

class TreePLRU:
    """Binary-tree pseudo-LRU over `ways` ways (ways-1 bits per set).

    Bit convention: 0 steers the victim walk to the left child, 1 to the
    right; touching a way flips every node on its path to point away.
    """

    def __init__(self, num_sets: int, ways: int):
        if ways & (ways - 1):
            raise ValueError("ways must be a power of two")
        self.ways = ways
        self.bits = [0] * num_sets

    def victim(self, set_idx: int) -> int:
        bits = self.bits[set_idx]
        node = 0
        while node < self.ways - 1:
            node = 2 * node + 1 + ((bits >> node) & 1)
        return node - (self.ways - 1)

    def touch(self, set_idx: int, way: int) -> None:
        bits = self.bits[set_idx]
        node = way + self.ways - 1
        while node > 0:
            parent = (node - 1) // 2
            if node == 2 * parent + 1:  # came from the left: point right
                bits |= 1 << parent
            else:
                bits &= ~(1 << parent)
            node = parent
        self.bits[set_idx] = bits


# ---------------------------------------------------------------------------
# slice structures
# ---------------------------------------------------------------------------

class HomeState(Enum):
    INVALID = "I"          # no tile holds the line
    SHARED = "S"           # one or more clean sharers
    EXCLUSIVE = "EM"       # exactly one tile holds E or M


@dataclass(slots=True)
class L2Line:
    way: int
    data: Optional[bytes]      # None while a fill is outstanding
    dirty: bool = False
    home_state: HomeState = HomeState.INVALID
    presence: int = 0


@dataclass(slots=True)
class HnTxn:
    msg: CoherenceMessage
    phase: str                 # snoop_wait | fill_wait | ack_wait | dmt_wait
    snoops_pending: int = 0
    absorbed: Optional[bytes] = None
    is_miss: bool = False


@dataclass(slots=True)
class EvictTxn:
    line: int
    data: Optional[bytes]
    dirty: bool
    presence: int
    snoops_pending: int = 0
    wb_issued: bool = False


@dataclass
class SliceGeometry:
    capacity: int = 256 * 1024
    ways: int = 8
    line: int = LINE_BYTES

    @property
    def sets(self) -> int:
        return self.capacity // (self.ways * self.line)

    def check(self) -> None:
        if self.sets * self.ways * self.line != self.capacity:
            raise ValueError("geometry identity violated")


class L2HomeSlice(Component):
    """One distributed-L2 slice with its directory controller."""

    def __init__(self, sim: Simulator, name: str, port: EndpointPort,
                 memory_node: NodeId, requesters: list[NodeId],
                 geometry: Optional[SliceGeometry] = None,
                 max_misses: int = 64, max_evictions: int = 64,
                 max_outstanding: int = 128,
                 commit_log: Optional[CommitLog] = None,
                 disable_back_invalidation: bool = False):
        super().__init__(sim, name)
        self.port = port
        self.memory_node = memory_node
        self.req_index = {node: i for i, node in enumerate(requesters)}
        self.req_nodes = list(requesters)
        self.geom = geometry or SliceGeometry()
        self.geom.check()
        self.num_sets = self.geom.sets
        self.ways = self.geom.ways
        self.tags: list[dict[int, L2Line]] = [dict() for _ in range(self.num_sets)]
        self.free_ways: list[list[int]] = [list(range(self.ways))
                                           for _ in range(self.num_sets)]
        self.plru = TreePLRU(self.num_sets, self.ways)
        self.max_misses = max_misses
        self.max_evictions = max_evictions
        self.max_outstanding = max_outstanding
        self.commit_log = commit_log
        self.disable_back_invalidation = disable_back_invalidation
        self.active: dict[int, HnTxn] = {}
        self.evictions: dict[int, EvictTxn] = {}
        self.hazard_q: dict[int, deque] = {}
        self.replay_q: deque = deque()
        self.miss_count = 0
        self.outstanding = 0
        self.stats = sim.stats.scope(name)
        self.history: list[str] = []

    # -- helpers ---------------------------------------------------------------

    def _log(self, *record) -> None:
        self.history.append((self.sim.now, *record))
        if len(self.history) > 256:
            del self.history[:128]

    def dump_history(self) -> list[str]:
        return [f"[{h[0]}] {self.name}: " +
                " ".join(str(x) for x in h[1:]) for h in self.history]

    def _set_of(self, line: int) -> int:
        return (line >> 6) % self.num_sets

    def _lookup(self, line: int) -> Optional[L2Line]:
        return self.tags[self._set_of(line)].get(line)

    def _bump(self, key: str, n: int = 1) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def _high_water(self, key: str, value: int) -> None:
        if value > self.stats.get(key, 0):
            self.stats[key] = value

    def _hazard(self, line: int) -> bool:
        return line in self.active or line in self.evictions

    def _send(self, msg: CoherenceMessage) -> None:
        self.port.send_message(msg)

    def _snoop(self, line: int, kind: MessageKind, presence: int,
               txn_id: int) -> int:
        targets = [self.req_nodes[i] for i in range(len(self.req_nodes))
                   if presence & (1 << i)]
        if not targets:
            return 0
        msg = CoherenceMessage(kind=kind, txn_id=txn_id,
                               src=self.port.node_id, dst=targets[0], line=line)
        self.port.send_message(msg, multicast=targets)
        return len(targets)

    def busy(self) -> bool:
        return bool(self.active or self.evictions or self.replay_q
                    or self.hazard_q or not self.port.outbox_empty())

    # -- per-cycle step ----------------------------------------------------------

    def step(self) -> None:
        if self.port._in_count or self.replay_q:
            self._response_pipeline()
            self._request_pipeline()
            self._check_occupancy()

    def _check_occupancy(self) -> None:
        if self.miss_count > self.max_misses:
            raise ProtocolError(f"{self.name}: miss entries {self.miss_count} "
                                f"> {self.max_misses}", self.dump_history())
        if len(self.evictions) > self.max_evictions:
            raise ProtocolError(f"{self.name}: evict entries {len(self.evictions)} "
                                f"> {self.max_evictions}", self.dump_history())
        if self.outstanding > self.max_outstanding:
            raise ProtocolError(f"{self.name}: outstanding {self.outstanding} "
                                f"> {self.max_outstanding}", self.dump_history())
        self._high_water("hw_misses", self.miss_count)
        self._high_water("hw_evictions", len(self.evictions))
        self._high_water("hw_outstanding", self.outstanding)

    # -- response pipeline ---------------------------------------------------------

    def _response_pipeline(self) -> None:
        flit = self.port.pop_delivery(Channel.RSP)
        if flit is None:
            head = self.port.peek_delivery(Channel.DAT)
            if head is not None and head.message.kind in (
                    MessageKind.SnpRespData, MessageKind.CompData):
                flit = self.port.pop_delivery(Channel.DAT)
        if flit is None:
            return
        self.sim.progress()
        msg = flit.message
        kind = msg.kind
        line = msg.line
        if kind is MessageKind.CompAck:
            self._on_comp_ack(line)
        elif kind is MessageKind.SnpResp:
            self._on_snoop_response(line, None)
        elif kind is MessageKind.SnpRespData:
            self._on_snoop_response(line, msg.payload)
        elif kind is MessageKind.CompData:
            self._on_fill(line, msg.payload)
        elif kind is MessageKind.Comp:
            self._on_memory_wb_ack(line)
        else:
            raise ProtocolError(f"{self.name}: unexpected response {kind.name}",
                                self.dump_history())

    def _on_comp_ack(self, line: int) -> None:
        txn = self.active.get(line)
        if txn is None or txn.phase not in ("ack_wait", "dmt_wait"):
            raise ProtocolError(f"{self.name}: stray CompAck for {line:#x}",
                                self.dump_history())
        if txn.phase == "dmt_wait":
            self.miss_count -= 1
        del self.active[line]
        self.outstanding -= 1
        self._release_hazard(line)
        self._log("complete", txn.msg.txn_id, hex(line))

    def _on_snoop_response(self, line: int, payload: Optional[bytes]) -> None:
        ev = self.evictions.get(line)
        if ev is not None:
            ev.snoops_pending -= 1
            if payload is not None:
                ev.data = payload
                ev.dirty = True
            if ev.snoops_pending == 0:
                self._evict_after_snoops(ev)
            return
        txn = self.active.get(line)
        if txn is None or txn.phase != "snoop_wait":
            raise ProtocolError(f"{self.name}: stray snoop response {line:#x}",
                                self.dump_history())
        txn.snoops_pending -= 1
        if payload is not None:
            txn.absorbed = payload
        if txn.snoops_pending == 0:
            entry = self._lookup(line)
            if txn.absorbed is not None:
                entry.data = txn.absorbed
                entry.dirty = True
            self._conclude(txn, entry)

    def _on_fill(self, line: int, payload: bytes) -> None:
        txn = self.active.get(line)
        if txn is None or txn.phase != "fill_wait":
            raise ProtocolError(f"{self.name}: stray fill for {line:#x}",
                                self.dump_history())
        entry = self._lookup(line)
        entry.data = payload
        entry.dirty = False
        self.miss_count -= 1
        self._conclude(txn, entry)

    def _on_memory_wb_ack(self, line: int) -> None:
        ev = self.evictions.get(line)
        if ev is None or not ev.wb_issued:
            raise ProtocolError(f"{self.name}: stray write-back ack {line:#x}",
                                self.dump_history())
        self._finish_eviction(ev)

    # -- request pipeline ------------------------------------------------------------

    def _request_pipeline(self) -> None:
        msg = None
        from_replay = False
        if self.replay_q:
            msg = self.replay_q[0]
            from_replay = True
        else:
            flit = self.port.peek_delivery(Channel.REQ)
            if flit is not None:
                msg = flit.message
            else:
                head = self.port.peek_delivery(Channel.DAT)
                if head is not None and head.message.kind is MessageKind.WriteBackFull:
                    msg = head.message
        if msg is None:
            return
        line = msg.line
        if self._hazard(line):
            if from_replay:
                # the replayed head re-collided; rotate it back to hazard_q
                self.replay_q.popleft()
                self.hazard_q.setdefault(line, deque()).append(msg)
                return
            if self.outstanding >= self.max_outstanding:
                self._bump("stall_outstanding")
                return  # backpressure: leave at the NoC input
            self._pop_request(from_replay, msg)
            self.outstanding += 1
            self.hazard_q.setdefault(line, deque()).append(msg)
            self.sim.progress()
            return
        if not self._try_accept(msg, from_replay):
            self._bump("stall_resources")

    def _pop_request(self, from_replay: bool, msg: CoherenceMessage) -> None:
        if from_replay:
            self.replay_q.popleft()
        else:
            ch = msg.channel
            taken = self.port.pop_delivery(ch)
            assert taken.message is msg

    def _release_hazard(self, line: int) -> None:
        q = self.hazard_q.get(line)
        if q:
            self.replay_q.append(q.popleft())
            if not q:
                del self.hazard_q[line]

    def _try_accept(self, msg: CoherenceMessage, from_replay: bool) -> bool:
        """Process one request if every needed resource is free this cycle.

        Replayed messages already hold their outstanding slot from the cycle
        they were first accepted into the hazard queue.
        """
        kind = msg.kind
        line = msg.line
        entry = self._lookup(line)
        # write-backs and clean-evict notices complete in one cycle
        if kind in (MessageKind.WriteBackFull, MessageKind.Evict):
            self._pop_request(from_replay, msg)
            if from_replay:
                self.outstanding -= 1
                self._release_hazard(line)
            self._accept_eviction_notice(msg, entry)
            self.sim.progress()
            return True
        if not from_replay and self.outstanding >= self.max_outstanding:
            self._bump("stall_outstanding")
            return False
        if entry is not None and entry.data is not None:
            self._pop_request(from_replay, msg)
            if not from_replay:
                self.outstanding += 1
            self._accept_hit(msg, entry)
            self.sim.progress()
            return True
        # miss path: a miss entry is required; allocation may force an eviction
        if self.miss_count >= self.max_misses:
            self._bump("stall_mshr")
            return False
        dmt = kind is MessageKind.NonTemporalRead
        if not dmt:
            sidx = self._set_of(line)
            if not self.free_ways[sidx]:
                victim = self._pick_victim(sidx)
                if victim is None:
                    return False  # every way transiently locked; retry
                vic_entry = self.tags[sidx][victim]
                needs_buffer = vic_entry.dirty or vic_entry.presence
                if needs_buffer and len(self.evictions) >= self.max_evictions:
                    self._bump("stall_evict")
                    return False
                self._start_eviction(victim, vic_entry)
        self._pop_request(from_replay, msg)
        if not from_replay:
            self.outstanding += 1
        self._accept_miss(msg, dmt)
        self.sim.progress()
        return True

    # -- eviction notices from tiles ----------------------------------------------

    def _accept_eviction_notice(self, msg: CoherenceMessage,
                                entry: Optional[L2Line]) -> None:
        idx = self.req_index.get(msg.src)
        fresh = entry is not None and idx is not None \
            and entry.presence & (1 << idx)
        if fresh:
            entry.presence &= ~(1 << idx)
            if msg.kind is MessageKind.WriteBackFull:
                entry.data = msg.payload
                entry.dirty = True
            if entry.presence == 0:
                entry.home_state = HomeState.INVALID
            elif msg.kind is MessageKind.WriteBackFull or \
                    entry.home_state is HomeState.EXCLUSIVE:
                entry.home_state = HomeState.SHARED if entry.presence else \
                    HomeState.INVALID
        else:
            self._bump("stale_writebacks")
        self._send(CoherenceMessage(
            kind=MessageKind.Comp, txn_id=msg.txn_id,
            src=self.port.node_id, dst=msg.src, line=msg.line))
        self._bump("evict_notices")

    # -- hits ------------------------------------------------------------------------

    def _accept_hit(self, msg: CoherenceMessage, entry: L2Line) -> None:
        self._bump("hits")
        kind = msg.kind
        line = msg.line
        txn = HnTxn(msg=msg, phase="ack_wait")
        self.active[line] = txn
        idx = self.req_index.get(msg.src)
        if idx is not None and entry.presence & (1 << idx) and kind in (
                MessageKind.ReadShared, MessageKind.ReadUnique):
            raise ProtocolError(
                f"{self.name}: {kind.name} from a current holder {msg.src!r}",
                self.dump_history())
        if kind is MessageKind.NonTemporalRead:
            if entry.home_state is HomeState.EXCLUSIVE:
                txn.phase = "snoop_wait"
                txn.snoops_pending = self._snoop(
                    line, MessageKind.SnpShared, entry.presence, msg.txn_id)
                entry.home_state = HomeState.SHARED
            else:
                self._conclude(txn, entry)
            return
        if kind is MessageKind.AtomicOp:
            if entry.presence:
                txn.phase = "snoop_wait"
                txn.snoops_pending = self._snoop(
                    line, MessageKind.SnpUnique, entry.presence, msg.txn_id)
            else:
                self._conclude(txn, entry)
            return
        if kind is MessageKind.ReadShared:
            if entry.home_state is HomeState.EXCLUSIVE:
                txn.phase = "snoop_wait"
                txn.snoops_pending = self._snoop(
                    line, MessageKind.SnpShared, entry.presence, msg.txn_id)
            else:
                self._conclude(txn, entry)
            return
        if kind in (MessageKind.ReadUnique, MessageKind.CleanUnique):
            others = entry.presence
            if idx is not None and kind is MessageKind.CleanUnique:
                others &= ~(1 << idx)
            if others:
                txn.phase = "snoop_wait"
                txn.snoops_pending = self._snoop(
                    line, MessageKind.SnpUnique, others, msg.txn_id)
            else:
                self._conclude(txn, entry)
            return
        raise ProtocolError(f"{self.name}: unexpected request {kind.name}",
                            self.dump_history())

    # -- misses ------------------------------------------------------------------------

    def _accept_miss(self, msg: CoherenceMessage, dmt: bool) -> None:
        self._bump("misses")
        line = msg.line
        self.miss_count += 1
        if dmt:
            self._bump("bypasses")
            txn = HnTxn(msg=msg, phase="dmt_wait", is_miss=True)
            self.active[line] = txn
            # memory responds straight to the requester; we only see the ack
            self._send(CoherenceMessage(
                kind=MessageKind.NonTemporalRead, txn_id=msg.txn_id,
                src=msg.src, dst=self.memory_node, line=line))
            return
        sidx = self._set_of(line)
        way = self.free_ways[sidx].pop()
        self.tags[sidx][line] = L2Line(way=way, data=None)
        txn = HnTxn(msg=msg, phase="fill_wait", is_miss=True)
        self.active[line] = txn
        self._send(CoherenceMessage(
            kind=MessageKind.NonTemporalRead, txn_id=msg.txn_id,
            src=self.port.node_id, dst=self.memory_node, line=line))

    def _pick_victim(self, sidx: int) -> Optional[int]:
        victim_way = self.plru.victim(sidx)
        for line, entry in self.tags[sidx].items():
            if entry.way == victim_way:
                if line in self.active or line in self.evictions \
                        or entry.data is None:
                    return None
                return line
        raise ProtocolError(f"{self.name}: no line on victim way", self.dump_history())

    def _start_eviction(self, line: int, entry: L2Line) -> None:
        sidx = self._set_of(line)
        del self.tags[sidx][line]
        self.free_ways[sidx].append(entry.way)
        self._bump("evictions")
        ev = EvictTxn(line=line, data=entry.data, dirty=entry.dirty,
                      presence=entry.presence)
        self.evictions[line] = ev
        if entry.presence and not self.disable_back_invalidation:
            ev.snoops_pending = self._snoop(
                line, MessageKind.SnpUnique, entry.presence, 0)
            self._bump("back_invalidations", ev.snoops_pending)
            return
        self._evict_after_snoops(ev)

    def _evict_after_snoops(self, ev: EvictTxn) -> None:
        if ev.dirty:
            ev.wb_issued = True
            self._send(CoherenceMessage(
                kind=MessageKind.WriteBackFull, txn_id=0,
                src=self.port.node_id, dst=self.memory_node,
                line=ev.line, payload=ev.data))
        else:
            self._finish_eviction(ev)  # clean: no memory traffic

    def _finish_eviction(self, ev: EvictTxn) -> None:
        del self.evictions[ev.line]
        self._release_hazard(ev.line)
        self._log("evicted", hex(ev.line), ev.dirty)

    # -- transaction conclusion ------------------------------------------------------

    def _conclude(self, txn: HnTxn, entry: Optional[L2Line]) -> None:
        """All data and snoop responses are in: update the directory and
        answer the requester. The hazard stays until CompAck."""
        msg = txn.msg
        kind = msg.kind
        line = msg.line
        idx = self.req_index.get(msg.src)
        txn.phase = "ack_wait"
        if kind is MessageKind.NonTemporalRead:
            self._bump("bypasses")
            self._respond_data(msg, entry.data, Grant.NONE)
            self._touch_if_tracked(line, entry, touch=False)
            return
        if kind is MessageKind.AtomicOp:
            self._apply_atomic(txn, entry)
            return
        if kind is MessageKind.ReadShared:
            if entry.presence == 0:
                entry.home_state = HomeState.EXCLUSIVE
                grant = Grant.E
            else:
                entry.home_state = HomeState.SHARED
                grant = Grant.S
            entry.presence |= 1 << idx
            self._respond_data(msg, entry.data, grant)
            self._touch_if_tracked(line, entry)
            return
        if kind in (MessageKind.ReadUnique, MessageKind.CleanUnique):
            still_holds = kind is MessageKind.CleanUnique and \
                entry.presence & (1 << idx)
            entry.presence = 1 << idx
            entry.home_state = HomeState.EXCLUSIVE
            if still_holds:
                self._send(CoherenceMessage(
                    kind=MessageKind.Comp, txn_id=msg.txn_id,
                    src=self.port.node_id, dst=msg.src, line=line))
            else:
                self._respond_data(msg, entry.data, Grant.E)
            self._touch_if_tracked(line, entry)
            return
        raise ProtocolError(f"{self.name}: conclude on {kind.name}", self.dump_history())

    def _touch_if_tracked(self, line: int, entry: L2Line, touch: bool = True) -> None:
        if touch:
            self.plru.touch(self._set_of(line), entry.way)

    def _respond_data(self, msg: CoherenceMessage, data: bytes,
                      grant: Grant) -> None:
        self._send(CoherenceMessage(
            kind=MessageKind.CompData, txn_id=msg.txn_id,
            src=self.port.node_id, dst=msg.src, line=msg.line,
            payload=data, grant=grant))

    def _apply_atomic(self, txn: HnTxn, entry: L2Line) -> None:
        msg = txn.msg
        pre_image = entry.data
        old = read_word(pre_image, msg.offset, msg.width)
        new, _ = atomic_apply(msg.atomic_kind, old, msg.atomic_operand,
                              msg.width, msg.atomic_compare)
        entry.data = write_word(pre_image, msg.offset, msg.width, new)
        entry.dirty = True
        entry.presence = 0
        entry.home_state = HomeState.INVALID
        self._bump("atomics")
        if self.commit_log is not None:
            self.commit_log.append(
                cycle=self.sim.now, node=self.name, txn_id=msg.txn_id,
                op=f"A:{msg.atomic_kind.value}", line=msg.line,
                offset=msg.offset, width=msg.width, operand=msg.atomic_operand,
                compare=msg.atomic_compare, observed=pre_image)
        self._respond_data(msg, pre_image, Grant.NONE)
        self._touch_if_tracked(msg.line, entry)

    # -- audits ---------------------------------------------------------------------

    def tracks(self, line: int, requester: NodeId) -> bool:
        """True if this slice currently accounts for `requester` holding `line`."""
        idx = self.req_index.get(requester)
        if idx is None:
            return False
        entry = self._lookup(line)
        if entry is not None and entry.presence & (1 << idx):
            return True
        ev = self.evictions.get(line)
        return ev is not None and bool(ev.presence & (1 << idx))

    def resident(self, line: int) -> bool:
        return self._lookup(line) is not None

    def occupancy(self) -> int:
        return sum(len(s) for s in self.tags)

    def preload(self, line: int, data: bytes) -> None:
        """Install a line directly (warm-up helper; no directory holders)."""
        sidx = self._set_of(line)
        if line in self.tags[sidx]:
            self.tags[sidx][line].data = data
            return
        if not self.free_ways[sidx]:
            raise ValueError("preload into a full set")
        way = self.free_ways[sidx].pop()
        self.tags[sidx][line] = L2Line(way=way, data=data)
        self.plru.touch(sidx, way)
