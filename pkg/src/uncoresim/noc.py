"""2D-mesh network of crosspoint routers with four virtual channels.

Each crosspoint (XP) has four mesh links and two device ports. Every buffer
in the fabric is covered by credit-based flow control per (link, channel):
a flit only ever leaves a buffer when the next buffer has a reserved slot,
so nothing is dropped and overflow is structurally impossible. Routing is
dimension-ordered (X fully, then Y); snoops may carry a multicast target set
that is forked in-network where the dimension-ordered paths diverge.

Internally inputs and outputs are addressed by small integers
(N, E, S, W, P0, P1 = 0..5); the string forms appear in traces and audits.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from .kernel import Component, Simulator
from .protocol import Channel, CoherenceMessage, LINE_BYTES

CHANNELS = (Channel.REQ, Channel.RSP, Channel.DAT, Channel.SNP)
_INJECT_KEY = {ch: f"inject_{ch.name}" for ch in CHANNELS}
_DELIVER_KEY = {ch: f"deliver_{ch.name}" for ch in CHANNELS}
_CH_NAME = {ch: ch.name for ch in CHANNELS}

INPUT_KEYS = ("N", "E", "S", "W", "P0", "P1")
_DIR_IDX = {"N": 0, "E": 1, "S": 2, "W": 3}
_IDX_NAME = INPUT_KEYS
_OPP = (2, 3, 0, 1)                                # N<->S, E<->W
_ROUTE_CACHE: dict = {}
_DELTA_I = ((0, 1), (1, 0), (0, -1), (-1, 0))      # N, E, S, W


@dataclass(frozen=True, order=True)
class NodeId:
    x: int
    y: int
    port: int

    def __post_init__(self):
        object.__setattr__(self, "_h", hash((self.x, self.y, self.port)))

    def __hash__(self):
        return self._h

    def __repr__(self):
        return f"({self.x},{self.y},p{self.port})"


def route(src: NodeId, dst: NodeId) -> tuple[str, ...]:
    """Dimension-order hop list: all X moves first, then all Y moves."""
    hops = []
    dx = dst.x - src.x
    hops += ["E"] * dx if dx > 0 else ["W"] * (-dx)
    dy = dst.y - src.y
    hops += ["N"] * dy if dy > 0 else ["S"] * (-dy)
    return tuple(hops)


def first_hop(x: int, y: int, dst: NodeId) -> Optional[str]:
    """Next dimension-order direction from XP (x, y) toward dst (None = local)."""
    if dst.x > x:
        return "E"
    if dst.x < x:
        return "W"
    if dst.y > y:
        return "N"
    if dst.y < y:
        return "S"
    return None


def _first_hop_idx(x: int, y: int, dst: NodeId) -> int:
    """Output index toward dst: a mesh direction, or the target device port."""
    if dst.x > x:
        return 1
    if dst.x < x:
        return 3
    if dst.y > y:
        return 0
    if dst.y < y:
        return 2
    return 4 + dst.port


_flit_seq = 0


class Flit:
    """One per-channel transfer unit; DAT flits carry a 64-byte beat."""

    __slots__ = ("channel", "message", "data_beat", "route", "iroute", "hop",
                 "multicast", "src", "dst", "seq", "injected_at")

    def __init__(self, channel: Channel, message: CoherenceMessage,
                 src: NodeId, dst: NodeId,
                 hops: tuple[str, ...] = (),
                 multicast: Optional[list[NodeId]] = None,
                 iroute: Optional[tuple[int, ...]] = None):
        global _flit_seq
        self.channel = channel
        self.message = message
        self.data_beat = message.payload if channel is Channel.DAT else None
        if channel is not Channel.DAT and message.payload is not None:
            raise ValueError("non-DAT flit cannot carry a data beat")
        self.route = hops
        self.iroute = iroute if iroute is not None else \
            (tuple(_DIR_IDX[h] for h in hops) if hops else ())
        self.hop = 0
        self.multicast = multicast  # remaining targets, mutated at forks
        self.src = src
        self.dst = dst
        self.seq = _flit_seq
        _flit_seq += 1
        self.injected_at = 0

    def __repr__(self):
        return (f"Flit({self.channel.name} {self.message.kind.name} "
                f"{self.src}->{self.dst} seq={self.seq})")


class EndpointPort:
    """A device port on an XP: per-channel outbox/inbox with credit flow.

    Endpoints inject at most one flit per channel per cycle; deliveries are
    consumed at most one per channel per cycle through pop_delivery, which
    frees the inbox slot back to the crosspoint.
    """

    def __init__(self, mesh: "Mesh", node_id: NodeId, depth: int):
        self.mesh = mesh
        self.node_id = node_id
        self.outbox: dict[Channel, deque] = {ch: deque() for ch in CHANNELS}
        self.inbox: dict[Channel, deque] = {ch: deque() for ch in CHANNELS}
        self.inject_credits: dict[Channel, int] = {ch: depth for ch in CHANNELS}
        self._last_inject: dict[Channel, int] = {ch: -1 for ch in CHANNELS}
        self._out_count = 0
        self._in_count = 0
        self.stats = mesh.sim.stats.scope(f"port{node_id!r}")

    def send_message(self, msg: CoherenceMessage,
                     multicast: Optional[list[NodeId]] = None) -> None:
        if multicast is None:
            pair = (self.node_id, msg.dst)
            cached = _ROUTE_CACHE.get(pair)
            if cached is None:
                hops = route(self.node_id, msg.dst)
                cached = (hops, tuple(_DIR_IDX[h] for h in hops))
                _ROUTE_CACHE[pair] = cached
            flit = Flit(msg.channel, msg, self.node_id, msg.dst, cached[0],
                        iroute=cached[1])
        else:
            flit = Flit(msg.channel, msg, self.node_id, msg.dst, (),
                        multicast=sorted(multicast))
        self.outbox[msg.channel].append(flit)
        self._out_count += 1
        self.mesh._out_total += 1
        self.mesh.sim._progress += 1

    def try_inject(self, flit: Flit) -> bool:
        """Raw injection: accepted iff a credit is held for the first hop."""
        now = self.mesh.sim.now
        ch = flit.channel
        if self._last_inject[ch] == now:
            raise RuntimeError(
                f"{self.node_id!r}: second same-cycle injection on {ch.name}")
        if self.inject_credits[ch] <= 0:
            return False
        self._last_inject[ch] = now
        self.inject_credits[ch] -= 1
        flit.injected_at = now
        self.mesh.launch_injection(self, flit)
        return True

    def pop_delivery(self, channel: Channel) -> Optional[Flit]:
        box = self.inbox[channel]
        if not box:
            return None
        flit = box.popleft()
        self._in_count -= 1
        self.mesh.return_endpoint_credit(self.node_id, channel)
        return flit

    def peek_delivery(self, channel: Channel) -> Optional[Flit]:
        box = self.inbox[channel]
        return box[0] if box else None

    def outbox_empty(self) -> bool:
        return self._out_count == 0


class Crosspoint:
    """Router node: four mesh links plus two device ports, per-channel
    input buffers and round-robin output arbitration."""

    __slots__ = ("x", "y", "inputs", "occ", "rr", "neighbors", "ports",
                 "ckeys", "ret_keys")

    def __init__(self, x: int, y: int):
        self.x = x
        self.y = y
        # inputs[channel][input index] -> deque of flits
        self.inputs = [[deque() for _ in range(6)] for _ in range(4)]
        self.occ = [0, 0, 0, 0]
        self.rr = [[-1] * 4 for _ in range(6)]       # [out][channel]
        self.neighbors: list[Optional["Crosspoint"]] = [None] * 4
        self.ports: dict[int, EndpointPort] = {}
        self.ckeys = [[None] * 4 for _ in range(6)]     # [out][ch] -> key
        self.ret_keys = [[None] * 4 for _ in range(6)]  # [in][ch] -> key

    @property
    def total_occupancy(self) -> int:
        return self.occ[0] + self.occ[1] + self.occ[2] + self.occ[3]


class Mesh(Component):
    """The whole fabric as one kernel component.

    Per cycle: commit in-flight arrivals and credit returns, drain endpoint
    outboxes (one flit per channel per port), then arbitrate every occupied
    crosspoint. Hop latency is router_latency + link_latency cycles;
    injections take link_latency only.
    """

    def __init__(self, sim: Simulator, cols: int, rows: int,
                 buffer_depth: int = 4, endpoint_depth: int = 4,
                 router_latency: int = 1, link_latency: int = 1):
        super().__init__(sim, "noc")
        self.cols = cols
        self.rows = rows
        self.buffer_depth = buffer_depth
        self.endpoint_depth = endpoint_depth
        self.hop_delay = router_latency + link_latency
        self.inject_delay = link_latency
        self.credit_delay = 1
        self.xps = [[Crosspoint(x, y) for y in range(rows)] for x in range(cols)]
        self.xp_list: list[Crosspoint] = [self.xps[x][y]
                                          for y in range(rows) for x in range(cols)]
        for xp in self.xp_list:
            for d, (dx, dy) in enumerate(_DELTA_I):
                nx, ny = xp.x + dx, xp.y + dy
                if 0 <= nx < cols and 0 <= ny < rows:
                    xp.neighbors[d] = self.xps[nx][ny]
        self.ports: dict[NodeId, EndpointPort] = {}
        # credits[(linkkey, channel)]; linkkeys: ("xp", x, y, dir) for mesh
        # links out of (x,y), ("dlv", node) for XP->endpoint inboxes.
        self.credits: dict[tuple, int] = {}
        for xp in self.xp_list:
            for d in range(4):
                if xp.neighbors[d] is not None:
                    for ch in CHANNELS:
                        self.credits[(("xp", xp.x, xp.y, _IDX_NAME[d]), ch)] = \
                            buffer_depth
        self._flights: dict[int, deque] = {}
        self._delay_order: list[int] = []
        self._credit_flights: deque = deque()
        self._out_total = 0
        self.stats = sim.stats.scope("noc")
        self._busy_items = 0

    # -- wiring ---------------------------------------------------------------

    def attach(self, node_id: NodeId) -> EndpointPort:
        if node_id in self.ports:
            raise ValueError(f"port {node_id!r} already attached")
        if not (0 <= node_id.x < self.cols and 0 <= node_id.y < self.rows
                and node_id.port in (0, 1)):
            raise ValueError(f"node {node_id!r} outside mesh")
        port = EndpointPort(self, node_id, self.endpoint_depth)
        self.ports[node_id] = port
        xp = self.xps[node_id.x][node_id.y]
        idx = 4 + node_id.port
        if idx in xp.ports:
            raise ValueError(
                f"device port {node_id.port} at ({node_id.x},{node_id.y}) taken")
        xp.ports[idx] = port
        for ch in CHANNELS:
            self.credits[(("dlv", node_id), ch)] = self.endpoint_depth
        return port

    def set_channel_depth(self, channel: Channel, depth: int) -> None:
        """Override buffer depth on one channel fabric-wide (test knob)."""
        for key in list(self.credits):
            if key[1] is channel:
                self.credits[key] = depth

    # -- flight bookkeeping -----------------------------------------------------

    def _push_flight(self, delay: int, record: tuple) -> None:
        dq = self._flights.get(delay)
        if dq is None:
            dq = deque()
            self._flights[delay] = dq
            self._delay_order = sorted(self._flights)
        dq.append((self.sim.now + delay, record))
        self._busy_items += 1

    def launch_injection(self, port: EndpointPort, flit: Flit) -> None:
        node = port.node_id
        xp = self.xps[node.x][node.y]
        self._push_flight(self.inject_delay, (0, xp, 4 + node.port, flit))
        if flit.channel is Channel.DAT:
            port.stats["dat_bytes_out"] += LINE_BYTES
        self.stats[_INJECT_KEY[flit.channel]] += 1
        if self.sim.trace is not None:
            self.sim.emit_trace("noc", "inject", _CH_NAME[flit.channel],
                                flit.message.txn_id, flit.message.line,
                                repr(flit.src), repr(flit.dst))
        self.sim._progress += 1

    def return_endpoint_credit(self, node_id: NodeId, channel: Channel) -> None:
        self._credit_flights.append(
            (self.sim.now + self.credit_delay, (("dlv", node_id), channel)))
        self._busy_items += 1

    # -- per-cycle step -----------------------------------------------------------

    def busy(self) -> bool:
        if self._busy_items or self._out_total:
            return True
        return any(xp.total_occupancy for xp in self.xp_list)

    def step(self) -> None:
        now = self.sim.now
        self._commit(now)
        if self._out_total:
            self._drain_outboxes(now)
        for xp in self.xp_list:
            if xp.total_occupancy:
                self._arbitrate(xp, now)

    def _commit(self, now: int) -> None:
        cf = self._credit_flights
        while cf and cf[0][0] <= now:
            _, key = cf.popleft()
            if key[0] == "inj":
                _, port, ch = key
                port.inject_credits[ch] += 1
            else:
                self.credits[key] += 1
            self._busy_items -= 1
            self.sim._progress += 1
        for delay in self._delay_order:
            dq = self._flights[delay]
            if not dq or dq[0][0] > now:
                continue
            while dq and dq[0][0] <= now:
                _, rec = dq.popleft()
                self._busy_items -= 1
                if rec[0] == 0:  # arrive at a crosspoint input
                    _, xp, in_idx, flit = rec
                    xp.inputs[flit.channel][in_idx].append(flit)
                    xp.occ[flit.channel] += 1
                else:  # deliver to an endpoint
                    _, port, flit = rec
                    port.inbox[flit.channel].append(flit)
                    port._in_count += 1
                    if flit.channel is Channel.DAT:
                        port.stats["dat_bytes_in"] += LINE_BYTES
                    self.stats[_DELIVER_KEY[flit.channel]] += 1
                    if self.sim.trace is not None:
                        self.sim.emit_trace(
                            "noc", "deliver", _CH_NAME[flit.channel],
                            flit.message.txn_id, flit.message.line,
                            repr(flit.src), repr(port.node_id))
                self.sim._progress += 1

    def _drain_outboxes(self, now: int) -> None:
        for port in self.ports.values():
            if port._out_count == 0:
                continue
            for ch in CHANNELS:
                box = port.outbox[ch]
                if not box:
                    continue
                if port._last_inject[ch] == now:
                    continue
                if port.inject_credits[ch] <= 0:
                    continue
                flit = box.popleft()
                port._out_count -= 1
                self._out_total -= 1
                port.try_inject(flit)

    # -- routing / arbitration --------------------------------------------------

    def _needed_outputs(self, xp: Crosspoint, flit: Flit) -> list[int]:
        """Output indices this flit wants at this XP (multicast may fork)."""
        if flit.multicast is None:
            if flit.hop < len(flit.iroute):
                return [flit.iroute[flit.hop]]
            return [4 + flit.dst.port]
        outs = []
        seen = 0
        x, y = xp.x, xp.y
        for t in flit.multicast:
            o = _first_hop_idx(x, y, t)
            bit = 1 << o
            if not seen & bit:
                seen |= bit
                outs.append(o)
        return outs

    def _out_credit_key(self, xp: Crosspoint, out: int, ch: Channel):
        cached = xp.ckeys[out][ch]
        if cached is not None:
            return cached
        if out < 4:
            key = (("xp", xp.x, xp.y, _IDX_NAME[out]), ch)
        else:
            port = xp.ports.get(out)
            if port is None:
                raise RuntimeError(
                    f"flit routed to unattached port {_IDX_NAME[out]} at "
                    f"({xp.x},{xp.y})")
            key = (("dlv", port.node_id), ch)
        xp.ckeys[out][ch] = key
        return key

    def _arbitrate(self, xp: Crosspoint, now: int) -> None:
        occ = xp.occ
        for ch in CHANNELS:
            if not occ[ch]:
                continue
            inputs = xp.inputs[ch]
            # head flits and the outputs they are requesting
            requests: dict[int, list] = {}
            for idx in range(6):
                dq = inputs[idx]
                if not dq:
                    continue
                head = dq[0]
                if head.multicast is None:
                    iroute = head.iroute
                    hop = head.hop
                    out = iroute[hop] if hop < len(iroute) else \
                        4 + head.dst.port
                    cand = requests.get(out)
                    if cand is None:
                        requests[out] = [(idx, head)]
                    else:
                        cand.append((idx, head))
                    continue
                for out in self._needed_outputs(xp, head):
                    cand = requests.get(out)
                    if cand is None:
                        requests[out] = [(idx, head)]
                    else:
                        cand.append((idx, head))
            for out, cand in requests.items():
                if len(cand) == 1:
                    idx, head = cand[0]
                    if self._try_grant(xp, ch, out, idx, head, now):
                        xp.rr[out][ch] = idx
                    continue
                ptr = xp.rr[out][ch]
                # round-robin scan starting after the last winner
                cand.sort(key=lambda c: (c[0] - ptr - 1) % 6)
                for idx, head in cand:
                    if self._try_grant(xp, ch, out, idx, head, now):
                        xp.rr[out][ch] = idx
                        break

    def _try_grant(self, xp: Crosspoint, ch: Channel, out: int,
                   in_idx: int, flit: Flit, now: int) -> bool:
        ckey = self._out_credit_key(xp, out, ch)
        credits = self.credits
        if credits[ckey] <= 0:
            return False
        credits[ckey] -= 1
        if flit.multicast is None:
            # unicast fast path: dispatch and free the input slot inline
            if out < 4:
                flit.hop += 1
                self._push_flight(self.hop_delay,
                                  (0, xp.neighbors[out], _OPP[out], flit))
                self.stats["traversals"] += 1
                if self.sim.trace is not None:
                    self.sim.emit_trace(
                        "noc", "traverse", _CH_NAME[flit.channel],
                        flit.message.txn_id, flit.message.line,
                        f"({xp.x},{xp.y})", _IDX_NAME[out])
            else:
                self._push_flight(self.hop_delay, (1, xp.ports[out], flit))
            self.sim._progress += 1
            self._consume_input(xp, ch, in_idx, now)
        else:
            branch_targets = []
            rest = []
            x, y = xp.x, xp.y
            for t in flit.multicast:
                (branch_targets if _first_hop_idx(x, y, t) == out
                 else rest).append(t)
            if out < 4:
                child = Flit(flit.channel, flit.message, flit.src,
                             branch_targets[0], multicast=branch_targets)
                child.injected_at = flit.injected_at
                self._dispatch(xp, out, child, now)
            else:
                # local delivery: exactly one target lives on this port
                self._dispatch(xp, out, flit, now, copy_message_only=True)
            flit.multicast = rest
            if not rest:
                self._consume_input(xp, ch, in_idx, now)
        return True

    def _dispatch(self, xp: Crosspoint, out: int, flit: Flit, now: int,
                  copy_message_only: bool = False) -> None:
        if out < 4:
            nxt = xp.neighbors[out]
            if nxt is None:
                raise RuntimeError(
                    f"route leaves mesh at ({xp.x},{xp.y}) {_IDX_NAME[out]}")
            if flit.multicast is None:
                flit.hop += 1
            self._push_flight(self.hop_delay, (0, nxt, _OPP[out], flit))
            self.stats["traversals"] += 1
            if self.sim.trace is not None:
                self.sim.emit_trace("noc", "traverse", _CH_NAME[flit.channel],
                                    flit.message.txn_id, flit.message.line,
                                    f"({xp.x},{xp.y})", _IDX_NAME[out])
        else:
            port = xp.ports[out]
            if copy_message_only:
                dup = Flit(flit.channel, flit.message, flit.src, port.node_id)
                dup.injected_at = flit.injected_at
                self._push_flight(self.hop_delay, (1, port, dup))
            else:
                self._push_flight(self.hop_delay, (1, port, flit))
        self.sim._progress += 1

    def _consume_input(self, xp: Crosspoint, ch: Channel, in_idx: int,
                       now: int) -> None:
        xp.inputs[ch][in_idx].popleft()
        xp.occ[ch] -= 1
        # free slot: return one credit to whoever feeds this input
        key = xp.ret_keys[in_idx][ch]
        if key is None:
            if in_idx < 4:
                up = xp.neighbors[in_idx]
                key = (("xp", up.x, up.y, _IDX_NAME[_OPP[in_idx]]), ch)
            else:
                key = ("inj", xp.ports[in_idx], ch)
            xp.ret_keys[in_idx][ch] = key
        if key[0] == "inj":
            self._credit_flights.append((now + self.credit_delay, key))
            self._busy_items += 1
            if self.sim.trace is not None:
                self.sim.emit_trace("noc", "credit", _CH_NAME[ch], 0, 0,
                                    f"({xp.x},{xp.y})", repr(key[1].node_id))
            return
        self._credit_flights.append((now + self.credit_delay, key))
        self._busy_items += 1
        if self.sim.trace is not None:
            self.sim.emit_trace("noc", "credit", _CH_NAME[ch], 0, 0,
                                f"({xp.x},{xp.y})", _IDX_NAME[in_idx])

    # -- audits -------------------------------------------------------------------

    def audit_credits(self) -> None:
        """Assert per-(link, channel) credit conservation; raises on breakage."""
        in_flight_flits: dict[tuple, int] = {}
        in_flight_inj: dict[tuple, int] = {}
        for delay, dq in self._flights.items():
            for _, rec in dq:
                if rec[0] == 0:
                    _, xp, in_idx, flit = rec
                    if in_idx >= 4:  # injection flight: port credit domain
                        port = xp.ports[in_idx]
                        k = (port.node_id, flit.channel)
                        in_flight_inj[k] = in_flight_inj.get(k, 0) + 1
                        continue
                    up = xp.neighbors[in_idx]
                    key = (("xp", up.x, up.y, _IDX_NAME[_OPP[in_idx]]),
                           flit.channel)
                    in_flight_flits[key] = in_flight_flits.get(key, 0) + 1
                else:
                    _, port, flit = rec
                    key = (("dlv", port.node_id), flit.channel)
                    in_flight_flits[key] = in_flight_flits.get(key, 0) + 1
        credit_flights: dict[tuple, int] = {}
        inj_credit_flights: dict[tuple, int] = {}
        for _, key in self._credit_flights:
            if key[0] == "inj":
                _, port, ch = key
                k = (port.node_id, ch)
                inj_credit_flights[k] = inj_credit_flights.get(k, 0) + 1
            else:
                credit_flights[key] = credit_flights.get(key, 0) + 1
        for node, port in self.ports.items():
            xp = self.xps[node.x][node.y]
            in_idx = 4 + node.port
            for ch in CHANNELS:
                held = port.inject_credits[ch]
                occ = len(xp.inputs[ch][in_idx])
                flights = in_flight_inj.get((node, ch), 0)
                back = inj_credit_flights.get((node, ch), 0)
                total = held + occ + flights + back
                if total != self.endpoint_depth:
                    raise AssertionError(
                        f"injection credit leak at {node!r} {ch.name}: "
                        f"held={held} occ={occ} in-flight={flights} "
                        f"returning={back} != cap={self.endpoint_depth}")
        for (linkkey, ch), held in self.credits.items():
            if linkkey[0] == "xp":
                _, x, y, d = linkkey
                didx = _DIR_IDX[d]
                down = self.xps[x][y].neighbors[didx]
                occ = len(down.inputs[ch][_OPP[didx]])
                cap = self.buffer_depth
            else:
                node = linkkey[1]
                occ = len(self.ports[node].inbox[ch])
                cap = self.endpoint_depth
            flights = in_flight_flits.get((linkkey, ch), 0)
            back = credit_flights.get((linkkey, ch), 0)
            total = held + occ + flights + back
            if total != cap:
                raise AssertionError(
                    f"credit leak on {linkkey} {ch.name}: held={held} occ={occ} "
                    f"in-flight={flights} returning={back} != cap={cap}")
