"""Chip-to-chip link and external memory endpoint.

Flits leaving the mesh are encapsulated into CRC-32 protected packets and
serialized over eight lanes (default 25 Gb/s each, 200 Gb/s = 25 GB/s per
direction). Delivery is exactly-once and in-order under any injected
bit-error rate thanks to go-back-N retransmission: the receiver accepts
only the next expected sequence number and nacks everything else; acks are
emitted when a packet's flits are handed to the consumer, which bounds
receiver buffering to the sender's replay window.

Ack/nack signaling rides a reliable out-of-band control path; its wire cost
is part of the encapsulation-overhead fraction, as are headers and line
coding. With overhead 0 a saturated direction carries exactly its raw rate
in payload.
"""

from __future__ import annotations

import struct
import zlib
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

from .kernel import Component, ExactRate, Simulator
from .noc import EndpointPort, Flit, NodeId
from .protocol import (
    AtomicKind, Channel, CoherenceMessage, Grant, LINE_BYTES, MessageKind,
    ZERO_LINE, atomic_apply, read_word, write_word,
)

# wire-payload charge per flit: a data beat, or a small header-class message
DAT_WIRE_BYTES = 64
CTRL_WIRE_BYTES = 16


@dataclass
class LinkConfig:
    lanes: int = 8
    lane_rate_gbps: float = 25.0
    encapsulation_overhead: float = 0.0
    replay_window: int = 64
    packet_flits: int = 4
    bit_error_rate: float = 0.0
    propagation_cycles: int = 8

    def validate(self) -> list[str]:
        errs = []
        if self.lanes <= 0:
            errs.append("c2c.lanes must be positive")
        if self.lane_rate_gbps <= 0:
            errs.append("c2c.lane_rate_gbps must be positive")
        if not (0.0 <= self.encapsulation_overhead < 1.0):
            errs.append("c2c.encapsulation_overhead must be in [0, 1)")
        if self.replay_window <= 0:
            errs.append("c2c.replay_window must be positive")
        if self.packet_flits <= 0:
            errs.append("c2c.packet_flits must be positive")
        if not (0.0 <= self.bit_error_rate < 1.0):
            errs.append("c2c.bit_error_rate must be in [0, 1)")
        return errs

    def raw_bits_per_cycle(self, frequency_hz: float) -> Fraction:
        total_bps = int(self.lanes * self.lane_rate_gbps * 1e9)
        return Fraction(total_bps, int(frequency_hz))

    def raw_bytes_per_second(self) -> float:
        return self.lanes * self.lane_rate_gbps * 1e9 / 8.0

    def goodput_cap_bytes_per_second(self) -> float:
        return self.raw_bytes_per_second() * (1.0 - self.encapsulation_overhead)


# ---------------------------------------------------------------------------
# wire codec
# ---------------------------------------------------------------------------

_KINDS = list(MessageKind)
_ATOMICS = list(AtomicKind)
_GRANTS = list(Grant)
_CHANNELS = list(Channel)

_MSG_FMT = struct.Struct("<BIB3b3bBBqBBBQQ")


def _enc_node(n: Optional[NodeId]) -> tuple[int, int, int]:
    if n is None:
        return (-1, -1, -1)
    return (n.x, n.y, n.port)


_NODE_CACHE: dict = {}


def _dec_node(x: int, y: int, p: int) -> Optional[NodeId]:
    if x < 0:
        return None
    node = _NODE_CACHE.get((x, y, p))
    if node is None:
        node = NodeId(x, y, p)
        _NODE_CACHE[(x, y, p)] = node
    return node


_F_PAYLOAD = 1
_F_OPERAND = 2
_F_COMPARE = 4


def encode_message(channel: Channel, msg: CoherenceMessage) -> bytes:
    flags = (_F_PAYLOAD if msg.payload is not None else 0) \
        | (_F_OPERAND if msg.atomic_operand is not None else 0) \
        | (_F_COMPARE if msg.atomic_compare is not None else 0)
    head = _MSG_FMT.pack(
        _KINDS.index(msg.kind), msg.txn_id & 0xFFFFFFFF,
        _CHANNELS.index(channel),
        *_enc_node(msg.src), *_enc_node(msg.dst),
        _GRANTS.index(msg.grant), flags,
        msg.line, msg.offset, msg.width,
        _ATOMICS.index(msg.atomic_kind) + 1 if msg.atomic_kind else 0,
        msg.atomic_operand or 0, msg.atomic_compare or 0)
    return head + (msg.payload or b"")


def decode_message(buf: bytes) -> tuple[Channel, CoherenceMessage, int]:
    (kind_i, txn, ch_i, sx, sy, sp, dx, dy, dp, grant_i, flags,
     line, offset, width, ak, operand, compare) = _MSG_FMT.unpack_from(buf)
    size = _MSG_FMT.size
    payload = None
    if flags & _F_PAYLOAD:
        payload = bytes(buf[size:size + LINE_BYTES])
        size += LINE_BYTES
    msg = CoherenceMessage(
        kind=_KINDS[kind_i], txn_id=txn, src=_dec_node(sx, sy, sp),
        dst=_dec_node(dx, dy, dp), line=line, payload=payload,
        grant=_GRANTS[grant_i],
        atomic_kind=_ATOMICS[ak - 1] if ak else None,
        atomic_operand=operand if flags & _F_OPERAND else None,
        atomic_compare=compare if flags & _F_COMPARE else None,
        offset=offset, width=width)
    return _CHANNELS[ch_i], msg, size


_PKT_HEAD = struct.Struct("<QBI")  # seq, flit count, header CRC


def encode_packet(seq: int, flits: list[Flit]) -> bytes:
    hcrc = zlib.crc32(struct.pack("<QB", seq, len(flits)))
    head = _PKT_HEAD.pack(seq, len(flits), hcrc)
    body = b"".join(encode_message(f.channel, f.message) for f in flits)
    return head + body + struct.pack("<I", zlib.crc32(head + body))


def peek_seq(image: bytes) -> Optional[int]:
    """Sequence number if the header is intact, else None.

    The header carries its own CRC so a payload-corrupt packet can still be
    identified; that lets the receiver suppress duplicate gap reports
    without ever losing track of a re-corrupted retransmission.
    """
    if len(image) < _PKT_HEAD.size:
        return None
    seq, nflits, hcrc = _PKT_HEAD.unpack_from(image)
    if zlib.crc32(struct.pack("<QB", seq, nflits)) != hcrc:
        return None
    return seq


def decode_packet(image: bytes) -> Optional[tuple[int, list[tuple[Channel, CoherenceMessage]]]]:
    """Returns (seq, flit descriptions), or None if the CRC does not match."""
    if len(image) < _PKT_HEAD.size + 4:
        return None
    body, (crc,) = image[:-4], struct.unpack("<I", image[-4:])
    if zlib.crc32(body) != crc:
        return None
    seq, nflits, _ = _PKT_HEAD.unpack_from(body)
    out = []
    pos = _PKT_HEAD.size
    try:
        for _ in range(nflits):
            ch, msg, size = decode_message(body[pos:])
            out.append((ch, msg))
            pos += size
    except (struct.error, ValueError, IndexError):
        return None
    return seq, out


def flit_wire_bytes(flit: Flit) -> int:
    return DAT_WIRE_BYTES if flit.channel is Channel.DAT else CTRL_WIRE_BYTES


# ---------------------------------------------------------------------------
# one link direction: sender with replay buffer, receiver with reorder guard
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class _Sent:
    seq: int
    image: bytes
    wire_bits: int
    payload_bytes: int
    flits: list


class LinkDirection:
    """Sender and receiver state for one direction of the full-duplex link."""

    def __init__(self, link: "C2CLink", name: str, cfg: LinkConfig,
                 frequency_hz: float):
        self.link = link
        self.name = name
        self.cfg = cfg
        self.lane = ExactRate(cfg.raw_bits_per_cycle(frequency_hz))
        ov = Fraction(str(cfg.encapsulation_overhead))
        self._wire_num = (1 - ov).numerator
        self._wire_den = (1 - ov).denominator
        self.send_q: deque[Flit] = deque()
        self._need_pump = False
        self.buffered: dict[int, _Sent] = {}
        self.base = 0          # lowest unacked seq
        self.next_new = 0      # next fresh seq
        self.cursor = 0        # next seq to put on the wire
        self.expected = 0      # receiver: next in-order seq
        self._nacked_for = -1  # gap already reported (duplicate suppression)
        self.delivery_q: list[_Sent] = []
        self.consumer: Optional[Callable[[list], bool]] = None
        self.stats = link.sim.stats.scope(f"c2c.{name}")

    # -- sender ----------------------------------------------------------------

    def offer(self, flit: Flit) -> bool:
        """Queue a flit for transmission; False when backpressured."""
        if len(self.send_q) >= self.cfg.replay_window * self.cfg.packet_flits:
            return False
        self.send_q.append(flit)
        self._need_pump = True
        self.link.sim.progress()
        return True

    def _wire_bits(self, payload_bytes: int) -> int:
        bits = payload_bytes * 8
        return -(-bits * self._wire_den // self._wire_num)

    def pump(self) -> None:
        """Form/replay packets while the replay window has room."""
        self._need_pump = False
        sim = self.link.sim
        while True:
            if self.cursor < self.next_new:
                pkt = self.buffered[self.cursor]
                self.cursor += 1
                self.stats["retransmissions"] = \
                    self.stats.get("retransmissions", 0) + 1
            elif self.send_q and (self.next_new - self.base) < self.cfg.replay_window:
                take = min(self.cfg.packet_flits, len(self.send_q))
                flits = [self.send_q.popleft() for _ in range(take)]
                payload = sum(flit_wire_bytes(f) for f in flits)
                image = encode_packet(self.next_new, flits)
                pkt = _Sent(seq=self.next_new, image=image,
                            wire_bits=self._wire_bits(payload),
                            payload_bytes=payload, flits=list(flits))
                self.buffered[self.next_new] = pkt
                self.next_new += 1
                self.cursor = self.next_new
            else:
                return
            done = self.lane.reserve(sim.now, pkt.wire_bits)
            self.stats["bits_raw"] = self.stats.get("bits_raw", 0) + pkt.wire_bits
            self.stats["packets"] = self.stats.get("packets", 0) + 1
            image = pkt.image
            if self.cfg.bit_error_rate > 0.0:
                p = 1.0 - (1.0 - self.cfg.bit_error_rate) ** pkt.wire_bits
                if sim.rng.random() < p:
                    flip = sim.rng.randrange(len(image) * 8)
                    corrupted = bytearray(image)
                    corrupted[flip >> 3] ^= 1 << (flip & 7)
                    image = bytes(corrupted)
            sim.schedule(self.link, ("rx", self.name, image),
                         at=done + self.cfg.propagation_cycles)
            sim.progress()

    def on_ack(self, upto: int) -> None:
        for s in range(self.base, upto + 1):
            self.buffered.pop(s, None)
        if upto + 1 > self.base:
            self.base = upto + 1
        if self.cursor < self.base:
            self.cursor = self.base
        self.pump()

    def on_nack(self, expected: int) -> None:
        self.stats["nacks_seen"] = self.stats.get("nacks_seen", 0) + 1
        if self.base <= expected < self.cursor:
            self.cursor = expected  # go-back-N: replay everything from the gap
        self.pump()

    # -- receiver ----------------------------------------------------------------

    def _nack(self, force: bool = False) -> None:
        sim = self.link.sim
        if not force and self._nacked_for == self.expected:
            return  # this gap was already reported
        self._nacked_for = self.expected
        sim.schedule(self.link, ("nack", self.name, self.expected),
                     at=sim.now + self.cfg.propagation_cycles)

    def on_wire_arrival(self, image: bytes) -> None:
        decoded = decode_packet(image)
        if decoded is None:
            self.stats["crc_errors"] = self.stats.get("crc_errors", 0) + 1
            seq = peek_seq(image)
            # a corrupted retransmission of the gap itself must be re-reported;
            # an unidentifiable packet is reported unconditionally for safety
            self._nack(force=seq is None or seq == self.expected)
            return
        seq, flit_desc = decoded
        if seq != self.expected:
            if seq > self.expected:
                self._nack()
            # duplicates below expected were already delivered and acked
            return
        self.expected += 1
        self._nacked_for = -1
        payload = 0
        flits = []
        for ch, msg in flit_desc:
            flits.append((ch, msg))
            payload += DAT_WIRE_BYTES if ch is Channel.DAT else CTRL_WIRE_BYTES
        self.delivery_q.append(_Sent(seq=seq, image=image, wire_bits=0,
                                     payload_bytes=payload, flits=flits))
        self.try_deliver()

    def try_deliver(self) -> None:
        sim = self.link.sim
        while self.delivery_q:
            pkt = self.delivery_q[0]
            if self.consumer is None or not self.consumer(pkt.flits):
                return
            self.delivery_q.pop(0)
            self.stats["bytes_good"] = \
                self.stats.get("bytes_good", 0) + pkt.payload_bytes
            sim.schedule(self.link, ("ack", self.name, pkt.seq),
                         at=sim.now + self.cfg.propagation_cycles)
            sim.progress()

    def busy(self) -> bool:
        # wire activity is event-driven (arrivals, acks, nacks re-arm the
        # pump); only backpressured deliveries need per-cycle retries
        return bool(self.delivery_q)


class C2CLink(Component):
    """Full-duplex link: direction "tx" leaves the chip, "rx" returns."""

    def __init__(self, sim: Simulator, cfg: LinkConfig, frequency_hz: float):
        super().__init__(sim, "c2c")
        self.cfg = cfg
        self.tx = LinkDirection(self, "tx", cfg, frequency_hz)
        self.rx = LinkDirection(self, "rx", cfg, frequency_hz)

    def _dir(self, name: str) -> LinkDirection:
        return self.tx if name == "tx" else self.rx

    def on_event(self, payload) -> None:
        kind, name, arg = payload
        d = self._dir(name)
        if kind == "rx":
            d.on_wire_arrival(arg)
        elif kind == "ack":
            d.on_ack(arg)
        else:
            d.on_nack(arg)

    def step(self) -> None:
        # retry deliveries that were backpressured by the consumer; pumping
        # is otherwise event-armed (offers, acks, nacks)
        if self.tx.delivery_q:
            self.tx.try_deliver()
        if self.rx.delivery_q:
            self.rx.try_deliver()
        if self.tx._need_pump:
            self.tx.pump()
        if self.rx._need_pump:
            self.rx.pump()

    def busy(self) -> bool:
        return self.tx.busy() or self.rx.busy()


# ---------------------------------------------------------------------------
# memory endpoint
# ---------------------------------------------------------------------------

class MemoryModel:
    """Latency/bandwidth-modeled DRAM with a sparse line-granular backing
    store; zero-fill for never-written lines, FIFO service order."""

    def __init__(self, sim: Simulator, latency: int,
                 bandwidth_bytes_per_cycle: float, name: str = "memory"):
        self.sim = sim
        self.latency = latency
        self.rate = ExactRate(
            Fraction(bandwidth_bytes_per_cycle).limit_denominator(1_000_000))
        self.store: dict[int, bytes] = {}
        self.stats = sim.stats.scope(name)

    def read_line(self, line: int) -> bytes:
        return self.store.get(line, ZERO_LINE)

    def write_line(self, line: int, data: bytes) -> None:
        self.store[line] = data

    def service(self, msg: CoherenceMessage) -> tuple[int, CoherenceMessage]:
        """Returns (completion cycle, response message)."""
        ready = self.sim.now + self.latency
        done = self.rate.reserve(ready, LINE_BYTES)
        kind = msg.kind
        if kind is MessageKind.WriteBackFull:
            self.write_line(msg.line, msg.payload)
            self.stats["writes"] = self.stats.get("writes", 0) + 1
            resp = CoherenceMessage(kind=MessageKind.Comp, txn_id=msg.txn_id,
                                    src=None, dst=msg.src, line=msg.line)
        elif kind is MessageKind.AtomicOp:
            cur = self.read_line(msg.line)
            old = read_word(cur, msg.offset, msg.width)
            new, _ = atomic_apply(msg.atomic_kind, old, msg.atomic_operand,
                                  msg.width, msg.atomic_compare)
            self.write_line(msg.line, write_word(cur, msg.offset, msg.width, new))
            self.stats["atomics"] = self.stats.get("atomics", 0) + 1
            resp = CoherenceMessage(kind=MessageKind.CompData, txn_id=msg.txn_id,
                                    src=None, dst=msg.src, line=msg.line,
                                    payload=cur, grant=Grant.NONE)
        else:  # reads (NonTemporalRead carries both fill and bypass fetches)
            self.stats["reads"] = self.stats.get("reads", 0) + 1
            resp = CoherenceMessage(kind=MessageKind.CompData, txn_id=msg.txn_id,
                                    src=None, dst=msg.src, line=msg.line,
                                    payload=self.read_line(msg.line),
                                    grant=Grant.NONE)
        self.stats["bytes"] = self.stats.get("bytes", 0) + LINE_BYTES
        return done, resp


class DirectMemory(Component):
    """Memory attached straight to a mesh port (no link in between)."""

    def __init__(self, sim: Simulator, port: EndpointPort, latency: int = 100,
                 bandwidth_bytes_per_cycle: float = 25.6):
        super().__init__(sim, "memory")
        self.port = port
        self.model = MemoryModel(sim, latency, bandwidth_bytes_per_cycle)
        self._pending = 0

    def step(self) -> None:
        for ch in (Channel.REQ, Channel.DAT):
            flit = self.port.pop_delivery(ch)
            if flit is None:
                continue
            done, resp = self.model.service(flit.message)
            resp.src = self.port.node_id
            self.sim.schedule(self, resp, at=max(done, self.sim.now + 1))
            self._pending += 1
            self.sim.progress()

    def on_event(self, resp: CoherenceMessage) -> None:
        self._pending -= 1
        self.port.send_message(resp)

    def busy(self) -> bool:
        return self._pending > 0 or not self.port.outbox_empty()


class C2CBridge(Component):
    """Mesh endpoint that extends the coherence network off-chip.

    Outbound flits (anything addressed to the bridge's node id) are
    encapsulated onto the link's tx direction; the remote side feeds a
    MemoryModel and returns responses on rx, which are re-injected into
    the mesh toward their on-chip destinations.
    """

    def __init__(self, sim: Simulator, port: EndpointPort, link: C2CLink,
                 latency: int = 100, bandwidth_bytes_per_cycle: float = 25.6):
        super().__init__(sim, "bridge")
        self.port = port
        self.link = link
        self.memory = MemoryModel(sim, latency, bandwidth_bytes_per_cycle)
        self._mem_pending = 0
        link.tx.consumer = self._remote_consume
        link.rx.consumer = self._local_consume
        self._reinject_budget = 4 * link.cfg.packet_flits

    # outbound: chip -> link
    def step(self) -> None:
        pumped = False
        for ch in (Channel.REQ, Channel.DAT, Channel.RSP, Channel.SNP):
            head = self.port.peek_delivery(ch)
            if head is None:
                continue
            if self.link.tx.offer(head):
                self.port.pop_delivery(ch)
                pumped = True
        if pumped:
            self.link.tx.pump()

    # remote side: link -> memory
    def _remote_consume(self, flits: list) -> bool:
        if self._mem_pending + len(flits) > 64:
            return False
        for _, msg in flits:
            done, resp = self.memory.service(msg)
            self.sim.schedule(self, ("mem_done", resp),
                              at=max(done, self.sim.now + 1))
            self._mem_pending += 1
        return True

    def on_event(self, payload) -> None:
        kind, resp = payload
        self._mem_pending -= 1
        ch = resp.channel
        flit = Flit(ch, resp, None, resp.dst)
        if not self.link.rx.offer(flit):
            # replay window fully queued; retry shortly
            self._mem_pending += 1
            self.sim.schedule(self, payload, at=self.sim.now + 1)

    # local side: link -> mesh re-injection
    def _local_consume(self, flits: list) -> bool:
        queued = sum(len(self.port.outbox[ch]) for ch in self.port.outbox)
        if queued + len(flits) > self._reinject_budget:
            return False
        for _, msg in flits:
            if msg.src is None:
                msg.src = self.port.node_id
            self.port.send_message(msg)
        return True

    def busy(self) -> bool:
        return self._mem_pending > 0 or not self.port.outbox_empty()
