"""Coherence protocol: message vocabulary, requester state machine, oracle.

The requester side is a table-driven MESI machine over 64-byte lines. Every
tile owns one `L1CacheController`; all of a tile's memory traffic flows
through it, so the commit log the controllers and home nodes append to forms
a single global order that the sequential oracle can replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

from .kernel import ProtocolError

LINE_BYTES = 64
LINE_SHIFT = 6
ZERO_LINE = bytes(LINE_BYTES)


def line_address(addr: int) -> int:
    return addr & ~(LINE_BYTES - 1)


def is_line_aligned(addr: int) -> bool:
    return (addr & (LINE_BYTES - 1)) == 0


class Channel(IntEnum):
    REQ = 0
    RSP = 1
    DAT = 2
    SNP = 3


class MessageKind(IntEnum):
    ReadShared = 1
    ReadUnique = 2
    CleanUnique = 3
    WriteBackFull = 4
    Evict = 5
    SnpShared = 6
    SnpUnique = 7
    SnpResp = 8
    SnpRespData = 9
    CompData = 10
    Comp = 11
    CompAck = 12
    AtomicOp = 13
    NonTemporalRead = 14


# Data-carrying kinds ride the DAT channel; snoops get their own channel so
# forward progress never depends on request buffering.
KIND_CHANNEL = {
    MessageKind.ReadShared: Channel.REQ,
    MessageKind.ReadUnique: Channel.REQ,
    MessageKind.CleanUnique: Channel.REQ,
    MessageKind.Evict: Channel.REQ,
    MessageKind.AtomicOp: Channel.REQ,
    MessageKind.NonTemporalRead: Channel.REQ,
    MessageKind.WriteBackFull: Channel.DAT,
    MessageKind.SnpShared: Channel.SNP,
    MessageKind.SnpUnique: Channel.SNP,
    MessageKind.SnpResp: Channel.RSP,
    MessageKind.Comp: Channel.RSP,
    MessageKind.CompAck: Channel.RSP,
    MessageKind.SnpRespData: Channel.DAT,
    MessageKind.CompData: Channel.DAT,
}

PAYLOAD_KINDS = {MessageKind.CompData, MessageKind.SnpRespData, MessageKind.WriteBackFull}


class AtomicKind(Enum):
    Add = "Add"
    Swap = "Swap"
    CompareSwap = "CompareSwap"
    Min = "Min"
    Max = "Max"
    And = "And"
    Or = "Or"
    Xor = "Xor"


class MesiState(Enum):
    M = "M"
    E = "E"
    S = "S"
    I = "I"


class Grant(IntEnum):
    """Cacheability granted with a CompData: shared, exclusive, or none."""
    S = 0
    E = 1
    NONE = 2


@dataclass(slots=True)
class CoherenceMessage:
    kind: MessageKind
    txn_id: int
    src: object
    dst: object
    line: int
    payload: Optional[bytes] = None
    grant: Grant = Grant.NONE
    atomic_kind: Optional[AtomicKind] = None
    atomic_operand: Optional[int] = None
    atomic_compare: Optional[int] = None
    offset: int = 0
    width: int = 8

    def __post_init__(self):
        if not is_line_aligned(self.line):
            raise ValueError(f"line address {self.line:#x} not 64-byte aligned")
        has_payload = self.payload is not None
        if has_payload != (self.kind in PAYLOAD_KINDS):
            raise ValueError(f"{self.kind.name} payload rule violated")
        if has_payload and len(self.payload) != LINE_BYTES:
            raise ValueError("payload must be exactly 64 bytes")

    @property
    def channel(self) -> Channel:
        return KIND_CHANNEL[self.kind]


def validate_atomic(kind: AtomicKind, offset: int, width: int) -> None:
    """Reject malformed atomics at injection time."""
    if width not in (4, 8):
        raise ValueError(f"atomic width {width} not in (4, 8)")
    if offset % width != 0 or offset < 0 or offset + width > LINE_BYTES:
        raise ValueError(f"atomic offset {offset} misaligned for width {width}")


def atomic_apply(kind: AtomicKind, old: int, operand: int, width: int = 8,
                 compare: Optional[int] = None) -> tuple[int, int]:
    """Read-modify-write arithmetic: returns (new value, pre-image).

    Values are unsigned integers of `width` bytes; Min/Max compare as
    two's-complement signed, Add wraps modulo 2**(8*width).
    """
    mask = (1 << (8 * width)) - 1
    old &= mask
    operand &= mask

    def signed(v: int) -> int:
        sign = 1 << (8 * width - 1)
        return v - (mask + 1) if v & sign else v

    if kind == AtomicKind.Add:
        new = (old + operand) & mask
    elif kind == AtomicKind.Swap:
        new = operand
    elif kind == AtomicKind.CompareSwap:
        if compare is None:
            raise ValueError("CompareSwap requires a compare value")
        new = operand if old == (compare & mask) else old
    elif kind == AtomicKind.Min:
        new = old if signed(old) <= signed(operand) else operand
    elif kind == AtomicKind.Max:
        new = old if signed(old) >= signed(operand) else operand
    elif kind == AtomicKind.And:
        new = old & operand
    elif kind == AtomicKind.Or:
        new = old | operand
    elif kind == AtomicKind.Xor:
        new = old ^ operand
    else:
        raise ValueError(f"unknown atomic kind {kind}")
    return new, old


def read_word(data: bytes, offset: int, width: int) -> int:
    return int.from_bytes(data[offset:offset + width], "little")


def write_word(data: bytes, offset: int, width: int, value: int) -> bytes:
    value &= (1 << (8 * width)) - 1
    return data[:offset] + value.to_bytes(width, "little") + data[offset + width:]


# ---------------------------------------------------------------------------
# Requester finite state machine
# ---------------------------------------------------------------------------

class RState(IntEnum):
    """Requester per-line states: four stable plus in-flight transients."""
    I = 0
    S = 1
    E = 2
    M = 3
    I_RS = 4    # ReadShared issued, awaiting CompData
    I_RU = 5    # ReadUnique issued, awaiting CompData
    S_CU = 6    # CleanUnique issued, copy still held
    I_CU = 7    # CleanUnique issued, copy lost to a snoop
    S_AT = 8    # atomic issued while holding S
    E_AT = 9    # atomic issued while holding E
    M_AT = 10   # atomic issued while holding M
    I_AT = 11   # atomic issued, no local copy
    I_NT = 12   # non-temporal read in flight
    I_EV = 13   # clean eviction notice in flight
    M_WB = 14   # dirty write-back in flight, data retained for snoops
    I_WB = 15   # write-back in flight, copy relinquished to a snoop

    @property
    def stable(self) -> bool:
        return self in (RState.I, RState.S, RState.E, RState.M)


# Ownership as the single-writer rule sees it. A line being written back no
# longer counts as owned: the requester can never write it again, and the
# home commits the data transfer on its own side of the log.
EFFECTIVE_STABLE = {
    RState.I: "I", RState.S: "S", RState.E: "E", RState.M: "M",
    RState.S_CU: "S", RState.S_AT: "S", RState.E_AT: "E", RState.M_AT: "M",
    RState.I_RS: "I", RState.I_RU: "I", RState.I_CU: "I", RState.I_AT: "I",
    RState.I_NT: "I", RState.I_EV: "I", RState.M_WB: "I", RState.I_WB: "I",
}

# Transients that still hold a valid array copy.
COPY_HOLDING = {RState.S, RState.E, RState.M,
                RState.S_CU, RState.S_AT, RState.E_AT, RState.M_AT}


class FsmEvent(IntEnum):
    LOAD = 0
    STORE = 1
    ATOMIC = 2
    NT_LOAD = 3
    EVICT = 4
    DATA_S = 5       # CompData granting shared
    DATA_E = 6       # CompData granting exclusive
    DATA_NONE = 7    # CompData without install rights
    COMP = 8
    SNP_SHARED = 9
    SNP_UNIQUE = 10


class Action(IntEnum):
    HIT = 0
    SEND_READ_SHARED = 1
    SEND_READ_UNIQUE = 2
    SEND_CLEAN_UNIQUE = 3
    SEND_ATOMIC = 4
    SEND_NT_READ = 5
    SEND_EVICT = 6
    SEND_WRITEBACK = 7
    SEND_SNP_RESP = 8
    SEND_SNP_RESP_DATA = 9
    SEND_COMP_ACK = 10
    INSTALL = 11
    APPLY_STORE = 12
    COMPLETE_LOAD = 13
    COMPLETE_ATOMIC = 14
    COMPLETE_EVICT = 15
    DROP = 16


_T = {
    # stable I: local operations start transactions
    (RState.I, FsmEvent.LOAD): (RState.I_RS, (Action.SEND_READ_SHARED,)),
    (RState.I, FsmEvent.STORE): (RState.I_RU, (Action.SEND_READ_UNIQUE,)),
    (RState.I, FsmEvent.ATOMIC): (RState.I_AT, (Action.SEND_ATOMIC,)),
    (RState.I, FsmEvent.NT_LOAD): (RState.I_NT, (Action.SEND_NT_READ,)),
    # stable S
    (RState.S, FsmEvent.LOAD): (RState.S, (Action.HIT,)),
    (RState.S, FsmEvent.NT_LOAD): (RState.S, (Action.HIT,)),
    (RState.S, FsmEvent.STORE): (RState.S_CU, (Action.SEND_CLEAN_UNIQUE,)),
    (RState.S, FsmEvent.ATOMIC): (RState.S_AT, (Action.SEND_ATOMIC,)),
    (RState.S, FsmEvent.EVICT): (RState.I_EV, (Action.SEND_EVICT, Action.DROP)),
    (RState.S, FsmEvent.SNP_SHARED): (RState.S, (Action.SEND_SNP_RESP,)),
    (RState.S, FsmEvent.SNP_UNIQUE): (RState.I, (Action.SEND_SNP_RESP, Action.DROP)),
    # stable E
    (RState.E, FsmEvent.LOAD): (RState.E, (Action.HIT,)),
    (RState.E, FsmEvent.NT_LOAD): (RState.E, (Action.HIT,)),
    (RState.E, FsmEvent.STORE): (RState.M, (Action.HIT,)),  # silent upgrade
    (RState.E, FsmEvent.ATOMIC): (RState.E_AT, (Action.SEND_ATOMIC,)),
    (RState.E, FsmEvent.EVICT): (RState.I_EV, (Action.SEND_EVICT, Action.DROP)),
    (RState.E, FsmEvent.SNP_SHARED): (RState.S, (Action.SEND_SNP_RESP,)),
    (RState.E, FsmEvent.SNP_UNIQUE): (RState.I, (Action.SEND_SNP_RESP, Action.DROP)),
    # stable M
    (RState.M, FsmEvent.LOAD): (RState.M, (Action.HIT,)),
    (RState.M, FsmEvent.NT_LOAD): (RState.M, (Action.HIT,)),
    (RState.M, FsmEvent.STORE): (RState.M, (Action.HIT,)),
    (RState.M, FsmEvent.ATOMIC): (RState.M_AT, (Action.SEND_ATOMIC,)),
    (RState.M, FsmEvent.EVICT): (RState.M_WB, (Action.SEND_WRITEBACK, Action.DROP)),
    (RState.M, FsmEvent.SNP_SHARED): (RState.S, (Action.SEND_SNP_RESP_DATA,)),
    (RState.M, FsmEvent.SNP_UNIQUE): (RState.I, (Action.SEND_SNP_RESP_DATA, Action.DROP)),
    # read fills
    (RState.I_RS, FsmEvent.DATA_S): (
        RState.S, (Action.INSTALL, Action.COMPLETE_LOAD, Action.SEND_COMP_ACK)),
    (RState.I_RS, FsmEvent.DATA_E): (
        RState.E, (Action.INSTALL, Action.COMPLETE_LOAD, Action.SEND_COMP_ACK)),
    (RState.I_RU, FsmEvent.DATA_E): (
        RState.M, (Action.INSTALL, Action.APPLY_STORE, Action.SEND_COMP_ACK)),
    # upgrades; a racing invalidation downgrades the upgrade to a full fetch
    (RState.S_CU, FsmEvent.COMP): (
        RState.M, (Action.APPLY_STORE, Action.SEND_COMP_ACK)),
    (RState.S_CU, FsmEvent.SNP_SHARED): (RState.S_CU, (Action.SEND_SNP_RESP,)),
    (RState.S_CU, FsmEvent.SNP_UNIQUE): (
        RState.I_CU, (Action.SEND_SNP_RESP, Action.DROP)),
    (RState.I_CU, FsmEvent.DATA_E): (
        RState.M, (Action.INSTALL, Action.APPLY_STORE, Action.SEND_COMP_ACK)),
    # far atomics: home invalidates every holder (us included) before applying
    (RState.S_AT, FsmEvent.SNP_SHARED): (RState.S_AT, (Action.SEND_SNP_RESP,)),
    (RState.S_AT, FsmEvent.SNP_UNIQUE): (
        RState.I_AT, (Action.SEND_SNP_RESP, Action.DROP)),
    (RState.E_AT, FsmEvent.SNP_SHARED): (RState.S_AT, (Action.SEND_SNP_RESP,)),
    (RState.E_AT, FsmEvent.SNP_UNIQUE): (
        RState.I_AT, (Action.SEND_SNP_RESP, Action.DROP)),
    (RState.M_AT, FsmEvent.SNP_SHARED): (RState.S_AT, (Action.SEND_SNP_RESP_DATA,)),
    (RState.M_AT, FsmEvent.SNP_UNIQUE): (
        RState.I_AT, (Action.SEND_SNP_RESP_DATA, Action.DROP)),
    (RState.I_AT, FsmEvent.DATA_NONE): (
        RState.I, (Action.COMPLETE_ATOMIC, Action.SEND_COMP_ACK)),
    # non-temporal fill: data delivered, nothing installed
    (RState.I_NT, FsmEvent.DATA_NONE): (
        RState.I, (Action.COMPLETE_LOAD, Action.SEND_COMP_ACK)),
    # evictions; stale snoops during the handshake are answered without data
    (RState.I_EV, FsmEvent.COMP): (RState.I, (Action.COMPLETE_EVICT,)),
    (RState.I_EV, FsmEvent.SNP_SHARED): (RState.I_EV, (Action.SEND_SNP_RESP,)),
    (RState.I_EV, FsmEvent.SNP_UNIQUE): (RState.I_EV, (Action.SEND_SNP_RESP,)),
    (RState.M_WB, FsmEvent.COMP): (RState.I, (Action.COMPLETE_EVICT,)),
    (RState.M_WB, FsmEvent.SNP_SHARED): (RState.M_WB, (Action.SEND_SNP_RESP_DATA,)),
    (RState.M_WB, FsmEvent.SNP_UNIQUE): (
        RState.I_WB, (Action.SEND_SNP_RESP_DATA,)),
    (RState.I_WB, FsmEvent.COMP): (RState.I, (Action.COMPLETE_EVICT,)),
    (RState.I_WB, FsmEvent.SNP_SHARED): (RState.I_WB, (Action.SEND_SNP_RESP,)),
    (RState.I_WB, FsmEvent.SNP_UNIQUE): (RState.I_WB, (Action.SEND_SNP_RESP,)),
}


def requester_fsm_step(state: RState, event: FsmEvent) -> tuple[RState, tuple[Action, ...]]:
    """Single transition of the requester machine.

    Raises ProtocolError on a pair the protocol can never legally produce.
    """
    try:
        return _T[(state, event)]
    except KeyError:
        raise ProtocolError(
            f"illegal requester transition ({state.name}, {event.name})") from None


def fsm_table() -> dict:
    """The full transition table (for enumeration in tests)."""
    return dict(_T)


# ---------------------------------------------------------------------------
# Commit log and sequential oracle
# ---------------------------------------------------------------------------

OP_READ = "R"
OP_WRITE = "W"
OP_WRITE_LINE = "WL"
OP_STATE = "ST"


@dataclass(slots=True)
class CommitRecord:
    """One globally-ordered commit: a read observation, a write, an atomic,
    or an ownership transition (used for the single-writer check)."""
    seq: int
    cycle: int
    node: str
    txn_id: int
    op: str                      # R | W | WL | A:<kind> | ST
    line: int
    offset: int = 0
    width: int = 0
    operand: int = 0
    compare: Optional[int] = None
    observed: Optional[bytes] = None   # line image for R/WL, pre-image line for atomics
    state_from: str = ""
    state_to: str = ""


class CommitLog:
    def __init__(self):
        self.records: list[CommitRecord] = []
        self._seq = 0

    def append(self, **kw) -> CommitRecord:
        rec = CommitRecord(seq=self._seq, **kw)
        self._seq += 1
        self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class Violation:
    kind: str
    line: int
    cycle: int
    txn_ids: tuple[int, ...]
    detail: str

    def __str__(self):
        txns = ",".join(str(t) for t in self.txn_ids)
        return f"{self.kind} line={self.line:#x} cycle={self.cycle} txns=[{txns}] {self.detail}"


class OracleMemory:
    """Sequential referee: replays the commit log against a flat memory image
    and the single-writer/multiple-reader rule, independent of every
    simulated structure."""

    def __init__(self):
        self.mem: dict[int, bytes] = {}
        self.versions: dict[int, int] = {}
        self.holders: dict[int, dict[str, tuple[str, int]]] = {}
        self.last_writer_txn: dict[int, int] = {}
        self.violations: list[Violation] = []

    def _value(self, line: int) -> bytes:
        return self.mem.get(line, ZERO_LINE)

    def _bump(self, line: int, value: bytes, txn_id: int) -> None:
        self.mem[line] = value
        self.versions[line] = self.versions.get(line, 0) + 1
        self.last_writer_txn[line] = txn_id

    def _check_swmr(self, line: int, cycle: int, txn_id: int) -> None:
        holders = self.holders.get(line, {})
        owners = [(n, t) for n, (s, t) in holders.items() if s in ("M", "E")]
        sharers = [n for n, (s, _) in holders.items() if s == "S"]
        if len(owners) > 1 or (owners and sharers):
            txns = tuple(sorted({txn_id, *(t for _, t in owners)}))
            self.violations.append(Violation(
                "swmr", line, cycle, txns,
                f"owners={[n for n, _ in owners]} sharers={sharers}"))

    def apply(self, rec: CommitRecord) -> None:
        if rec.op == OP_STATE:
            holders = self.holders.setdefault(rec.line, {})
            if rec.state_to == "I":
                holders.pop(rec.node, None)
            else:
                holders[rec.node] = (rec.state_to, rec.txn_id)
            self._check_swmr(rec.line, rec.cycle, rec.txn_id)
        elif rec.op == OP_READ:
            expect = self._value(rec.line)
            if rec.observed != expect:
                self.violations.append(Violation(
                    "data-value", rec.line, rec.cycle,
                    (rec.txn_id, self.last_writer_txn.get(rec.line, -1)),
                    f"observed {rec.observed.hex() if rec.observed else None} "
                    f"!= expected {expect.hex()}"))
        elif rec.op == OP_WRITE:
            value = write_word(self._value(rec.line), rec.offset, rec.width, rec.operand)
            self._bump(rec.line, value, rec.txn_id)
        elif rec.op == OP_WRITE_LINE:
            self._bump(rec.line, rec.observed, rec.txn_id)
        elif rec.op.startswith("A:"):
            kind = AtomicKind(rec.op[2:])
            cur = self._value(rec.line)
            old = read_word(cur, rec.offset, rec.width)
            new, pre = atomic_apply(kind, old, rec.operand, rec.width, rec.compare)
            got = read_word(rec.observed, rec.offset, rec.width) if rec.observed else None
            if got != pre:
                self.violations.append(Violation(
                    "atomic-preimage", rec.line, rec.cycle,
                    (rec.txn_id, self.last_writer_txn.get(rec.line, -1)),
                    f"returned {got} != expected {pre}"))
            self._bump(rec.line, write_word(cur, rec.offset, rec.width, new), rec.txn_id)
        else:
            raise ValueError(f"unknown commit op {rec.op!r}")


def oracle_check(log) -> list[Violation]:
    """Replay a commit log; returns the (possibly empty) violation list."""
    oracle = OracleMemory()
    for rec in log:
        oracle.apply(rec)
    return oracle.violations


def export_commit_log(log, path: str) -> None:
    """Line-oriented text export: cycle txn_id op line value-hash.

    The op token carries kind/offset/operand so the file can be replayed
    offline; value-hash is a short digest of the observed or written image.
    """
    import hashlib

    def h(b: Optional[bytes]) -> str:
        return hashlib.sha256(b).hexdigest()[:16] if b is not None else "-"

    with open(path, "w") as f:
        for r in log:
            if r.op == OP_STATE:
                op = f"ST:{r.node}:{r.state_from}>{r.state_to}"
                f.write(f"{r.cycle} {r.txn_id} {op} {r.line:#x} -\n")
            else:
                op = r.op
                if r.op == OP_WRITE or r.op.startswith("A:"):
                    op = f"{r.op}@{r.offset}/{r.width}:{r.operand:x}"
                    if r.compare is not None:
                        op += f":{r.compare:x}"
                f.write(f"{r.cycle} {r.txn_id} {op} {r.line:#x} {h(r.observed)}\n")


# ---------------------------------------------------------------------------
# Private L1 cache controller (the requester agent)
# ---------------------------------------------------------------------------

class OpKind(IntEnum):
    LOAD = 0
    STORE = 1
    STORE_LINE = 2
    ATOMIC = 3
    NT_LOAD = 4


@dataclass(slots=True)
class AccessOp:
    kind: OpKind
    line: int
    offset: int = 0
    width: int = 8
    operand: int = 0
    compare: Optional[int] = None
    atomic: Optional[AtomicKind] = None
    payload: Optional[bytes] = None
    on_complete: Optional[Callable] = None


@dataclass(slots=True)
class CacheLine:
    state: RState
    data: bytes


@dataclass(slots=True)
class PendingTxn:
    txn_id: int
    line: int
    state: RState
    op: Optional[AccessOp]
    issue_cycle: int
    payload: Optional[bytes] = None  # dirty data retained for in-flight write-backs
    reinstall_reserved: bool = False
    waiters: list = field(default_factory=list)


_OP_EVENT = {
    OpKind.LOAD: FsmEvent.LOAD,
    OpKind.NT_LOAD: FsmEvent.NT_LOAD,
    OpKind.STORE: FsmEvent.STORE,
    OpKind.STORE_LINE: FsmEvent.STORE,
    OpKind.ATOMIC: FsmEvent.ATOMIC,
}

_SEND_KIND = {
    Action.SEND_READ_SHARED: MessageKind.ReadShared,
    Action.SEND_READ_UNIQUE: MessageKind.ReadUnique,
    Action.SEND_CLEAN_UNIQUE: MessageKind.CleanUnique,
    Action.SEND_ATOMIC: MessageKind.AtomicOp,
    Action.SEND_NT_READ: MessageKind.NonTemporalRead,
    Action.SEND_EVICT: MessageKind.Evict,
    Action.SEND_WRITEBACK: MessageKind.WriteBackFull,
}


class L1CacheController:
    """Set-associative private cache driven by the requester FSM.

    The owning tile submits AccessOps; the controller issues transactions
    (bounded by `max_outstanding`), reacts to snoops, evicts with plain LRU
    and reports every architecturally visible read/write to the commit log.
    """

    def __init__(self, sim, name: str, port, home_of: Callable[[int], object],
                 capacity: int = 32768, ways: int = 8,
                 max_outstanding: int = 32, commit_log: Optional[CommitLog] = None):
        self.sim = sim
        self.name = name
        self.port = port
        self.home_of = home_of
        self.ways = ways
        self.num_sets = max(1, capacity // (LINE_BYTES * ways))
        self.sets: list[dict[int, CacheLine]] = [dict() for _ in range(self.num_sets)]
        self.reserved: list[int] = [0] * self.num_sets
        self.max_outstanding = max_outstanding
        self.pending: dict[int, PendingTxn] = {}
        self.issue_q: list[AccessOp] = []
        self.commit_log = commit_log
        self.history: list[str] = []
        self._txn_seq = 0
        self.stats = sim.stats.scope(name)
        self.outstanding_high_water = 0

    # -- helpers ------------------------------------------------------------

    def _set_of(self, line: int) -> int:
        return (line >> LINE_SHIFT) % self.num_sets

    def _lookup(self, line: int) -> Optional[CacheLine]:
        return self.sets[self._set_of(line)].get(line)

    def _touch(self, line: int) -> None:
        s = self.sets[self._set_of(line)]
        s[line] = s.pop(line)  # move to MRU position

    def _log(self, *record) -> None:
        # raw tuples; formatted only if a protocol error needs the dump
        self.history.append((self.sim.now, *record))
        if len(self.history) > 256:
            del self.history[:128]

    def dump_history(self) -> list[str]:
        return [f"[{h[0]}] {self.name}: " +
                " ".join(str(x) for x in h[1:]) for h in self.history]

    def _record(self, **kw) -> None:
        if self.commit_log is not None:
            self.commit_log.append(cycle=self.sim.now, node=self.name, **kw)

    def _record_state(self, line: int, txn_id: int, frm: RState, to: RState) -> None:
        if self.commit_log is None:
            return
        f, t = EFFECTIVE_STABLE[frm], EFFECTIVE_STABLE[to]
        if f != t:
            self.commit_log.append(
                cycle=self.sim.now, node=self.name, txn_id=txn_id,
                op=OP_STATE, line=line, state_from=f, state_to=t)

    # -- public API ----------------------------------------------------------

    def submit(self, op: AccessOp) -> None:
        self.issue_q.append(op)

    def load(self, line: int, on_complete=None) -> None:
        self.submit(AccessOp(OpKind.LOAD, line, on_complete=on_complete))

    def store(self, line: int, offset: int, value: int, width: int = 8,
              on_complete=None) -> None:
        self.submit(AccessOp(OpKind.STORE, line, offset=offset, width=width,
                             operand=value, on_complete=on_complete))

    def store_line(self, line: int, payload: bytes, on_complete=None) -> None:
        self.submit(AccessOp(OpKind.STORE_LINE, line, payload=payload,
                             on_complete=on_complete))

    def atomic(self, line: int, offset: int, kind: AtomicKind, operand: int,
               width: int = 8, compare: Optional[int] = None, on_complete=None) -> None:
        validate_atomic(kind, offset, width)
        self.submit(AccessOp(OpKind.ATOMIC, line, offset=offset, width=width,
                             operand=operand, compare=compare, atomic=kind,
                             on_complete=on_complete))

    def nt_load(self, line: int, on_complete=None) -> None:
        self.submit(AccessOp(OpKind.NT_LOAD, line, on_complete=on_complete))

    @property
    def in_flight(self) -> int:
        return len(self.pending)

    def busy(self) -> bool:
        return bool(self.pending or self.issue_q)

    def valid_lines(self) -> list[tuple[int, str]]:
        """(line, held state) for every line currently held — inclusion audits."""
        out = []
        for s in self.sets:
            for line, cl in s.items():
                if cl.state in COPY_HOLDING:
                    out.append((line, EFFECTIVE_STABLE[cl.state]))
        return out

    # -- per-cycle step -------------------------------------------------------

    def step(self) -> None:
        """One cycle: consume deliveries (one per channel), then issue."""
        if self.port._in_count:
            for ch in (Channel.SNP, Channel.RSP, Channel.DAT):
                flit = self.port.pop_delivery(ch)
                if flit is not None:
                    self._handle_message(flit.message)
                    self.sim.progress()
        if self.issue_q:
            self._try_issue()
        hw = len(self.pending)
        if hw > self.outstanding_high_water:
            self.outstanding_high_water = hw
            if hw > self.max_outstanding:
                raise ProtocolError(
                    f"{self.name} outstanding {hw} exceeds "
                    f"{self.max_outstanding}", self.history)

    def _try_issue(self) -> None:
        remaining: list[AccessOp] = []
        blocked = False
        for op in self.issue_q:
            if blocked:
                remaining.append(op)
                continue
            result = self._start_op(op)
            if result in ("retry", "stall"):
                remaining.append(op)
                blocked = True  # keep program order behind a blocked access
        self.issue_q = remaining

    def _start_op(self, op: AccessOp) -> str:
        line = op.line
        txn = self.pending.get(line)
        if txn is not None:
            txn.waiters.append(op)  # replay when the in-flight txn settles
            return "merged"
        cached = self._lookup(line)
        state = cached.state if cached else RState.I
        nxt, actions = requester_fsm_step(state, _OP_EVENT[op.kind])
        if Action.HIT in actions:
            self._complete_hit(op, cached, state, nxt)
            return "done"
        needs_install = op.kind in (OpKind.LOAD, OpKind.STORE, OpKind.STORE_LINE) \
            and cached is None
        slots = 1
        victim = None
        if needs_install:
            sidx = self._set_of(line)
            if len(self.sets[sidx]) + self.reserved[sidx] >= self.ways:
                victim = self._pick_victim(sidx)
                if victim is None:
                    return "retry"  # every way in flight; wait a cycle
                slots += 1
        if len(self.pending) + slots > self.max_outstanding:
            self.stats["stall_mshr"] = self.stats.get("stall_mshr", 0) + 1
            return "stall"
        if victim is not None:
            vc = self._lookup(victim)
            vnxt, vactions = requester_fsm_step(vc.state, FsmEvent.EVICT)
            self._launch(AccessOp(OpKind.LOAD, victim), vc.state, vnxt, vactions,
                         eviction=True)
        if needs_install:
            sidx = self._set_of(line)
            self.reserved[sidx] += 1
        self._launch(op, state, nxt, actions)
        return "done"

    def _pick_victim(self, sidx: int) -> Optional[int]:
        for line, cl in self.sets[sidx].items():  # dict order = LRU order
            if cl.state.stable and line not in self.pending:
                return line
        return None

    def _launch(self, op: AccessOp, frm: RState, nxt: RState,
                actions: tuple, eviction: bool = False) -> None:
        line = op.line
        self._txn_seq += 1
        txn_id = self._txn_seq
        txn = PendingTxn(txn_id=txn_id, line=line, state=nxt,
                         op=None if eviction else op,
                         issue_cycle=self.sim.now)
        send_kind = next(_SEND_KIND[a] for a in actions if a in _SEND_KIND)
        cached = self._lookup(line)
        payload = None
        if send_kind is MessageKind.WriteBackFull:
            payload = cached.data
            txn.payload = cached.data
        if Action.DROP in actions:
            self.sets[self._set_of(line)].pop(line)
        elif cached is not None:
            cached.state = nxt  # copy-retaining transient (upgrade/atomic)
        msg = CoherenceMessage(
            kind=send_kind, txn_id=txn_id, src=self.port.node_id,
            dst=self.home_of(line), line=line, payload=payload)
        if not eviction and op.kind is OpKind.ATOMIC:
            msg.atomic_kind = op.atomic
            msg.atomic_operand = op.operand
            msg.atomic_compare = op.compare
            msg.offset = op.offset
            msg.width = op.width
        self.pending[line] = txn
        self._record_state(line, txn_id, frm, nxt)
        self.sim.txn_begin()
        self.stats["txn_issued"] = self.stats.get("txn_issued", 0) + 1
        self.port.send_message(msg)
        self._log("issue", send_kind.name, hex(line), txn_id, frm.name,
                  nxt.name)

    def _complete_hit(self, op: AccessOp, cached: CacheLine, frm: RState,
                      nxt: RState) -> None:
        line = op.line
        cached.state = nxt
        self._touch(line)
        self.stats["l1_hits"] = self.stats.get("l1_hits", 0) + 1
        if frm != nxt:
            self._record_state(line, 0, frm, nxt)
        if op.kind in (OpKind.LOAD, OpKind.NT_LOAD):
            self._record(txn_id=0, op=OP_READ, line=line, observed=cached.data)
        elif op.kind is OpKind.STORE:
            cached.data = write_word(cached.data, op.offset, op.width, op.operand)
            self._record(txn_id=0, op=OP_WRITE, line=line, offset=op.offset,
                         width=op.width, operand=op.operand)
        else:  # STORE_LINE
            cached.data = op.payload
            self._record(txn_id=0, op=OP_WRITE_LINE, line=line, observed=op.payload)
        if op.on_complete:
            op.on_complete(self.sim.now, cached.data)

    # -- message handling ------------------------------------------------------

    def _fsm_event_for(self, msg: CoherenceMessage) -> FsmEvent:
        if msg.kind is MessageKind.CompData:
            return {Grant.S: FsmEvent.DATA_S, Grant.E: FsmEvent.DATA_E,
                    Grant.NONE: FsmEvent.DATA_NONE}[msg.grant]
        if msg.kind is MessageKind.Comp:
            return FsmEvent.COMP
        if msg.kind is MessageKind.SnpShared:
            return FsmEvent.SNP_SHARED
        if msg.kind is MessageKind.SnpUnique:
            return FsmEvent.SNP_UNIQUE
        raise ProtocolError(f"{self.name}: unexpected message kind {msg.kind}",
                            self.dump_history())

    def _handle_message(self, msg: CoherenceMessage) -> None:
        line = msg.line
        event = self._fsm_event_for(msg)
        txn = self.pending.get(line)
        cached = self._lookup(line)
        state = txn.state if txn is not None else (
            cached.state if cached else RState.I)
        try:
            nxt, actions = requester_fsm_step(state, event)
        except ProtocolError as e:
            e.history = self.dump_history()
            raise
        self._log("recv", msg.kind.name, hex(line), state.name, nxt.name)
        self._record_state(line, msg.txn_id if txn is None else txn.txn_id,
                           state, nxt)

        snoop_data = txn.payload if (txn is not None and txn.payload is not None) \
            else (cached.data if cached else None)
        if txn is not None:
            txn.state = nxt
        if cached is not None:
            if Action.DROP in actions:
                self.sets[self._set_of(line)].pop(line)
                cached = None
                if txn is not None and txn.state is RState.I_CU:
                    # the upgrade will come back as a full fill; keep its way
                    self.reserved[self._set_of(line)] += 1
                    txn.reinstall_reserved = True
            else:
                cached.state = nxt

        if Action.SEND_SNP_RESP in actions:
            self.port.send_message(CoherenceMessage(
                kind=MessageKind.SnpResp, txn_id=msg.txn_id,
                src=self.port.node_id, dst=msg.src, line=line))
        if Action.SEND_SNP_RESP_DATA in actions:
            self.port.send_message(CoherenceMessage(
                kind=MessageKind.SnpRespData, txn_id=msg.txn_id,
                src=self.port.node_id, dst=msg.src, line=line,
                payload=snoop_data))
        if txn is None:
            return

        op = txn.op
        if Action.INSTALL in actions:
            sidx = self._set_of(line)
            self.sets[sidx][line] = CacheLine(nxt, msg.payload)
            cached = self.sets[sidx][line]
            if self.reserved[sidx] > 0:
                self.reserved[sidx] -= 1
        if Action.APPLY_STORE in actions:
            if cached is None:  # upgrade completed while copy retained in array
                raise ProtocolError(f"{self.name}: store completion without a copy",
                                    self.dump_history())
            if op.kind is OpKind.STORE_LINE:
                cached.data = op.payload
                self._record(txn_id=txn.txn_id, op=OP_WRITE_LINE, line=line,
                             observed=op.payload)
            else:
                cached.data = write_word(cached.data, op.offset, op.width, op.operand)
                self._record(txn_id=txn.txn_id, op=OP_WRITE, line=line,
                             offset=op.offset, width=op.width, operand=op.operand)
            cached.state = nxt
        if Action.COMPLETE_LOAD in actions:
            self._record(txn_id=txn.txn_id, op=OP_READ, line=line,
                         observed=msg.payload)
        if Action.SEND_COMP_ACK in actions:
            self.port.send_message(CoherenceMessage(
                kind=MessageKind.CompAck, txn_id=txn.txn_id,
                src=self.port.node_id, dst=self.home_of(line), line=line))
        if nxt.stable:
            if cached is not None:
                cached.state = nxt
                self._touch(line)
            self._finish_txn(txn, msg, actions)

    def _finish_txn(self, txn: PendingTxn, msg, actions: tuple) -> None:
        line = txn.line
        del self.pending[line]
        self.sim.txn_end()
        self.sim.stats.record_latency(self.sim.now - txn.issue_cycle)
        self.stats["txn_completed"] = self.stats.get("txn_completed", 0) + 1
        op = txn.op
        if op is not None and op.on_complete is not None:
            if msg.payload is not None:
                value = msg.payload
            else:
                cached = self._lookup(line)
                value = cached.data if cached else None
            op.on_complete(self.sim.now, value)
        if txn.waiters:
            self.issue_q = txn.waiters + self.issue_q
