"""Deterministic cycle-driven simulation kernel.

Every cycle runs a fixed sequence: scheduled events are delivered first
(ordered by component registration index, FIFO per component), then each
registered component is stepped in registration order (endpoints produce
outputs, the network arbitrates/commits and returns credits last), then the
kernel evaluates progress for quiescence/deadlock. Components never share
state except through the kernel-visible structures they were wired with, so
a fixed step order makes the whole simulation a deterministic function of
(config, seed).

Cycles with no steppable work are skipped directly to the next scheduled
event, so latency-dominated phases (memory waits, link serialization) cost
O(events) instead of O(cycles).
"""

from __future__ import annotations

import heapq
import random
from collections import defaultdict
from fractions import Fraction
from typing import Any, Callable, Optional

Cycle = int

LATENCY_BUCKETS = 24  # bucket i holds latencies with bit_length == i (last is open-ended)


class SchedulingError(Exception):
    """Raised when an event is scheduled in the past (a configuration bug)."""


class ProtocolError(Exception):
    """Raised on an illegal protocol (state, event) pair; carries history."""

    def __init__(self, message: str, history: Optional[list] = None):
        super().__init__(message)
        self.history = history or []

    def dump(self) -> str:
        lines = [str(self)]
        lines += [f"  {h}" for h in self.history]
        return "\n".join(lines)


class DeadlockReport:
    """Summary of a detected deadlock: stalled cycle plus what was stuck."""

    def __init__(self, cycle: Cycle, outstanding: int, busy_components: list[str]):
        self.cycle = cycle
        self.outstanding = outstanding
        self.busy_components = busy_components

    def __repr__(self):
        return (f"DeadlockReport(cycle={self.cycle}, outstanding={self.outstanding}, "
                f"busy={self.busy_components})")

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "outstanding": self.outstanding,
            "busy_components": list(self.busy_components),
        }


class SimStats:
    """Hierarchical counters plus a per-transaction latency histogram.

    Counters only ever increase during a run; the histogram buckets are
    powers of two on transaction latency in cycles.
    """

    def __init__(self):
        self.counters: dict[str, dict[str, int]] = {}
        self.latency_hist: list[int] = [0] * LATENCY_BUCKETS
        self.latency_count = 0
        self.elapsed_cycles: Cycle = 0
        self.quiescent = False
        self.deadlock: Optional[DeadlockReport] = None

    def scope(self, name: str) -> dict[str, int]:
        """Counter dict for one component; created on first use."""
        d = self.counters.get(name)
        if d is None:
            d = defaultdict(int)
            self.counters[name] = d
        return d

    def incr(self, scope: str, key: str, n: int = 1) -> None:
        d = self.scope(scope)
        d[key] = d.get(key, 0) + n

    def get(self, scope: str, key: str, default: int = 0) -> int:
        return self.counters.get(scope, {}).get(key, default)

    def record_latency(self, cycles: int) -> None:
        idx = min(max(cycles, 0).bit_length(), LATENCY_BUCKETS - 1)
        self.latency_hist[idx] += 1
        self.latency_count += 1

    def snapshot(self) -> dict[str, dict[str, int]]:
        return {k: dict(v) for k, v in self.counters.items()}

    def delta(self, before: dict[str, dict[str, int]], scope: str, key: str) -> int:
        return self.get(scope, key) - before.get(scope, {}).get(key, 0)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "elapsed_cycles": self.elapsed_cycles,
            "quiescent": self.quiescent,
            "deadlock": self.deadlock.to_dict() if self.deadlock else None,
            "latency_hist": list(self.latency_hist),
            "latency_count": self.latency_count,
            "counters": {k: dict(sorted(v.items())) for k, v in sorted(self.counters.items())},
        }
        return out


class Component:
    """Base class for everything the kernel steps once per cycle."""

    def __init__(self, sim: "Simulator", name: str):
        self.sim = sim
        self.name = name
        self.cid = sim.register(self)

    def step(self) -> None:
        """Advance one cycle. Called in registration order."""

    def busy(self) -> bool:
        """True if the component could still make progress without new input."""
        return False

    def on_event(self, payload: Any) -> None:
        """Handle an event scheduled via Simulator.schedule."""
        raise NotImplementedError(f"{self.name} received unexpected event {payload!r}")


class ExactRate:
    """Integer-exact serialization timing for a rate of num/den units per cycle.

    Time is tracked in ticks of 1/num cycles so that back-to-back transfers
    pack with no rounding drift: sending `amount` units takes amount*den
    ticks. `reserve` returns the cycle at which the transfer completes.
    """

    def __init__(self, units_per_cycle: Fraction):
        if units_per_cycle <= 0:
            raise ValueError("rate must be positive")
        self.num = units_per_cycle.numerator
        self.den = units_per_cycle.denominator
        self._free_tick = 0

    def reserve(self, start_cycle: Cycle, amount: int) -> Cycle:
        start_tick = start_cycle * self.num
        if self._free_tick < start_tick:
            self._free_tick = start_tick
        self._free_tick += amount * self.den
        return -(-self._free_tick // self.num)  # ceil division

    def busy_at(self, cycle: Cycle) -> bool:
        return self._free_tick > cycle * self.num


TraceFn = Callable[[Cycle, str, str, str, int, int, str, str], None]


class Simulator:
    """Owner of simulated time, the event queue, statistics, and the RNG."""

    def __init__(self, seed: int = 0, trace: Optional[TraceFn] = None):
        self.now: Cycle = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self.stats = SimStats()
        self.trace = trace
        self.commit_log: list = []
        self._components: list[Component] = []
        self._eventq: list[tuple[Cycle, int, int, Any]] = []
        self._event_seq = 0
        self._progress = 0
        self._txn_injected = 0
        self._txn_completed = 0

    # -- registration and events ------------------------------------------

    def register(self, component: Component) -> int:
        self._components.append(component)
        return len(self._components) - 1

    def component(self, name: str) -> Component:
        for c in self._components:
            if c.name == name:
                return c
        raise KeyError(name)

    def schedule(self, component: Component, payload: Any, at: Cycle) -> None:
        if at < self.now:
            raise SchedulingError(
                f"event for {component.name} scheduled at {at} < now {self.now}")
        heapq.heappush(self._eventq, (at, component.cid, self._event_seq, payload))
        self._event_seq += 1

    def after(self, component: Component, payload: Any, delay: int) -> None:
        self.schedule(component, payload, self.now + delay)

    # -- progress / transaction accounting ---------------------------------

    def progress(self, n: int = 1) -> None:
        """Mark that simulated state changed this cycle (commits detection)."""
        self._progress += n

    def txn_begin(self) -> None:
        self._txn_injected += 1

    def txn_end(self) -> None:
        self._txn_completed += 1

    @property
    def outstanding(self) -> int:
        return self._txn_injected - self._txn_completed

    @property
    def injected(self) -> int:
        return self._txn_injected

    @property
    def completed(self) -> int:
        return self._txn_completed

    # -- main loop ----------------------------------------------------------

    def _deliver_events(self) -> bool:
        delivered = False
        q = self._eventq
        while q and q[0][0] == self.now:
            _, cid, _, payload = heapq.heappop(q)
            self._components[cid].on_event(payload)
            delivered = True
        return delivered

    def run_until(self, stop: Optional[Cycle] = None) -> SimStats:
        """Advance until `stop`, or to quiescence when `stop` is None.

        Quiescence means no pending events and no component able to make
        progress; if transactions are still outstanding at that point the
        run ends with a deadlock report instead of hanging.
        """
        comps = self._components
        while True:
            if stop is not None and self.now >= stop:
                break
            delivered = self._deliver_events()
            before = self._progress
            for c in comps:
                c.step()
            stalled = not delivered and self._progress == before
            if stalled and not self._eventq:
                # One full cycle with nothing delivered and nothing changed,
                # and nothing scheduled: this run is finished or wedged.
                if self.outstanding > 0:
                    busy = [c.name for c in comps if c.busy()]
                    self.stats.deadlock = DeadlockReport(self.now, self.outstanding, busy)
                else:
                    self.stats.quiescent = True
                break
            if stalled and not any(c.busy() for c in comps):
                nxt = self._eventq[0][0]
                if stop is not None and nxt > stop:
                    self.now = stop
                else:
                    self.now = nxt
                continue
            self.now += 1
        self.stats.elapsed_cycles = self.now
        return self.stats

    def emit_trace(self, component: str, event: str, channel: str,
                   txn_id: int, addr: int, src: str, dst: str) -> None:
        if self.trace is not None:
            self.trace(self.now, component, event, channel, txn_id, addr, src, dst)
