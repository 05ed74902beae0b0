"""Deterministic discrete-event engine: clock, event queue, links, energy, RNG.

Time is kept as integer milliseconds throughout so that traces are
bit-reproducible across platforms. All randomness flows through a seeded
SplitMix64 generator owned by the world.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

MASK64 = (1 << 64) - 1


class SchedulingInPast(Exception):
    """Raised when an event is scheduled before the current clock time."""


def s_to_ms(seconds: float) -> int:
    return int(round(seconds * 1000))


def ms_to_s(ms: int) -> float:
    return ms / 1000.0


class Rng:
    """SplitMix64 pseudo-random generator.

    Identical seeds produce identical streams in any implementation
    language, which is what keeps event traces reproducible.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of entropy."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n > 0")
        return self.next_u64() % n

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "big")
        return bytes(out[:n])

    def fork(self, salt: int) -> "Rng":
        """Derive an independent generator; used for per-subrun seeding."""
        child = Rng(self.state ^ (salt * 0x9E3779B97F4A7C15 & MASK64))
        child.next_u64()
        return child


class SimClock:
    def __init__(self):
        self.now = 0  # milliseconds

    def advance(self, t: int) -> None:
        if t < self.now:
            raise SchedulingInPast(f"clock cannot go back: {t} < {self.now}")
        self.now = t


class EventQueue:
    """Timestamp-ordered queue with stable (insertion order) tie-breaking."""

    def __init__(self, clock: SimClock):
        self.clock = clock
        self._heap: list[tuple[int, int, object]] = []
        self._seq = 0

    def schedule(self, at: int, fn) -> int:
        if at < self.clock.now:
            raise SchedulingInPast(f"schedule at {at} < now {self.clock.now}")
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, fn))
        return self._seq

    def __len__(self) -> int:
        return len(self._heap)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def pop(self):
        at, _, fn = heapq.heappop(self._heap)
        self.clock.advance(at)
        return fn


class Trace:
    """Chronological list of simulation events, exportable as JSON lines."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.events: list[dict] = []

    def emit(self, t: int, kind: str, node: str, **detail) -> None:
        if self.enabled:
            self.events.append({"t": t, "kind": kind, "node": node, "detail": detail})

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.events
        )

    def by_kind(self, *kinds: str) -> list[dict]:
        return [e for e in self.events if e["kind"] in kinds]


@dataclass
class EnergyBudget:
    """Abstract per-device energy accounting.

    `remaining` only ever decreases; the device counts as exhausted once it
    hits zero and then drops all processing.
    """

    remaining: float = 50_000.0
    initial: float = field(default=0.0)
    cost_per_rx_byte: float = 0.00002
    cost_per_msg: float = 0.002
    cost_edhoc: float = 1.0
    cost_oscore_verify: float = 0.01
    exhausted: bool = False

    def __post_init__(self):
        if self.initial == 0.0:
            self.initial = self.remaining

    def drain(self, amount: float) -> float:
        """Drain `amount`, flooring at zero. Returns the amount actually drained."""
        if amount < 0:
            raise ValueError("energy drain must be non-negative")
        drained = min(amount, self.remaining)
        self.remaining -= drained
        if self.remaining <= 0.0:
            self.remaining = 0.0
            self.exhausted = True
        return drained

    def cost_of(self, event: str, nbytes: int = 0) -> float:
        if event == "rx_bytes":
            return self.cost_per_rx_byte * nbytes
        if event == "msg":
            return self.cost_per_msg
        if event == "edhoc":
            return self.cost_edhoc
        if event == "oscore_verify":
            return self.cost_oscore_verify
        raise ValueError(f"unknown energy event {event!r}")


def drain_energy(budget: EnergyBudget, event: str, nbytes: int = 0) -> float:
    """Drain the configured cost of one event class; returns drained amount."""
    return budget.drain(budget.cost_of(event, nbytes))


@dataclass
class Frame:
    """A message in flight, with bookkeeping for attribution and delivery."""

    msg: object  # SimMessage
    origin: str  # principal that caused this traffic ("legit", "attacker", ...)
    size: int


class Link:
    """Unidirectional bandwidth-limited FIFO link with tail-drop queueing.

    Serialization time is size*8/bandwidth; frames that arrive while
    `queue_capacity` frames are still serializing are dropped. An optional
    interceptor models an on-path attacker: it may pass, replace, or drop
    frames at delivery time.
    """

    def __init__(self, world, name: str, bandwidth_bps: int, delay_ms: int,
                 queue_capacity: int):
        self.world = world
        self.name = name
        self.bandwidth_bps = bandwidth_bps
        self.delay_ms = delay_ms
        self.queue_capacity = queue_capacity
        self._busy_until = 0
        self._pending: list[int] = []  # serialization-end times
        self.interceptor = None
        self.n_sent = 0
        self.n_delivered = 0
        self.n_dropped = 0
        self.bytes_delivered = 0

    def queue_len(self, now: int) -> int:
        self._pending = [t for t in self._pending if t > now]
        return len(self._pending)

    def serialization_ms(self, size: int) -> int:
        bits = size * 8
        return (bits * 1000 + self.bandwidth_bps - 1) // self.bandwidth_bps

    def transmit(self, frame: Frame, deliver_fn) -> tuple[str, int | None]:
        """Enqueue a frame. Returns ("delivered", at_ms) or ("dropped", None)."""
        now = self.world.clock.now
        self.n_sent += 1
        if self.queue_len(now) >= self.queue_capacity:
            self.n_dropped += 1
            self.world.trace.emit(now, "drop", self.name,
                                  reason="queue_full", dst=frame.msg.dst,
                                  origin=frame.origin, size=frame.size)
            return ("dropped", None)
        start = max(now, self._busy_until)
        end = start + self.serialization_ms(frame.size)
        self._busy_until = end
        self._pending.append(end)
        deliver_at = end + self.delay_ms

        def deliver():
            out = frame
            if self.interceptor is not None:
                out = self.interceptor(self, frame)
                if out is None:
                    self.n_dropped += 1
                    self.world.trace.emit(self.world.clock.now, "drop", self.name,
                                          reason="intercepted", dst=frame.msg.dst,
                                          origin=frame.origin, size=frame.size)
                    return
            self.n_delivered += 1
            self.bytes_delivered += out.size
            deliver_fn(out)

        self.world.schedule(deliver_at, deliver)
        return ("delivered", deliver_at)


class World:
    """Owns the clock, queue, RNG and trace for one simulation run."""

    def __init__(self, seed: int, trace_enabled: bool = True):
        self.clock = SimClock()
        self.queue = EventQueue(self.clock)
        self.rng = Rng(seed)
        self.trace = Trace(trace_enabled)
        self.nodes: dict[str, object] = {}

    def schedule(self, at: int, fn) -> int:
        return self.queue.schedule(at, fn)

    def schedule_in(self, delay: int, fn) -> int:
        return self.queue.schedule(self.clock.now + delay, fn)

    def emit(self, kind: str, node: str, **detail) -> None:
        self.trace.emit(self.clock.now, kind, node, **detail)

    def add_node(self, node) -> None:
        self.nodes[node.address] = node

    def run_until(self, t_end: int) -> Trace:
        if t_end < self.clock.now:
            raise SchedulingInPast(f"t_end {t_end} < now {self.clock.now}")
        while self.queue and self.queue.peek_time() <= t_end:
            fn = self.queue.pop()
            fn()
        self.clock.advance(t_end)
        return self.trace
