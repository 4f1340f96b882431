"""Deterministic discrete-event network substrate.

Virtual time is integer milliseconds and advances only when events pop.
Events are totally ordered by (fire_at, seq); seq is a strictly increasing
insertion counter, so ties resolve in insertion order. Message delivery over
a link costs latency plus FIFO serialization delay:

    deliver_at = now + latency + ceil((queue_occupancy + size) / bandwidth)

Monitoring traffic queues behind data traffic (lower priority). Crashed nodes
drop messages addressed to them; the recovery layer is responsible for making
up the loss.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import LinkDown, PastEvent, UnknownTarget

DATA = "data"
MONITOR = "monitor"

FAULT_KINDS = ("node-crash", "node-recover", "link-down", "link-up")


@dataclass(frozen=True)
class Event:
    fire_at: int
    seq: int
    target: str
    payload: object = None

    def order_key(self):
        return (self.fire_at, self.seq)


@dataclass
class LinkState:
    latency: int
    bandwidth: int  # bytes per ms
    up: bool = True
    occupancy: int = 0       # data bytes queued, not yet delivered
    mon_occupancy: int = 0   # monitoring bytes queued behind the data


@dataclass
class FaultScript:
    entries: list = field(default_factory=list)  # (fire_at, kind, target)

    @classmethod
    def from_text(cls, text: str) -> "FaultScript":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[1] not in FAULT_KINDS:
                raise ValueError(f"fault script line {lineno}: {raw!r}")
            entries.append((int(parts[0]), parts[1], parts[2]))
        entries.sort(key=lambda e: e[0])
        return cls(entries)

    def to_text(self) -> str:
        return "\n".join(f"{t} {kind} {target}" for t, kind, target in self.entries)


def link_id(a: str, b: str) -> str:
    return "~".join(sorted((a, b)))


class Network:
    """Single-threaded event loop owning the virtual clock, links, and nodes."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.handlers: dict[str, Callable] = {}
        self.node_up: dict[str, bool] = {}
        self.links: dict[tuple, LinkState] = {}  # directed (from, to)
        self.crash_hooks: dict[str, tuple] = {}  # node -> (on_crash, on_recover)
        # accounting for the conservation invariant
        self.sent = 0
        self.delivered = 0
        self.dropped_link_down = 0
        self.dropped_node_down = 0
        self.bytes_by_link: dict[tuple, int] = {}
        self.trace: Optional[list] = None  # set to [] to record deliveries

    # -- topology wiring -------------------------------------------------

    def add_node(self, node_id: str, handler: Optional[Callable] = None):
        self.node_up[node_id] = True
        if handler is not None:
            self.handlers[node_id] = handler

    def set_handler(self, node_id: str, handler: Callable):
        self.handlers[node_id] = handler

    def set_crash_hooks(self, node_id: str, on_crash=None, on_recover=None):
        self.crash_hooks[node_id] = (on_crash, on_recover)

    def add_link(self, a: str, b: str, latency: int, bandwidth: int):
        for frm, to in ((a, b), (b, a)):
            self.links[(frm, to)] = LinkState(latency=latency, bandwidth=bandwidth)

    def link_up(self, a: str, b: str) -> bool:
        st = self.links.get((a, b))
        return st is not None and st.up

    # -- event loop ------------------------------------------------------

    def schedule(self, fire_at: int, target: str, payload: object):
        if fire_at < self.now:
            raise PastEvent(f"fire_at {fire_at} < now {self.now}")
        self._seq += 1
        ev = Event(fire_at, self._seq, target, payload)
        heapq.heappush(self._heap, (ev.order_key(), ev))
        return ev

    def send(self, frm: str, to: str, msg: object, size: int, priority: str = DATA):
        """Queue msg on the (frm, to) link; raises LinkDown if the link is down."""
        st = self.links.get((frm, to))
        if st is None:
            raise UnknownTarget(f"no link {frm}->{to}")
        self.sent += 1
        if not st.up or not self.node_up.get(frm, False):
            self.dropped_link_down += 1
            raise LinkDown(f"link {frm}->{to} is down")
        if priority == DATA:
            backlog = st.occupancy
        else:
            backlog = st.occupancy + st.mon_occupancy
        deliver_at = self.now + st.latency + int(math.ceil((backlog + size) / st.bandwidth))
        if priority == DATA:
            st.occupancy += size
        else:
            st.mon_occupancy += size
        self.bytes_by_link[(frm, to)] = self.bytes_by_link.get((frm, to), 0) + size
        self.schedule(deliver_at, to, ("_deliver", frm, to, msg, size, priority))

    def run_until(self, t: int):
        if t < self.now:
            raise PastEvent(f"run_until({t}) < now {self.now}")
        while self._heap and self._heap[0][0][0] <= t:
            _, ev = heapq.heappop(self._heap)
            self.now = ev.fire_at
            self._dispatch(ev)
        self.now = t

    def run(self):
        while self._heap:
            _, ev = heapq.heappop(self._heap)
            self.now = ev.fire_at
            self._dispatch(ev)

    def _dispatch(self, ev: Event):
        payload = ev.payload
        if isinstance(payload, tuple) and payload and payload[0] == "_deliver":
            _, frm, to, msg, size, priority = payload
            st = self.links[(frm, to)]
            if priority == DATA:
                st.occupancy = max(0, st.occupancy - size)
            else:
                st.mon_occupancy = max(0, st.mon_occupancy - size)
            if not self.node_up.get(to, False):
                self.dropped_node_down += 1
                return
            self.delivered += 1
            if self.trace is not None:
                self.trace.append((self.now, frm, to, repr(msg)))
            handler = self.handlers.get(to)
            if handler is not None:
                handler(msg, self.now, frm)
            return
        if isinstance(payload, tuple) and payload and payload[0] == "_fault":
            self._apply_fault(payload[1], payload[2])
            return
        if not self.node_up.get(ev.target, True):
            self.dropped_node_down += 1
            return
        handler = self.handlers.get(ev.target)
        if handler is not None:
            handler(payload, self.now, None)

    # -- faults ----------------------------------------------------------

    def inject(self, script: FaultScript):
        """Validate and schedule a fault script against the current network."""
        for t, kind, target in script.entries:
            if kind in ("node-crash", "node-recover"):
                if target not in self.node_up:
                    raise UnknownTarget(f"fault target node {target}")
            else:
                a, _, b = target.partition("~")
                if (a, b) not in self.links:
                    raise UnknownTarget(f"fault target link {target}")
            self.schedule(max(t, self.now), "_faults", ("_fault", kind, target))

    def _apply_fault(self, kind: str, target: str):
        if kind == "node-crash":
            self.node_up[target] = False
            hook = self.crash_hooks.get(target)
            if hook and hook[0]:
                hook[0](self.now)
        elif kind == "node-recover":
            self.node_up[target] = True
            hook = self.crash_hooks.get(target)
            if hook and hook[1]:
                hook[1](self.now)
        else:
            a, _, b = target.partition("~")
            up = kind == "link-up"
            for key in ((a, b), (b, a)):
                st = self.links.get(key)
                if st is not None:
                    st.up = up

    # -- invariant helpers ----------------------------------------------

    def conservation_ok(self) -> bool:
        return self.sent == (
            self.delivered + self.dropped_link_down + self.dropped_node_down
            + self._in_flight()
        )

    def _in_flight(self) -> int:
        n = 0
        for _, ev in self._heap:
            p = ev.payload
            if isinstance(p, tuple) and p and p[0] == "_deliver":
                n += 1
        return n
