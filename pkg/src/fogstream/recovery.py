"""Replay logs and failure detection for exactly-once recovery.

Every producing host keeps an UpstreamLog per outgoing edge: emitted buffers
stay retained until the downstream consumer acknowledges durable
incorporation. Replay after a failure resends the retained suffix in (origin,
seq) order; downstream deduplication absorbs anything that survived twice.

The log has a bounded budget. If retention is evicted before it was acked, a
later replay of that edge raises ReplayGap and the coordinator falls back to
a stop-the-world redeploy for the query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ReplayGap


class UpstreamLog:
    def __init__(self, budget: int = 4096):
        self.budget = budget
        self.entries: dict = {}     # (origin, seq) -> buffer
        self._order: list = []      # insertion order, for budget eviction
        self.evicted: set = set()   # origins that lost unacked entries
        self.max_seq: dict = {}     # origin -> highest seq ever appended
        self.appended = 0
        self.acked = 0

    def append(self, buffer):
        key = (buffer.origin, buffer.seq)
        if key in self.entries:
            return
        self.entries[key] = buffer
        self._order.append(key)
        self.max_seq[buffer.origin] = max(self.max_seq.get(buffer.origin, 0),
                                          buffer.seq)
        self.appended += 1
        while len(self.entries) > self.budget:
            victim = self._order.pop(0)
            if victim in self.entries:
                del self.entries[victim]
                self.evicted.add(victim[0])

    def ack(self, origin: str, seqs):
        for seq in seqs:
            if (origin, seq) in self.entries:
                del self.entries[(origin, seq)]
                self.acked += 1

    def replay(self) -> list:
        """All retained buffers in (origin, seq) order.

        Raises ReplayGap when an origin lost unacked entries to the budget;
        a partial replay would silently break exactly-once.
        """
        if self.evicted:
            raise ReplayGap(f"evicted origins {sorted(self.evicted)}")
        return [self.entries[k] for k in sorted(self.entries)]

    def advance_points(self) -> dict:
        """Per origin, the seq below which nothing will ever be replayed.

        Everything up to that point was appended and later acked (hence
        durably incorporated downstream), so a fresh consumer may skip it.
        """
        out = {}
        for origin in sorted(self.max_seq):
            low = self.low_watermark(origin)
            out[origin] = (low - 1) if low is not None else self.max_seq[origin]
        return out

    def low_watermark(self, origin: str):
        seqs = [s for (o, s) in self.entries if o == origin]
        return min(seqs) if seqs else None

    def __len__(self):
        return len(self.entries)


@dataclass
class FailureDetector:
    """Heartbeat bookkeeping; a node is suspected after timeout_ms of silence."""
    timeout_ms: int
    last_seen: dict = field(default_factory=dict)
    down: set = field(default_factory=set)

    def beat(self, node: str, now: int) -> bool:
        """Record a heartbeat; True when it revives a suspected node."""
        self.last_seen[node] = now
        revived = node in self.down
        self.down.discard(node)
        return revived

    def sweep(self, now: int) -> list:
        """Newly suspected nodes, sorted for determinism."""
        fresh = []
        for node, seen in sorted(self.last_seen.items()):
            if node in self.down:
                continue
            if now - seen > self.timeout_ms:
                self.down.add(node)
                fresh.append(node)
        return fresh
