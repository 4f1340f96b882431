"""Per-node execution engines over the simulated network.

Data travels in buffers with a stable identity (origin instance, sequence
number) minted at the source. Stateless operators transform a buffer in
place and keep its identity, so deduplication and acknowledgment work
end to end across moves and replays without translation tables. Stateful
operators mint their own identities deterministically: an aggregate's output
buffer for window [start, start+w) always has seq start//w + 1, so a rebuilt
instance re-emits the same identities and downstream dedup absorbs overlap.

Exactly-once rests on three rules:
  1. every producing host retains emitted buffers in an UpstreamLog until
     the consumer acknowledges durable incorporation;
  2. a sink acks on incorporation, a stateless host forwards downstream acks
     upstream unchanged, and a window operator holds acks back until every
     window the buffer feeds has been finalized and acked downstream;
  3. replay resends the retained suffix in (origin, seq) order.

Watermarks ride on buffers per origin. Buffers whose origin is a source
instance arrive densely numbered and are processed strictly in sequence
order per (edge, origin), which keeps per-origin watermarks monotone and
makes late records impossible. A final punctuation carries the run horizon
so every window that should close does. Empty buffers still flow (and
consume sequence numbers) so watermarks advance through selective filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import deploy as dep
from .errors import LinkDown, UnknownTarget
from .monitor import StatsReport
from .placement import DEFAULT_WORK
from .query import op_from_text
from .recovery import UpstreamLog
from .reference import top_entries
from .simnet import DATA, MONITOR


@dataclass
class EngineConfig:
    buffer_capacity: int = 4096
    log_budget: int = 4096
    hb_interval_ms: int = 500
    stats_interval_ms: int = 1000
    rollout_timeout_ms: int = 8000
    hb_timeout_ms: int = 1600
    link_detect_ms: int = 1500
    drain_ms: int = 10000
    recovery_mode: str = "fine"     # fine | stw


@dataclass
class Buffer:
    origin: str       # minting instance key, e.g. "0.2" or "2.0"
    seq: int
    records: list     # [(event_ts, origin_sensor, values dict)]
    watermark: int

    def max_ts(self) -> int:
        if self.records:
            return max(r[0] for r in self.records)
        return self.watermark - 1


def record_size(values: dict) -> int:
    size = 8
    for v in values.values():
        if isinstance(v, bool):
            size += 1
        elif isinstance(v, (int, float)):
            size += 8
        else:
            size += 16
    return size


@dataclass
class DataMsg:
    query: str
    edge: str
    buffer: Buffer

    def size(self) -> int:
        return dep.DATA_HEADER_BYTES + sum(record_size(v)
                                           for _, _, v in self.buffer.records)


@dataclass
class AckMsg:
    query: str
    edge: str
    origin: str
    seqs: list


@dataclass
class AdvanceMsg:
    """Replay preamble: seqs at or below `upto` were acked before the replay
    and will never be resent; a fresh consumer fast-forwards past them."""
    query: str
    edge: str
    origin: str
    upto: int


@dataclass
class Envelope:
    """Source-routed control carrier; path is the remaining hops."""
    path: list
    msg: object
    size: int


@dataclass
class Heartbeat:
    node: str
    t: int


class _InState:
    """Per (ingress edge, origin) consumer state."""

    def __init__(self, dense: bool):
        self.dense = dense
        self.cum = 0          # highest contiguous seq processed (dense only)
        self.held: dict = {}  # out-of-order buffers waiting for the gap
        self.seen: set = set()
        self.wm = 0
        self.last_from = None
        self.holdback: list = []  # [(seq, max_ts)] awaiting a safe boundary


class _AggState:
    def __init__(self):
        self.windows: dict = {}   # (start, key tuple) -> [(ts, origin, value)]
        self.boundary = 0         # all windows ending here or before finalized
        self.pending: list = []   # [seq, start, end, acked]


class _TopkState:
    def __init__(self, op):
        self.state: dict = {}
        self.pending_records: list = []
        self.next_b = op.period_ms
        self.last_merged = 0
        self.pending: list = []   # [seq, boundary, acked]


class _QueryState:
    def __init__(self, nep: dep.NodeExecutionPlan):
        # volatile runtime state, wiped on crash
        self.in_state: dict = {}
        self.logs: dict = {}
        self.paused: set = set()
        self.paused_out: dict = {}
        self.agg: dict = {}
        self.topk: dict = {}
        self.cursor: dict = {}
        self.out_seq: dict = {}
        self.latency_samples: list = []
        self.reported_samples = 0
        self.op_counts: dict = {}        # op_index -> [records_in, records_out]
        self.retx_age: dict = {}         # (edge, (origin, seq)) -> sweeps seen
        self.sink_seen: set = set()      # (origin, seq) already emitted
        self.active = False
        self.horizon = 0
        self.tick_scheduled = False
        self.adopt(nep)

    def adopt(self, nep: dep.NodeExecutionPlan):
        """Install plan-derived maps; runtime state is left untouched."""
        self.epoch = nep.epoch
        self.nep = nep
        self.ops = {}
        for op_index, _, op_text in nep.pipeline:
            if op_index not in self.ops:
                self.ops[op_index] = op_from_text(op_text)
        self.sources = list(nep.sources)
        self.ingress = {e: (up, local, entry, origins)
                        for e, up, local, entry, origins in nep.ingress}
        self.egress_by_op: dict = {}
        for e, down, route, from_op in nep.egress:
            self.egress_by_op.setdefault(from_op, []).append((e, route, down))
        self.relay = {e: (prev, nxt) for e, prev, nxt in nep.relay}
        self.origin_in_edge = {}
        for e, up, local, entry, origins in nep.ingress:
            if not local:
                for o in origins:
                    self.origin_in_edge[o] = e
        self.source_edge = {}
        for inst, _ in nep.sources:
            origin = f"0.{inst}"
            for e, route, down in self.egress_by_op.get(0, []):
                if f":e{origin}-" in e:
                    self.source_edge[inst] = (e, False)
            for e, up, local, entry, origins in nep.ingress:
                # match on the edge id: a downstream local edge can carry
                # the same single origin when only one member exists
                if local and f":e{origin}-" in e:
                    self.source_edge[inst] = (e, True)
        # drop state for instances no longer hosted (planned moves)
        for i in [i for i in self.agg if i not in self.ops]:
            del self.agg[i]
        for i in [i for i in self.topk if i not in self.ops]:
            del self.topk[i]
        live = {eg[0] for egs in self.egress_by_op.values() for eg in egs}
        live |= set(self.ingress)  # local feed logs survive reconfiguration
        for e in [e for e in self.logs if e not in live]:
            del self.logs[e]
        for key in [k for k in self.in_state if k[0] not in self.ingress]:
            del self.in_state[key]

    def clear_volatile(self):
        self.in_state = {}
        self.logs = {}
        self.paused_out = {}
        self.agg = {}
        self.topk = {}
        self.cursor = {}
        self.out_seq = {}
        self.retx_age = {}
        self.sink_seen = set()
        self.tick_scheduled = False

    def instate(self, edge: str, origin: str) -> _InState:
        key = (edge, origin)
        if key not in self.in_state:
            self.in_state[key] = _InState(dense=origin.startswith("0."))
        return self.in_state[key]

    def expected_pairs(self) -> list:
        """Root (edge, origin) pairs that independently carry watermarks.

        Local edges between co-hosted operators are excluded: buffers flow
        through them inline with identity and watermark unchanged, so only
        network ingress edges and local source feeds are authoritative.
        """
        out = []
        for e, (up, local, entry, origins) in sorted(self.ingress.items()):
            if local and entry != 1:
                continue
            for o in origins:
                out.append((e, o))
        return out

    def min_watermark(self) -> int:
        wms = []
        for pair in self.expected_pairs():
            ist = self.in_state.get(pair)
            wms.append(ist.wm if ist else 0)
        return min(wms) if wms else 0

    def stateful_from(self, entry_op: int):
        """Index of the stateful op this entry feeds on-node, if any."""
        k = entry_op
        while k in self.ops:
            if self.ops[k].kind in ("key_aggregate", "topk"):
                return k
            if self.ops[k].kind == "sink":
                return None
            k += 1
        return None

    def work_from(self, start_op: int) -> float:
        w = 0.0
        k = start_op
        while k in self.ops:
            op = self.ops[k]
            w += DEFAULT_WORK[op.kind]
            if op.kind in ("key_aggregate", "topk", "sink"):
                break
            k += 1
        return w

    def count(self, op_index: int, n_in: int, n_out: int):
        c = self.op_counts.setdefault(op_index, [0, 0])
        c[0] += n_in
        c[1] += n_out


class EngineNode:
    def __init__(self, net, node_id: str, cpu_capacity: float,
                 traces=None, config=None, aqp=None):
        self.net = net
        self.node = node_id
        self.capacity = max(cpu_capacity, 1e-9)
        self.traces = traces or {}
        self.cfg = config or EngineConfig()
        self.aqp = aqp
        self.coord_paths: list = []   # primary plus node-disjoint alternates
        self.queries: dict = {}
        self.busy_until = 0.0
        self.busy_ms = 0.0
        self._busy_reported = 0.0
        self.queue_len = 0
        self.incarnation = 0
        # delivered sink output per query; survives redeploys because it
        # models records already handed to the outside world
        self.sink_log: dict = {}
        self.counters = {"dup": 0, "orphan": 0, "late": 0, "send_dropped": 0,
                         "held": 0, "replayed": 0, "retx": 0}
        if node_id not in net.node_up:
            net.add_node(node_id)
        net.set_handler(node_id, self.handle)
        net.set_crash_hooks(node_id, self.on_crash, self.on_recover)

    # -- lifecycle -------------------------------------------------------

    def start(self, coord_paths: list):
        """Begin heartbeat and stats reporting toward the coordinator.

        Heartbeats and control acks travel over every given path so one
        failed relay cannot make a healthy node look dead.
        """
        self.coord_paths = [list(p) for p in coord_paths if p]
        now = self.net.now
        self.net.schedule(now + self.cfg.hb_interval_ms, self.node,
                          ("hb", self.incarnation))
        self.net.schedule(now + self.cfg.stats_interval_ms, self.node,
                          ("stats", self.incarnation))

    def on_crash(self, now: int):
        self.incarnation += 1
        self.busy_until = 0.0
        self.queue_len = 0
        for st in self.queries.values():
            st.clear_volatile()

    def on_recover(self, now: int):
        self.busy_until = float(now)
        if self.coord_paths:
            self._send_coord(Heartbeat(self.node, now), dep.HEARTBEAT_BYTES,
                             priority=MONITOR)
            self.net.schedule(now + self.cfg.hb_interval_ms, self.node,
                              ("hb", self.incarnation))
            self.net.schedule(now + self.cfg.stats_interval_ms, self.node,
                              ("stats", self.incarnation))
        for q in sorted(self.queries):
            st = self.queries[q]
            if st.active and st.sources:
                # sources resume from their live position; outage records are
                # lost unless a replica replays them
                for inst, sensor in st.sources:
                    trace = self.traces.get(sensor, ())
                    c = st.cursor.get(inst, 0)
                    while c < len(trace) and trace[c][0] < now:
                        c += 1
                    st.cursor[inst] = c
                self._schedule_tick(q, st, now)

    # -- message dispatch ------------------------------------------------

    def handle(self, msg, now, frm):
        if isinstance(msg, Envelope):
            if msg.path:
                self._send(msg.path[0],
                           Envelope(msg.path[1:], msg.msg, msg.size), msg.size)
            elif isinstance(msg.msg, tuple) and msg.msg[0] == "coord-paths":
                self.coord_paths = [list(p) for p in msg.msg[1] if p]
            else:
                self.on_control(msg.msg, now)
            return
        if isinstance(msg, DataMsg):
            self.on_data(msg, now, frm)
            return
        if isinstance(msg, AckMsg):
            self.on_ack(msg, now)
            return
        if isinstance(msg, AdvanceMsg):
            self.on_advance(msg, now)
            return
        if isinstance(msg, tuple):
            kind = msg[0]
            if kind == "task":
                self._task(msg, now)
            elif kind == "tick":
                if msg[1] == self.incarnation:
                    self._tick(msg[2], now)
            elif kind == "hb":
                if msg[1] == self.incarnation:
                    self._hb(now)
            elif kind == "stats":
                if msg[1] == self.incarnation:
                    self._stats(now)

    # -- sending helpers -------------------------------------------------

    def _send(self, to, msg, size, priority=DATA):
        try:
            self.net.send(self.node, to, msg, size, priority)
        except (LinkDown, UnknownTarget):
            self.counters["send_dropped"] += 1

    def _send_envelope(self, path, msg, size, priority=DATA):
        if not path:
            return
        self._send(path[0], Envelope(path[1:], msg, size), size, priority)

    def _send_coord(self, msg, size, priority=DATA):
        for path in self.coord_paths:
            self._send_envelope(path, msg, size, priority)

    def _ctrl_ack(self, msg, ok=True, detail=""):
        ack = dep.CtrlAck(msg.query, msg.epoch, msg.kind, self.node, ok, detail)
        self._send_coord(ack, dep.wire_size(ack))

    # -- control plane ---------------------------------------------------

    def on_control(self, msg, now):
        kind = msg.kind
        q = msg.query
        st = self.queries.get(q)
        if st is not None and msg.epoch < st.epoch:
            self._ctrl_ack(msg)  # stale epoch, idempotent drop
            return
        ok, detail = True, ""
        if kind == "deploy":
            if st is not None and msg.epoch == st.epoch:
                pass  # same-epoch redeploy is a no-op
            elif st is None or msg.mode == "full":
                self.queries[q] = _QueryState(msg.nep)
            else:
                old_logs = dict(st.logs)
                st.adopt(msg.nep)
                self._reinject(q, st, old_logs, now)
        elif kind == "undeploy":
            self.queries.pop(q, None)
        elif st is None:
            ok, detail = False, "not deployed"
        elif kind == "pause":
            st.paused.add(msg.edge)
        elif kind == "resume":
            st.paused.discard(msg.edge)
            for dm in st.paused_out.pop(msg.edge, []):
                route = self._route_of(st, msg.edge)
                if route:
                    self._send(route[1], dm, dm.size())
        elif kind == "reroute":
            self._reroute(st, msg)
        elif kind == "replay":
            ok, detail = self._replay(st, msg.edge)
        elif kind == "source-start":
            self._source_start(q, st, msg, now)
        self._ctrl_ack(msg, ok, detail)

    def _route_of(self, st, edge):
        for entries in st.egress_by_op.values():
            for e, route, down in entries:
                if e == edge:
                    return route
        return None

    def _reroute(self, st, msg):
        if msg.prev_hop is None and msg.next_hop is None:
            st.relay.pop(msg.edge, None)
        else:
            st.relay[msg.edge] = (msg.prev_hop, msg.next_hop)

    def _replay(self, st, edge):
        route = self._route_of(st, edge)
        if route is None:
            return False, "no egress route"
        q = st.nep.query
        log = st.logs.get(edge)
        from_op = None
        for op_index, entries in st.egress_by_op.items():
            if any(e == edge for e, _, _ in entries):
                from_op = op_index
        points = dict(log.advance_points()) if log is not None else {}
        producer_key = edge.split(":e", 1)[1].rsplit("-", 1)[0]
        for origin, base in self._minted_base(st, from_op).items():
            if from_op == 0 and origin != producer_key:
                continue  # a source edge carries exactly its own origin
            # the edge may postdate a reconfiguration: seqs emitted before
            # it existed were consumed on the old path, so a fresh consumer
            # must not wait for them
            if log is None or origin not in log.max_seq:
                points[origin] = max(points.get(origin, 0), base)
        for origin, upto in sorted(points.items()):
            if upto > 0:
                self._send(route[1], AdvanceMsg(q, edge, origin, upto),
                           dep.ACK_BYTES)
        if log is None:
            return True, "nothing retained"
        try:
            retained = log.replay()
        except Exception as exc:  # ReplayGap
            return False, str(exc)
        for buf in retained:
            dm = DataMsg(q, edge, buf)
            self.counters["replayed"] += 1
            self._send(route[1], dm, dm.size())
        return True, f"{len(retained)} buffers"

    def _minted_base(self, st, from_op):
        """Origins minted on this node that pass unchanged through from_op.

        For those the local out_seq counter is authoritative: every seq it
        covers was emitted here, and any still-unacked one sits retained in
        some local log."""
        if from_op is None:
            return {}
        out = {}
        for origin, seq in st.out_seq.items():
            minted = int(origin.split(".")[0])
            if minted > from_op:
                continue
            between = [st.ops[k] for k in range(minted + 1, from_op + 1)
                       if k in st.ops]
            if any(op.kind in ("key_aggregate", "topk") for op in between):
                continue
            out[origin] = seq
        return out

    def _reinject(self, q, st, old_logs, now):
        """Re-drive unacked buffers from egress edges a plan update removed.

        The old consumer may have been undeployed with these buffers still
        undelivered, so they must flow through the new data path; dedup on
        (origin, seq) absorbs any copy that did get through."""
        kept = {e for egs in st.egress_by_op.values() for e, _, _ in egs}
        for edge in sorted(old_logs):
            if edge in kept:
                continue
            st.paused_out.pop(edge, None)
            head, tail = edge.rsplit("-", 1)
            producer = int(head.rsplit("e", 1)[1].split(".")[0])
            consumer = int(tail.split(".")[0])
            log = old_logs[edge]
            for key in sorted(log.entries):
                buf = log.entries[key]
                if consumer in st.ops:
                    self._enqueue(q, st, None, consumer, buf, now)
                elif producer in st.ops:
                    self._egress(q, st, producer, buf, now)
                # otherwise the upstream hop still retains an unacked copy
                # (acks chain hop by hop) and will re-deliver it

    def _source_start(self, q, st, msg, now):
        st.active = True
        st.horizon = msg.horizon
        for inst, sensor in st.sources:
            st.cursor.setdefault(inst, 0)
            if msg.resume == "live":
                trace = self.traces.get(sensor, ())
                c = st.cursor[inst]
                while c < len(trace) and trace[c][0] < now:
                    c += 1
                st.cursor[inst] = c
        if st.sources:
            self._schedule_tick(q, st, now)

    def _schedule_tick(self, q, st, now):
        period = st.ops[0].period_ms
        next_t = ((now // period) + 1) * period
        self.net.schedule(next_t, self.node, ("tick", self.incarnation, q))
        st.tick_scheduled = True

    # -- sources ---------------------------------------------------------

    def _tick(self, q, now):
        st = self.queries.get(q)
        if st is None or not st.active or not st.sources:
            return
        src = st.ops[0]
        horizon = st.horizon
        wm = horizon if now >= horizon else max(0, now - src.delay_ms)
        cutoff = min(now, horizon)
        cap = self.cfg.buffer_capacity
        for inst, sensor in st.sources:
            trace = self.traces.get(sensor, ())
            c = st.cursor.get(inst, 0)
            batch = []
            while c < len(trace) and trace[c][0] < cutoff:
                ts, values = trace[c]
                c += 1
                if self.aqp is not None and not self.aqp.wants(q, sensor, ts,
                                                              values):
                    continue
                batch.append((ts, sensor, dict(values)))
            st.cursor[inst] = c
            st.count(0, len(batch), len(batch))
            origin = f"0.{inst}"
            chunks = [batch[i:i + cap] for i in range(0, len(batch), cap)] or [[]]
            for chunk in chunks:
                seq = st.out_seq.get(origin, 0) + 1
                st.out_seq[origin] = seq
                buf = Buffer(origin, seq, chunk, wm)
                edge_info = st.source_edge.get(inst)
                edge = edge_info[0] if edge_info else None
                if edge_info and edge_info[1]:
                    # retain raw buffers on local feeds too: if the consumer
                    # later moves off-node, they are the only durable copy
                    log = st.logs.setdefault(edge,
                                             UpstreamLog(self.cfg.log_budget))
                    log.append(buf)
                self._enqueue(q, st, edge, 1, buf, now, charge_from=0)
        if now < horizon:
            self.net.schedule(now + src.period_ms, self.node,
                              ("tick", self.incarnation, q))
        else:
            st.active = False

    # -- data plane ------------------------------------------------------

    def on_data(self, msg, now, frm):
        st = self.queries.get(msg.query)
        if st is None:
            self.counters["orphan"] += 1
            return
        edge = msg.edge
        if edge in st.relay:
            _, nxt = st.relay[edge]
            self._send(nxt, msg, msg.size())
            return
        ing = st.ingress.get(edge)
        if ing is None:
            self.counters["orphan"] += 1
            return
        # a local ingress edge can still receive in-flight network buffers
        # during a reconfiguration; dedup below keeps delivery exact
        _, _, entry_op, _ = ing
        buf = msg.buffer
        ist = st.instate(edge, buf.origin)
        ist.last_from = frm
        if ist.dense:
            if buf.seq <= ist.cum or buf.seq in ist.held:
                self.counters["dup"] += 1
                ist.wm = max(ist.wm, buf.watermark)
                return
            ist.held[buf.seq] = buf
            if buf.seq != ist.cum + 1:
                self.counters["held"] += 1
            self._drain_held(msg.query, st, edge, entry_op, ist, buf.origin,
                             now)
        else:
            if buf.seq in ist.seen:
                self.counters["dup"] += 1
                ist.wm = max(ist.wm, buf.watermark)
                return
            ist.seen.add(buf.seq)
            self._enqueue(msg.query, st, edge, entry_op, buf, now)

    def on_advance(self, msg, now):
        st = self.queries.get(msg.query)
        if st is None:
            return
        if msg.edge in st.relay:
            _, nxt = st.relay[msg.edge]
            self._send(nxt, msg, dep.ACK_BYTES)
            return
        ing = st.ingress.get(msg.edge)
        if ing is None:
            return
        _, _, entry_op, _ = ing
        ist = st.instate(msg.edge, msg.origin)
        if not ist.dense or msg.upto <= ist.cum:
            return
        ist.cum = msg.upto
        for seq in [s for s in ist.held if s <= msg.upto]:
            del ist.held[seq]
        self._drain_held(msg.query, st, msg.edge, entry_op, ist, msg.origin,
                         now)

    def _drain_held(self, q, st, edge, entry_op, ist, origin, now):
        while True:
            nxt = ist.cum + 1
            if nxt in ist.held:
                ist.cum = nxt
                self._enqueue(q, st, edge, entry_op, ist.held.pop(nxt), now)
            elif (origin, nxt) in st.sink_seen:
                # already emitted at the local sink while this edge ran
                # inside the node, so the apparent gap is not a loss
                ist.cum = nxt
            else:
                return

    def _enqueue(self, q, st, edge, entry_op, buf, now, charge_from=None):
        work = st.work_from(entry_op if charge_from is None else charge_from)
        dur = len(buf.records) * work / self.capacity
        start = max(float(now), self.busy_until)
        self.busy_until = start + dur
        fire = int(math.ceil(self.busy_until))
        self.queue_len += 1
        self.net.schedule(fire, self.node,
                          ("task", self.incarnation, q, edge, entry_op, buf, dur))

    def _task(self, msg, now):
        _, inc, q, edge, entry_op, buf, dur = msg
        if inc != self.incarnation:
            return
        self.queue_len -= 1
        self.busy_ms += dur
        st = self.queries.get(q)
        if st is None:
            self.counters["orphan"] += 1
            return
        if edge is not None:
            ist = st.instate(edge, buf.origin)
            ist.wm = max(ist.wm, buf.watermark)
        network_ingress = (edge is not None and edge in st.ingress
                           and not st.ingress[edge][1])
        stateful = st.stateful_from(entry_op)
        if network_ingress and stateful is not None:
            st.instate(edge, buf.origin).holdback.append((buf.seq, buf.max_ts()))
        terminal = self._process(q, st, entry_op, buf, now)
        if terminal == "sink" and edge is not None and edge in st.ingress:
            # also acks late network copies on a now-local edge, so the
            # sender can settle its log instead of re-delivering
            ist = st.instate(edge, buf.origin)
            if ist.last_from:
                self._send(ist.last_from,
                           AckMsg(q, edge, buf.origin, [buf.seq]),
                           dep.ACK_BYTES)
        if network_ingress and terminal == "stateful":
            self._release(q, st, stateful, now)
        # egress output acks are chained on the downstream ack

    def _process(self, q, st, entry_op, buf, now):
        records = buf.records
        i = entry_op
        while True:
            op = st.ops.get(i)
            if op is None:
                out = Buffer(buf.origin, buf.seq, records, buf.watermark)
                self._egress(q, st, i - 1, out, now)
                return "egress"
            kind = op.kind
            if kind == "filter":
                st.count(i, len(records), 0)
                kept = []
                for r in records:
                    try:
                        ok = op.predicate.eval(r[2])
                    except KeyError:
                        continue
                    if ok:
                        kept.append(r)
                records = kept
                st.op_counts[i][1] += len(records)
            elif kind == "project":
                st.count(i, len(records), len(records))
                records = [(ts, o, {f: v[f] for f in v if f in op.fields})
                           for ts, o, v in records]
            elif kind == "map":
                st.count(i, len(records), 0)
                out = []
                for ts, o, v in records:
                    v = dict(v)
                    dropped = False
                    for target, expr in op.assignments:
                        try:
                            v[target] = expr.eval(v)
                        except KeyError:
                            dropped = True
                            break
                    if not dropped:
                        out.append((ts, o, v))
                records = out
                st.op_counts[i][1] += len(records)
            elif kind == "key_aggregate":
                st.count(i, len(records), 0)
                self._absorb_agg(st, i, records)
                self._finalize_agg(q, st, i, now)
                return "stateful"
            elif kind == "topk":
                st.count(i, len(records), 0)
                tk = st.topk.setdefault(i, _TopkState(op))
                tk.pending_records.extend(records)
                self._finalize_topk(q, st, i, now)
                return "stateful"
            elif kind == "sink":
                # end-to-end dedup: during a reconfiguration the same
                # (origin, seq) can arrive once over the old edge and once
                # re-driven over the new path, and per-edge state cannot
                # see across the two
                key = (buf.origin, buf.seq)
                if key in st.sink_seen:
                    self.counters["dup"] += 1
                    return "sink"
                st.sink_seen.add(key)
                st.count(i, len(records), len(records))
                out = self.sink_log.setdefault(q, [])
                for ts, o, v in records:
                    out.append((now, ts, o, v))
                    st.latency_samples.append(now - ts)
                return "sink"
            i += 1

    # -- stateful operators ---------------------------------------------

    def _absorb_agg(self, st, i, records):
        op = st.ops[i]
        ag = st.agg.setdefault(i, _AggState())
        for ts, o, v in records:
            start = (ts // op.window_ms) * op.window_ms
            if start + op.window_ms <= ag.boundary:
                self.counters["late"] += 1
                continue
            try:
                key = tuple(v[kf] for kf in (op.keys or []))
                value = v[op.agg_field] if op.agg_field else 1
            except KeyError:
                continue
            ag.windows.setdefault((start, key), []).append((ts, o, value))

    def _finalize_agg(self, q, st, i, now):
        op = st.ops[i]
        ag = st.agg.setdefault(i, _AggState())
        win = op.window_ms
        fence = (st.min_watermark() // win) * win
        end = ag.boundary + win
        while end <= fence:
            start = end - win
            keys = sorted(k for (s, k) in ag.windows if s == start)
            if keys:
                out_records = []
                for key in keys:
                    entries = ag.windows.pop((start, key))
                    if op.agg == "count":
                        agg = len(entries)
                    else:
                        agg = 0
                        for _, _, vv in sorted(entries):
                            agg += vv
                    values = {"ts": start, op.out_field: agg}
                    for name, kv in zip(op.keys or [], key):
                        values[name] = kv
                    out_records.append((start, "", values))
                st.op_counts[i][1] += len(out_records)
                seq = start // win + 1
                out = Buffer(f"{i}.0", seq, out_records, end)
                ag.pending.append([seq, start, end, False])
                term = self._emit_downstream(q, st, i, out, now)
                if term == "sink":
                    ag.pending[-1][3] = True
            end += win
        if fence > ag.boundary:
            ag.boundary = fence
        while ag.pending and ag.pending[0][3]:
            ag.pending.pop(0)

    def _finalize_topk(self, q, st, i, now):
        op = st.ops[i]
        tk = st.topk.setdefault(i, _TopkState(op))
        wm = st.min_watermark()
        while tk.next_b <= wm:
            t = tk.next_b
            due = [r for r in tk.pending_records if r[0] < t]
            tk.pending_records = [r for r in tk.pending_records if r[0] >= t]
            due.sort(key=lambda r: (r[0], r[1]))
            for ts, o, v in due:
                key = v.get(op.key_field) if op.key_field else o
                prev = tk.state.get(key)
                if prev is None or (ts, o) >= (prev[0], prev[1]):
                    tk.state[key] = (ts, o, v)
            out_records = []
            for key, (ts, o, v) in top_entries(tk.state, op):
                emitted = {f: v[f] for f in v if f in op.out_fields}
                out_records.append((t, o, emitted))
            st.op_counts[i][1] += len(out_records)
            out = Buffer(f"{i}.0", t // op.period_ms, out_records, t)
            tk.pending.append([t // op.period_ms, t, False])
            term = self._emit_downstream(q, st, i, out, now)
            if term == "sink":
                tk.pending[-1][2] = True
            tk.last_merged = t
            tk.next_b += op.period_ms
        while tk.pending and tk.pending[0][2]:
            tk.pending.pop(0)

    def _emit_downstream(self, q, st, i, buf, now):
        if (i + 1) in st.ops:
            return self._process(q, st, i + 1, buf, now)
        self._egress(q, st, i, buf, now)
        return "egress"

    def _release(self, q, st, i, now):
        """Ack held ingress buffers once their records are provably durable."""
        op = st.ops[i]
        if op.kind == "key_aggregate":
            ag = st.agg.get(i)
            if ag is None:
                return
            unacked = [p[1] for p in ag.pending if not p[3]]
            safe = min([ag.boundary] + unacked)
        else:
            tk = st.topk.get(i)
            if tk is None:
                return
            # top-k state is cumulative, so nothing is safe while any
            # emission is unacknowledged downstream
            safe = tk.last_merged if not tk.pending else 0
        for pair in st.expected_pairs():
            ist = st.in_state.get(pair)
            if ist is None or not ist.holdback or ist.last_from is None:
                continue
            ready = [seq for seq, max_ts in ist.holdback if max_ts < safe]
            if not ready:
                continue
            ist.holdback = [(s, m) for s, m in ist.holdback if m >= safe]
            edge, origin = pair
            self._send(ist.last_from, AckMsg(q, edge, origin, sorted(ready)),
                       dep.ACK_BYTES)

    # -- egress and acknowledgments --------------------------------------

    def _egress(self, q, st, from_op, buf, now):
        entries = st.egress_by_op.get(from_op)
        if not entries:
            self.counters["orphan"] += 1
            return
        if len(entries) == 1:
            edge, route, _ = entries[0]
        else:
            match = [e for e in entries if f":e{buf.origin}-" in e[0]]
            if not match:
                self.counters["orphan"] += 1
                return
            edge, route, _ = match[0]
        log = st.logs.setdefault(edge, UpstreamLog(self.cfg.log_budget))
        log.append(buf)
        dm = DataMsg(q, edge, buf)
        if edge in st.paused:
            st.paused_out.setdefault(edge, []).append(dm)
            return
        self._send(route[1], dm, dm.size())

    def on_ack(self, msg, now):
        st = self.queries.get(msg.query)
        if st is None:
            self.counters["orphan"] += 1
            return
        if msg.edge in st.relay:
            prev, _ = st.relay[msg.edge]
            self._send(prev, msg, dep.ACK_BYTES)
            return
        log = st.logs.get(msg.edge)
        if log is None:
            return
        log.ack(msg.origin, msg.seqs)
        origin = msg.origin
        minted_op = int(origin.split(".")[0])
        minted_inst = int(origin.split(".")[1])
        if minted_op == 0:
            if any(inst == minted_inst for inst, _ in st.sources):
                se = st.source_edge.get(minted_inst)
                if se is not None:
                    feed = st.logs.get(se[0])
                    if feed is not None:
                        # stateless hops keep (origin, seq), so the ack also
                        # settles the raw buffer on the source feed log
                        feed.ack(origin, msg.seqs)
                return  # minted here; chain ends
        elif minted_op in st.ops:
            self._mark_acked(q=msg.query, st=st, i=minted_op, seqs=msg.seqs,
                             now=now)
            return
        in_edge = st.origin_in_edge.get(origin)
        if in_edge:
            ist = st.in_state.get((in_edge, origin))
            if ist and ist.last_from:
                self._send(ist.last_from,
                           AckMsg(msg.query, in_edge, origin, msg.seqs),
                           dep.ACK_BYTES)

    def _mark_acked(self, q, st, i, seqs, now):
        op = st.ops[i]
        seqset = set(seqs)
        if op.kind == "key_aggregate":
            ag = st.agg.get(i)
            if ag is None:
                return
            for p in ag.pending:
                if p[0] in seqset:
                    p[3] = True
            while ag.pending and ag.pending[0][3]:
                ag.pending.pop(0)
        else:
            tk = st.topk.get(i)
            if tk is None:
                return
            for p in tk.pending:
                if p[0] in seqset:
                    p[2] = True
            while tk.pending and tk.pending[0][2]:
                tk.pending.pop(0)
        self._release(q, st, i, now)

    # -- reporting -------------------------------------------------------

    def _hb(self, now):
        self._send_coord(Heartbeat(self.node, now), dep.HEARTBEAT_BYTES,
                         priority=MONITOR)
        self._retransmit(now)
        self.net.schedule(now + self.cfg.hb_interval_ms, self.node,
                          ("hb", self.incarnation))

    def _retransmit(self, now):
        """Resend log entries unacked across heartbeat sweeps, with backoff.

        A relay crash shorter than the failure-detection timeout drops
        in-flight buffers without any coordinator-driven replay; downstream
        dedup absorbs copies that did arrive. Backoff (powers of two in
        sweeps) keeps entries legitimately held at a stateful consumer from
        flooding the link."""
        for q in sorted(self.queries):
            st = self.queries[q]
            routes = {e: route for egs in st.egress_by_op.values()
                      for e, route, _ in egs}
            fresh: dict = {}
            for edge in sorted(st.logs):
                route = routes.get(edge)
                if route is None:
                    continue
                log = st.logs[edge]
                for key in sorted(log.entries):
                    age = st.retx_age.get((edge, key), 0) + 1
                    fresh[(edge, key)] = age
                    if edge in st.paused:
                        continue
                    if age >= 2 and age & (age - 1) == 0:
                        dm = DataMsg(q, edge, log.entries[key])
                        self._send(route[1], dm, dm.size())
                        self.counters["retx"] += 1
            st.retx_age = fresh

    def _stats(self, now):
        interval = self.cfg.stats_interval_ms
        busy_delta = self.busy_ms - self._busy_reported
        self._busy_reported = self.busy_ms
        op_counts: dict = {}
        samples: dict = {}
        for q in sorted(self.queries):
            st = self.queries[q]
            for op_index, (a, b) in sorted(st.op_counts.items()):
                c = op_counts.setdefault(op_index, [0, 0])
                c[0] += a
                c[1] += b
            fresh = st.latency_samples[st.reported_samples:]
            st.reported_samples = len(st.latency_samples)
            if fresh:
                samples[q] = list(fresh)
        report = StatsReport(self.node, now,
                             min(1.0, busy_delta / interval), self.queue_len,
                             {i: tuple(c) for i, c in op_counts.items()},
                             samples)
        if self.coord_paths:
            # stats are best-effort; only the primary path carries them
            self._send_envelope(self.coord_paths[0], report, dep.STATS_BYTES,
                                priority=MONITOR)
        self.net.schedule(now + interval, self.node,
                          ("stats", self.incarnation))

    # -- introspection ---------------------------------------------------

    def emissions(self, query: str) -> list:
        return list(self.sink_log.get(query, ()))
