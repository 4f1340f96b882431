"""Node execution plans, control messages, and their wire format.

A NodeExecutionPlan is the per-node fragment of an ExecutionPlan: the local
operator pipeline plus ingress/egress edges and relay forwarding entries.
Concatenating the Node-EPs along the routes reconstructs the execution plan
(assemble() is the inverse used by tests).

Control messages travel as length-prefixed tagged binary (layout documented
field by field in docs/wire_format.md, version 1). Messages are applied
idempotently keyed by (query, epoch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .placement import ExecutionPlan

WIRE_VERSION = 1

# message sizes charged to simnet for non-control traffic
DATA_HEADER_BYTES = 24
ACK_BYTES = 32
HEARTBEAT_BYTES = 16
STATS_BYTES = 128   # flat monitoring report size
REPLAY_REQ_BYTES = 48


@dataclass
class NodeExecutionPlan:
    node: str
    query: str
    epoch: int
    pipeline: list = field(default_factory=list)   # [(op_index, instance, op_text)]
    sources: list = field(default_factory=list)    # [(instance, sensor_id)]
    ingress: list = field(default_factory=list)    # [(edge, upstream_host, local?, entry_op, origins)]
    egress: list = field(default_factory=list)     # [(edge, downstream_host, route, from_op)]
    relay: list = field(default_factory=list)      # [(edge_id, prev_hop, next_hop)]


# -- control messages -------------------------------------------------------

@dataclass
class Deploy:
    kind = "deploy"
    query: str
    epoch: int
    nep: NodeExecutionPlan
    mode: str = "full"   # full replaces runtime state; update keeps it


@dataclass
class Undeploy:
    kind = "undeploy"
    query: str
    epoch: int


@dataclass
class RouteUpdate:
    kind = "reroute"
    query: str
    epoch: int
    edge: str
    prev_hop: Optional[str]
    next_hop: Optional[str]


@dataclass
class Pause:
    kind = "pause"
    query: str
    epoch: int
    edge: str


@dataclass
class Resume:
    kind = "resume"
    query: str
    epoch: int
    edge: str


@dataclass
class ReplayRequest:
    kind = "replay"
    query: str
    epoch: int
    edge: str
    # replay everything retained above each origin's acked cum


@dataclass
class CtrlAck:
    kind = "ctrl-ack"
    query: str
    epoch: int
    about: str       # kind of the acked message
    node: str
    ok: bool = True
    detail: str = ""


@dataclass
class SourceStart:
    kind = "source-start"
    query: str
    epoch: int
    horizon: int = 0           # final watermark; no records at or past it flow
    resume: str = "continue"   # continue | live (skip records older than now)


_TAGS = {"deploy": 1, "undeploy": 2, "reroute": 3, "pause": 4, "resume": 5,
         "replay": 6, "ctrl-ack": 7, "source-start": 8}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def s(self, v):
        raw = (v or "").encode()
        self.parts.append(struct.pack("<H", len(raw)) + raw)

    def bytes(self) -> bytes:
        body = b"".join(self.parts)
        return struct.pack("<I", len(body)) + body


class _Reader:
    def __init__(self, raw: bytes):
        (length,) = struct.unpack_from("<I", raw, 0)
        self.raw = raw[4:4 + length]
        self.pos = 0

    def u8(self):
        (v,) = struct.unpack_from("<B", self.raw, self.pos)
        self.pos += 1
        return v

    def u32(self):
        (v,) = struct.unpack_from("<I", self.raw, self.pos)
        self.pos += 4
        return v

    def s(self):
        (n,) = struct.unpack_from("<H", self.raw, self.pos)
        self.pos += 2
        v = self.raw[self.pos:self.pos + n].decode()
        self.pos += n
        return v


def encode(msg) -> bytes:
    w = _Writer()
    w.u8(WIRE_VERSION)
    w.u8(_TAGS[msg.kind])
    w.s(msg.query)
    w.u32(msg.epoch)
    if msg.kind == "deploy":
        w.u8(1 if msg.mode == "update" else 0)
        _encode_nep(w, msg.nep)
    elif msg.kind == "reroute":
        w.s(msg.edge)
        w.s(msg.prev_hop or "")
        w.s(msg.next_hop or "")
    elif msg.kind in ("pause", "resume", "replay"):
        w.s(msg.edge)
    elif msg.kind == "ctrl-ack":
        w.s(msg.about)
        w.s(msg.node)
        w.u8(1 if msg.ok else 0)
        w.s(msg.detail)
    elif msg.kind == "source-start":
        w.u32(msg.horizon)
        w.s(msg.resume)
    return w.bytes()


def _encode_nep(w: _Writer, nep: NodeExecutionPlan):
    w.s(nep.node)
    w.u8(len(nep.pipeline))
    for op_index, instance, op_text in nep.pipeline:
        w.u8(op_index)
        w.u8(instance)
        w.s(op_text)
    w.u8(len(nep.sources))
    for instance, sensor in nep.sources:
        w.u8(instance)
        w.s(sensor)
    w.u8(len(nep.ingress))
    for edge, upstream, local, entry_op, origins in nep.ingress:
        w.s(edge)
        w.s(upstream)
        w.u8(1 if local else 0)
        w.u8(entry_op)
        w.u8(len(origins))
        for origin in origins:
            w.s(origin)
    w.u8(len(nep.egress))
    for edge, downstream, route, from_op in nep.egress:
        w.s(edge)
        w.s(downstream)
        w.u8(from_op)
        w.u8(len(route))
        for hop in route:
            w.s(hop)
    w.u8(len(nep.relay))
    for edge, prev_hop, next_hop in nep.relay:
        w.s(edge)
        w.s(prev_hop)
        w.s(next_hop)


def decode(raw: bytes):
    r = _Reader(raw)
    version = r.u8()
    if version != WIRE_VERSION:
        raise ValueError(f"wire version {version}")
    tag = _TAG_NAMES[r.u8()]
    query = r.s()
    epoch = r.u32()
    if tag == "deploy":
        mode = "update" if r.u8() == 1 else "full"
        return Deploy(query, epoch, _decode_nep(r, query, epoch), mode)
    if tag == "undeploy":
        return Undeploy(query, epoch)
    if tag == "reroute":
        return RouteUpdate(query, epoch, r.s(), r.s() or None, r.s() or None)
    if tag == "pause":
        return Pause(query, epoch, r.s())
    if tag == "resume":
        return Resume(query, epoch, r.s())
    if tag == "replay":
        return ReplayRequest(query, epoch, r.s())
    if tag == "ctrl-ack":
        return CtrlAck(query, epoch, r.s(), r.s(), r.u8() == 1, r.s())
    if tag == "source-start":
        return SourceStart(query, epoch, r.u32(), r.s())
    raise ValueError(tag)


def _decode_nep(r: _Reader, query: str, epoch: int) -> NodeExecutionPlan:
    node = r.s()
    nep = NodeExecutionPlan(node=node, query=query, epoch=epoch)
    for _ in range(r.u8()):
        nep.pipeline.append((r.u8(), r.u8(), r.s()))
    for _ in range(r.u8()):
        nep.sources.append((r.u8(), r.s()))
    for _ in range(r.u8()):
        edge, upstream, local = r.s(), r.s(), r.u8() == 1
        entry_op = r.u8()
        origins = [r.s() for _ in range(r.u8())]
        nep.ingress.append((edge, upstream, local, entry_op, origins))
    for _ in range(r.u8()):
        edge, downstream, from_op = r.s(), r.s(), r.u8()
        route = [r.s() for _ in range(r.u8())]
        nep.egress.append((edge, downstream, route, from_op))
    for _ in range(r.u8()):
        nep.relay.append((r.s(), r.s(), r.s()))
    return nep


def wire_size(msg) -> int:
    return len(encode(msg))


# ---------------------------------------------------------------------------
# Disassembly and inverse assembly
# ---------------------------------------------------------------------------

def edge_origins(plan, up) -> list:
    """Buffer identity origins that can appear on the edge out of `up`.

    Stateless operators preserve the identities minted at the sources; a
    stateful operator mints its own, so everything downstream of it carries
    only that instance's identity.
    """
    from .query import STATEFUL_KINDS

    if up.op_index == 0:
        return [f"0.{up.instance}"]
    stateful = [j for j in range(1, up.op_index + 1)
                if plan.ops[j].kind in STATEFUL_KINDS]
    if stateful:
        return [f"{stateful[-1]}.0"]
    members = sorted(plan.stream_of_source().members)
    return [f"0.{k}" for k in range(len(members))]


def disassemble(ep: ExecutionPlan, epoch: int) -> list:
    """One Node-EP per node hosting an instance or relaying a route."""
    from .query import op_to_text

    plan = ep.plan
    neps: dict[str, NodeExecutionPlan] = {}

    def nep_for(node: str) -> NodeExecutionPlan:
        if node not in neps:
            neps[node] = NodeExecutionPlan(node=node, query=ep.query, epoch=epoch)
        return neps[node]

    members = sorted(plan.stream_of_source().members)
    host_of = {}
    for inst in ep.instances:
        host_of[inst.key] = inst.placed_on
        nep = nep_for(inst.placed_on)
        entry = (inst.op_index, inst.instance, op_to_text(plan.ops[inst.op_index]))
        if entry not in nep.pipeline:
            nep.pipeline.append(entry)
        if inst.op_index == 0:
            nep.sources.append((inst.instance, members[inst.instance]))

    for eid, up, down in ep.edges():
        route = ep.routes[eid]
        local = up.placed_on == down.placed_on
        origins = edge_origins(plan, up)
        nep_for(down.placed_on).ingress.append(
            (eid, up.placed_on, local, down.op_index, origins))
        if not local:
            nep_for(up.placed_on).egress.append(
                (eid, down.placed_on, list(route), up.op_index))
            for i, hop in enumerate(route[1:-1], start=1):
                nep_for(hop).relay.append((eid, route[i - 1], route[i + 1]))

    for nep in neps.values():
        nep.pipeline.sort()
        nep.sources.sort()
        nep.ingress.sort()
        nep.egress.sort()
        nep.relay.sort()
    return [neps[n] for n in sorted(neps)]


def assemble(neps: list) -> dict:
    """Inverse of disassemble: instance placements and routes, for audits."""
    placements = {}
    routes = {}
    for nep in neps:
        for op_index, instance, _ in nep.pipeline:
            placements[f"{op_index}.{instance}"] = nep.node
        for edge, _, route, _ in nep.egress:
            routes[edge] = list(route)
        for edge, upstream, local, _, _ in nep.ingress:
            if local:
                routes.setdefault(edge, [nep.node])
    return {"placements": placements, "routes": routes}


def rollout_order(neps: list, ep: ExecutionPlan) -> list:
    """Downstream-first deployment order: sink host before its upstreams.

    Nodes are keyed by their maximum dataflow depth (sink depth 0); relays
    take the depth of the edges they carry.
    """
    depth_of_instance = {}
    n_ops = len(ep.plan.ops)
    for inst in ep.instances:
        depth_of_instance[inst.key] = n_ops - 1 - inst.op_index
    node_depth: dict = {}

    def bump(node, d):
        node_depth[node] = max(node_depth.get(node, -1), d)

    for inst in ep.instances:
        bump(inst.placed_on, depth_of_instance[inst.key])
    for eid, up, down in ep.edges():
        for hop in ep.routes[eid][1:-1]:
            bump(hop, depth_of_instance[down.key])
    ordered = sorted(node_depth, key=lambda n: (node_depth[n], n))
    return [nep for n in ordered for nep in neps if nep.node == n]
