"""Wire format round trips, Node-EP disassembly, and rollout ordering."""

import pytest

from fogstream.deploy import (CtrlAck, Deploy, NodeExecutionPlan, Pause,
                              ReplayRequest, Resume, RouteUpdate, SourceStart,
                              Undeploy, assemble, decode, disassemble,
                              edge_origins, encode, rollout_order, wire_size)
from fogstream.placement import place
from fogstream.query import parse_query

from conftest import Q1_TEXT, Q2_TEXT, chain_topology, taxi_streams


def _q1_ep(members=("s1",), relays=2, strategy="bottom-up"):
    topo = chain_topology(list(members), relays=relays).snapshot()
    plan = parse_query(Q1_TEXT, taxi_streams(list(members)), "q1")
    return place(plan, topo, strategy, selectivities={1: 0.5}), topo


def _sample_nep():
    return NodeExecutionPlan(
        node="fog-e1", query="q1", epoch=3,
        pipeline=[(0, 0, "source taxis period=2000 ahead=0 delay=0"),
                  (1, 0, "filter journey_flag=TRUE")],
        sources=[(0, "s1")],
        ingress=[("q1:e0.0-1.0", "fog-e1", True, 1, ["0.0"])],
        egress=[("q1:e1.0-2.0", "cloud0", ["fog-e1", "fog-r1", "cloud0"], 1)],
        relay=[("q2:e1.0-2.0", "fog-r9", "cloud0")])


def test_wire_round_trip_all_message_kinds():
    nep = _sample_nep()
    msgs = [
        Deploy("q1", 3, nep),
        Deploy("q1", 3, nep, mode="update"),
        Undeploy("q1", 5),
        RouteUpdate("q1", 6, "q1:e1.0-2.0", "fog-r1", "cloud0"),
        RouteUpdate("q1", 6, "q1:e1.0-2.0", None, None),
        Pause("q1", 7, "q1:e1.0-2.0"),
        Resume("q1", 7, "q1:e1.0-2.0"),
        ReplayRequest("q1", 8, "q1:e1.0-2.0"),
        CtrlAck("q1", 8, "deploy", "fog-e1", True, ""),
        CtrlAck("q1", 8, "deploy", "fog-e1", False, "no such query"),
        SourceStart("q1", 9, horizon=120000, resume="live"),
    ]
    for msg in msgs:
        again = decode(encode(msg))
        assert again == msg, msg.kind
        assert again.kind == msg.kind


def test_wire_size_counts_length_prefix():
    msg = Undeploy("q", 1)
    raw = encode(msg)
    assert wire_size(msg) == len(raw)
    # u32 length prefix + version + tag + "q" string + u32 epoch
    assert len(raw) == 4 + 1 + 1 + (2 + 1) + 4


def test_decode_rejects_wrong_version():
    raw = bytearray(encode(Undeploy("q", 1)))
    raw[4] = 99   # version byte sits right after the length prefix
    with pytest.raises(ValueError):
        decode(bytes(raw))


def test_disassemble_q1_chain_roles():
    ep, _ = _q1_ep()
    neps = {n.node: n for n in disassemble(ep, epoch=1)}
    # bottom-up puts filter+project on the entry, sink on the cloud, and the
    # relays only forward
    assert set(neps) >= {"fog-e1", "cloud0"}
    entry = neps["fog-e1"]
    assert [p[0] for p in entry.pipeline] == [0, 1, 2]
    assert entry.sources == [(0, "s1")]
    assert any(e[1] == "cloud0" for e in entry.egress)
    cloud = neps["cloud0"]
    assert [p[0] for p in cloud.pipeline] == [3]
    for relay in ("fog-r1", "fog-r2"):
        if relay in neps:
            assert neps[relay].pipeline == []
            assert neps[relay].relay


def test_disassemble_marks_local_edges():
    ep, _ = _q1_ep()
    neps = disassemble(ep, epoch=1)
    entry = next(n for n in neps if n.node == "fog-e1")
    local = [i for i in entry.ingress if i[2]]
    assert local                      # source -> filter -> project stay local
    for edge, upstream, is_local, _, _ in local:
        assert upstream == "fog-e1"


def test_assemble_inverts_disassemble():
    for strategy in ("bottom-up", "top-down", "cloud-only"):
        ep, _ = _q1_ep(members=("s1", "s2"), strategy=strategy)
        audit = assemble(disassemble(ep, epoch=2))
        want = {inst.key: inst.placed_on for inst in ep.instances}
        assert audit["placements"] == want
        for eid, up, down in ep.edges():
            if up.placed_on != down.placed_on:
                assert audit["routes"][eid] == ep.routes[eid]
            else:
                assert audit["routes"][eid] == [up.placed_on]


def test_edge_origins_stateless_vs_stateful():
    plan1 = parse_query(Q1_TEXT, taxi_streams(["s1", "s2"]), "q1")
    ep, _ = _q1_ep(members=("s1", "s2"))
    # past the stateless filter both source identities survive
    up = ep.instances_of_op(1)[0]
    assert edge_origins(plan1, up) == ["0.0", "0.1"]
    # past an aggregate only the aggregate's identity remains
    plan2 = parse_query(Q2_TEXT, taxi_streams(["s1", "s2"]), "q2")
    topo = chain_topology(["s1", "s2"]).snapshot()
    ep2 = place(plan2, topo, "cloud-only")
    agg = ep2.instances_of_op(2)[0]
    assert edge_origins(plan2, agg) == ["2.0"]


def test_rollout_order_is_downstream_first():
    ep, _ = _q1_ep()
    neps = disassemble(ep, epoch=1)
    ordered = [n.node for n in rollout_order(neps, ep)]
    assert set(ordered) == {n.node for n in neps}
    # the sink host deploys before the entry node feeding it
    assert ordered.index("cloud0") < ordered.index("fog-e1")
    # relays carrying the entry->cloud edge deploy before the entry too
    for relay in ("fog-r1", "fog-r2"):
        if relay in ordered:
            assert ordered.index(relay) < ordered.index("fog-e1")


def test_deploy_idempotence_key_survives_round_trip():
    nep = _sample_nep()
    msg = decode(encode(Deploy("q1", 3, nep)))
    assert (msg.query, msg.epoch) == ("q1", 3)
    assert msg.mode == "full"
    assert msg.nep == nep
