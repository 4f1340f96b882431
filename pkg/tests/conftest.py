"""Shared fixtures and small builders used across the test suite."""

import random

import pytest

from fogstream.query import LogicalStream, SchemaField, parse_query
from fogstream.topology import (CLOUD, ENTRY, FOG, ROUTING, SENSOR,
                                TopologyGraph, TopologyNode)

LOAD_SCHEMA = [SchemaField("ts", "i64"), SchemaField("key", "i64"),
               SchemaField("value", "f64"), SchemaField("flag", "bool")]

TAXI_SCHEMA = [
    SchemaField("ts", "i64"),
    SchemaField("medallion", "i64"),
    SchemaField("trip_id", "i64"),
    SchemaField("journey_flag", "bool"),
    SchemaField("latitude", "f64"),
    SchemaField("longitude", "f64"),
    SchemaField("distance", "f64"),
    SchemaField("trip_distance", "f64"),
    SchemaField("passenger_count", "i64"),
]

Q1_TEXT = (
    "SELECT ts, medallion, trip_id, latitude, longitude, distance,"
    " passenger_count FROM stream(taxis, 2000)"
    " WHERE journey_flag=TRUE && (latitude<40.249448 || latitude>41.381560"
    " || longitude<-74.820611 || longitude>-71.848319 || distance=0"
    " || passenger_count=0);")
Q2_TEXT = (
    "SELECT ts, sum(passenger_count) FROM stream(taxis, 5000)"
    " WHERE (40.536532<latitude && latitude<40.745906) &&"
    " (-73.946390<longitude && longitude<-73.609759)"
    " GROUP BY ts AHEADLIMIT 100 DELAYLIMIT 100;")
Q3_TEXT = (
    "SELECT ts, latitude, longitude, trip_distance FROM stream(taxis, 1000)"
    " WHERE journey_flag = TRUE ORDER BY trip_distance DESC LIMIT 3;")


def chain_topology(members, entry_cpu=5.0, cloud_cpu=50.0, relays=1):
    """sensor(s) -> fog-e1 -> fog-r1..rN -> cloud0."""
    topo = TopologyGraph()
    topo.register_node(TopologyNode("cloud0", CLOUD, cpu_capacity=cloud_cpu),
                       [])
    prev = "cloud0"
    for i in range(relays, 0, -1):
        rid = f"fog-r{i}"
        topo.register_node(TopologyNode(rid, FOG, ROUTING, 5.0),
                           [(prev, 10, 1000)])
        prev = rid
    topo.register_node(TopologyNode("fog-e1", FOG, ENTRY, entry_cpu),
                       [(prev, 5, 1000)])
    for m in members:
        topo.register_node(TopologyNode(m, SENSOR), [("fog-e1", 2, 100)])
    return topo


def taxi_streams(members):
    return {"taxis": LogicalStream("taxis", TAXI_SCHEMA, list(members), 10.0)}


def load_streams(members, rate_hint=10.0):
    return {"s": LogicalStream("s", LOAD_SCHEMA, list(members), rate_hint)}


def random_load_traces(members, seed, horizon, period=(40, 120)):
    rng = random.Random(seed)
    traces = {}
    for m in members:
        rows = []
        t = rng.randrange(1, period[0])
        while t < horizon:
            rows.append((t, {"ts": t, "key": rng.randrange(5),
                             "value": round(rng.random() * 10, 3),
                             "flag": rng.random() < 0.5}))
            t += rng.randrange(*period)
        traces[m] = rows
    return traces


@pytest.fixture
def taxi_plan_q1():
    return parse_query(Q1_TEXT, taxi_streams(["s1", "s2"]), "q1")
