"""Acquisitional reading: staged reads, skip horizons, shared reads."""

import random

import pytest

from fogstream.aqp import (AqpRunner, ReadSchedule, SensorModel,
                           compile_read_plan, interval_bounds, shared_read,
                           skip_horizon, tick)
from fogstream.errors import ScenarioError, UnboundedSpeed
from fogstream.query import SchemaField, parse_query

from conftest import Q1_TEXT, load_streams, taxi_streams

POS_FIELDS = [SchemaField("ts", "i64"), SchemaField("armed", "bool"),
              SchemaField("x", "f64"), SchemaField("y", "f64")]
POS_STREAMS = {"pos": None}


def _pos_streams(members=("p1",)):
    from fogstream.query import LogicalStream
    return {"pos": LogicalStream("pos", POS_FIELDS, list(members), 10.0)}


GUARD_Q = ("SELECT ts, x, y FROM stream(pos, 100)"
           " WHERE armed=TRUE && x<50 && y<50;")
INTERVAL_Q = "SELECT ts, x FROM stream(pos, 100) WHERE 10<x && x<20;"


# -- compile_read_plan -------------------------------------------------------

def test_boolean_guard_reads_first():
    plan = parse_query(GUARD_Q, _pos_streams(), "g")
    rp = compile_read_plan(plan)
    assert rp.stages[0].fields == ["armed"]
    assert rp.stages[0].predicate is not None
    # every predicate field is read exactly once, transmit extras last
    assert sorted(rp.all_fields()) == ["armed", "ts", "x", "y"]
    assert rp.all_fields().count("x") == 1


def test_read_costs_order_non_guard_fields():
    plan = parse_query(GUARD_Q, _pos_streams(), "g")
    cheap_y = compile_read_plan(plan, read_cost={"x": 9.0, "y": 1.0})
    order = [f for st in cheap_y.stages for f in st.fields]
    assert order.index("y") < order.index("x")


def test_filterless_query_reads_transmit_fields_only():
    plan = parse_query("SELECT value FROM stream(s, 100);",
                       load_streams(["m1"]), "q")
    rp = compile_read_plan(plan)
    assert len(rp.stages) == 1 and rp.stages[0].predicate is None


def test_staged_tick_equivalent_to_read_all_oracle():
    # staged early-exit must transmit exactly the records the full filter
    # accepts, for random traces
    rng = random.Random(8)
    plan = parse_query(GUARD_Q, _pos_streams(), "g")
    rp = compile_read_plan(plan)
    filt = plan.ops[1].predicate
    trace = []
    for t in range(0, 500, 10):
        trace.append((t, {"ts": t, "armed": rng.random() < 0.5,
                          "x": rng.uniform(0, 100),
                          "y": rng.uniform(0, 100)}))
    sensor = SensorModel("p1", POS_FIELDS, trace)
    sched = ReadSchedule()
    counters = {}
    for t, values in trace:
        out = tick(sensor, rp, sched, t, counters)
        assert (out is not None) == filt.eval(values), t
    # guard stage saves reads versus reading every field every tick
    assert counters["reads"] < len(trace) * len(rp.all_fields())


# -- skip horizons -----------------------------------------------------------

def test_interval_bounds_accept_and_reject():
    plan = parse_query(INTERVAL_Q, _pos_streams(), "i")
    assert interval_bounds(plan.ops[1].predicate) == {"x": [10, 20]}
    guard = parse_query(GUARD_Q, _pos_streams(), "g")
    kinds = guard.plan_kinds if hasattr(guard, "plan_kinds") else \
        guard.stream_of_source().kinds()
    assert interval_bounds(guard.ops[1].predicate, kinds) is None


def test_skip_horizon_matches_distance_over_speed():
    sensor = SensorModel("p1", POS_FIELDS, [(0, {"x": 0.0})],
                         max_speed={"x": 0.5})
    plan = parse_query(INTERVAL_Q, _pos_streams(), "i")
    # x=0 is 10 away from the nearest bound; at 0.5/ms that is 20 ms
    assert skip_horizon(sensor, plan.ops[1].predicate, {"x": 0.0}, 100) == 120


def test_skip_horizon_requires_speed_bound():
    sensor = SensorModel("p1", POS_FIELDS, [(0, {"x": 0.0})])
    plan = parse_query(INTERVAL_Q, _pos_streams(), "i")
    with pytest.raises(UnboundedSpeed):
        skip_horizon(sensor, plan.ops[1].predicate, {"x": 0.0}, 100)


def test_skip_never_suppresses_a_true_predicate_oracle():
    # for random bounded-speed walks, no instant inside a skip horizon may
    # satisfy the predicate
    rng = random.Random(31)
    plan = parse_query(INTERVAL_Q, _pos_streams(), "i")
    pred = plan.ops[1].predicate
    for trial in range(50):
        speed = rng.choice([0.01, 0.05, 0.2])
        x = rng.uniform(-40, 60)
        trace = []
        for t in range(0, 2000, 5):
            trace.append((t, {"ts": t, "x": x}))
            x += rng.uniform(-1, 1) * speed * 5
        sensor = SensorModel("p1", POS_FIELDS, trace,
                             max_speed={"x": speed})
        by_ts = dict(trace)
        for t, values in trace:
            if pred.eval(values):
                continue
            until = skip_horizon(sensor, pred, values, t)
            for t2, v2 in trace:
                if t < t2 < until:
                    assert not pred.eval(v2), (trial, t, t2)


def test_sensor_model_validates_trace():
    with pytest.raises(ScenarioError):
        SensorModel("p", POS_FIELDS, [(10, {"x": 0.0}), (10, {"x": 1.0})])
    with pytest.raises(ScenarioError):
        SensorModel("p", POS_FIELDS, [(0, {"x": 0.0}), (10, {"x": 5.0})],
                    max_speed={"x": 0.1})
    # exactly at the bound is fine
    SensorModel("p", POS_FIELDS, [(0, {"x": 0.0}), (10, {"x": 1.0})],
                max_speed={"x": 0.1})


# -- shared reads ------------------------------------------------------------

def test_shared_read_merges_overlapping_tolerances():
    requests = [
        ("s", "x", 1000, 100, 100),   # window [900, 1100]
        ("s", "x", 1100, 100, 100),   # window [1000, 1200]
        ("s", "x", 2000, 10, 10),     # far away, own read
    ]
    reads = shared_read(requests)
    assert len(reads) == 2
    at, serves = reads[0]
    assert serves == [0, 1] and at == 1050
    assert reads[1] == (2000, [2])


def test_shared_read_zero_tolerance_never_merges():
    requests = [("s", "x", t, 0, 0) for t in (10, 20, 30)]
    assert shared_read(requests) == [(10, [0]), (20, [1]), (30, [2])]


def test_shared_read_distinct_fields_never_merge():
    requests = [("s", "x", 100, 50, 50), ("s", "y", 100, 50, 50),
                ("t", "x", 100, 50, 50)]
    assert len(shared_read(requests)) == 3


def _min_point_cover(windows):
    """Greedy sweep by right endpoint; optimal for interval stabbing."""
    count = 0
    last = None
    for lo, hi in sorted(windows, key=lambda w: w[1]):
        if last is None or lo > last:
            count += 1
            last = hi
    return count


def test_shared_read_count_matches_brute_force_min_cover():
    rng = random.Random(12)
    for trial in range(200):
        n = rng.randrange(1, 13)
        requests = []
        for _ in range(n):
            due = rng.randrange(0, 500)
            ahead = rng.randrange(0, 60)
            delay = rng.randrange(0, 60)
            requests.append(("s", "x", due, ahead, delay))
        reads = shared_read(requests)
        windows = [(d - a, d + dl) for _, _, d, a, dl in requests]
        assert len(reads) == _min_point_cover(windows), trial
        # every request is served inside its own tolerance window
        served = sorted(i for _, serve in reads for i in serve)
        assert served == list(range(n))
        for at, serves in reads:
            for i in serves:
                lo, hi = windows[i]
                assert lo <= at <= hi


# -- AqpRunner ---------------------------------------------------------------

def test_runner_wants_matches_filter_and_counts_savings():
    rng = random.Random(5)
    plan = parse_query(GUARD_Q, _pos_streams(), "g")
    runner = AqpRunner({"g": plan})
    pred = plan.ops[1].predicate
    sent = 0
    total = 200
    for t in range(total):
        values = {"ts": t, "armed": rng.random() < 0.3,
                  "x": rng.uniform(0, 100), "y": rng.uniform(0, 100)}
        want = pred.eval(values)
        assert runner.wants("g", "p1", t, values) == want
        sent += want
    sav = runner.savings("g")
    assert sav["ticks"] == total and sav["transmitted"] == sent
    assert abs(sav["transmission_reduction"] - (1 - sent / total)) < 1e-9
    assert 0.0 < sav["read_reduction"] < 1.0


def test_runner_skip_horizon_drops_ticks_without_divergence():
    plan = parse_query(INTERVAL_Q, _pos_streams(), "i")
    trace = [(t, {"ts": t, "x": 100.0}) for t in range(0, 1000, 10)]
    sensor = SensorModel("p1", POS_FIELDS, trace, max_speed={"x": 0.01})
    runner = AqpRunner({"i": plan}, sensors={"p1": sensor})
    pred = plan.ops[1].predicate
    for t, values in trace:
        got = runner.wants("i", "p1", t, values)
        assert got == pred.eval(values)
    # x is pinned at 100, far outside (10, 20): skipping kicks in
    assert runner.stats["i"]["reads_skipped"] > 0


def test_runner_passes_queries_it_does_not_manage():
    runner = AqpRunner({})
    assert runner.wants("other", "p1", 0, {"x": 1}) is True
