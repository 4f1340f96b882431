"""Event ordering, link queueing, faults, and conservation in the substrate."""

import random

import pytest

from fogstream.errors import LinkDown, PastEvent, UnknownTarget
from fogstream.simnet import DATA, MONITOR, FaultScript, Network


def recording_net(nodes=("a", "b")):
    net = Network()
    log = []
    for n in nodes:
        net.add_node(n, lambda msg, now, frm, n=n: log.append((now, n, msg)))
    return net, log


def test_schedule_pops_in_time_order():
    net, log = recording_net(("a",))
    net.schedule(5, "a", "x")
    net.run_until(100)
    assert log == [(5, "a", "x")]
    assert net.now == 100


def test_same_time_ties_resolve_in_insertion_order():
    net, log = recording_net(("a",))
    net.schedule(5, "a", "A")
    net.schedule(5, "a", "B")
    net.run_until(10)
    assert [m for _, _, m in log] == ["A", "B"]


def test_random_events_pop_in_stable_sort_order():
    rng = random.Random(11)
    net, log = recording_net(("a",))
    events = [(rng.randrange(0, 200), i) for i in range(1000)]
    for fire_at, i in events:
        net.schedule(fire_at, "a", i)
    net.run_until(300)
    want = [i for _, i in sorted(events, key=lambda e: e[0])]
    assert [m for _, _, m in log] == want


def test_schedule_in_past_raises():
    net, _ = recording_net(("a",))
    net.run_until(10)
    with pytest.raises(PastEvent):
        net.schedule(5, "a", "x")
    with pytest.raises(PastEvent):
        net.run_until(5)


def test_zero_size_delivery_at_latency():
    net, log = recording_net()
    net.add_link("a", "b", latency=10, bandwidth=100)
    net.send("a", "b", "m", size=0)
    net.run_until(100)
    assert log == [(10, "b", "m")]


def test_serialization_delay_formula():
    net, log = recording_net()
    net.add_link("a", "b", latency=5, bandwidth=100)
    net.send("a", "b", "m", size=1000)
    net.run_until(100)
    assert log == [(15, "b", "m")]


def test_back_to_back_sends_queue_fifo():
    net, log = recording_net()
    net.add_link("a", "b", latency=5, bandwidth=100)
    for i in range(3):
        net.send("a", "b", i, size=1000)
    net.run_until(100)
    assert [(t, m) for t, _, m in log] == [(15, 0), (25, 1), (35, 2)]


def test_monitor_traffic_queues_behind_data():
    net, log = recording_net()
    net.add_link("a", "b", latency=5, bandwidth=100)
    net.send("a", "b", "dat1", size=1000, priority=DATA)
    net.send("a", "b", "mon", size=1000, priority=MONITOR)
    net.send("a", "b", "dat2", size=1000, priority=DATA)
    net.run_until(100)
    by_msg = {m: t for t, _, m in log}
    # monitoring waits behind queued data; data never waits behind monitoring
    assert by_msg["dat1"] == 15
    assert by_msg["mon"] == 25
    assert by_msg["dat2"] == 25


def test_send_without_link_raises():
    net, _ = recording_net()
    with pytest.raises(UnknownTarget):
        net.send("a", "b", "m", size=1)


def test_send_over_down_link_raises_and_counts():
    net, _ = recording_net()
    net.add_link("a", "b", latency=1, bandwidth=100)
    net.inject(FaultScript.from_text("0 link-down a~b"))
    net.run_until(1)
    with pytest.raises(LinkDown):
        net.send("a", "b", "m", size=1)
    assert net.dropped_link_down == 1
    assert net.conservation_ok()


def test_crashed_node_drops_in_flight_message():
    net, log = recording_net()
    net.add_link("a", "b", latency=10, bandwidth=100)
    net.send("a", "b", "m", size=0)          # arrives at 10
    net.inject(FaultScript.from_text("5 node-crash b"))
    net.run_until(100)
    assert log == []
    assert net.dropped_node_down == 1
    assert net.conservation_ok()


def test_crash_then_recover_drops_only_outage_window():
    net, log = recording_net()
    net.add_link("a", "b", latency=10, bandwidth=100)
    net.inject(FaultScript.from_text("5 node-crash b\n20 node-recover b"))
    net.send("a", "b", "early", size=0)      # arrives at 10, dropped
    net.run_until(30)
    net.send("a", "b", "late", size=0)       # arrives at 40, delivered
    net.run_until(100)
    assert [m for _, _, m in log] == ["late"]
    assert net.conservation_ok()


def test_fault_script_round_trip_and_validation():
    text = "5 node-crash x\n10 link-down a~b"
    script = FaultScript.from_text(text)
    assert script.to_text() == text
    with pytest.raises(ValueError):
        FaultScript.from_text("5 explode x")
    net, _ = recording_net()
    with pytest.raises(UnknownTarget):
        net.inject(FaultScript.from_text("5 node-crash nobody"))


def test_empty_fault_script_is_a_no_op():
    net, log = recording_net()
    net.add_link("a", "b", latency=1, bandwidth=100)
    net.send("a", "b", "m", size=0)
    net.inject(FaultScript.from_text(""))
    net.run_until(10)
    assert [m for _, _, m in log] == ["m"]


def test_conservation_with_random_traffic_and_faults():
    rng = random.Random(3)
    net, _ = recording_net(("a", "b", "c"))
    net.add_link("a", "b", latency=3, bandwidth=50)
    net.add_link("b", "c", latency=3, bandwidth=50)
    net.inject(FaultScript.from_text(
        "40 node-crash b\n80 node-recover b\n120 link-down b~c\n"
        "160 link-up b~c"))
    for t in range(0, 200, 5):
        net.schedule(t, "a", ("noop",))
    sent = 0
    for t in range(0, 200, 7):
        net.run_until(t)
        for frm, to in (("a", "b"), ("b", "c")):
            try:
                net.send(frm, to, rng.random(), size=rng.randrange(1, 200))
                sent += 1
            except LinkDown:
                pass
    net.run_until(500)
    assert net.conservation_ok()
    assert net.sent >= sent
