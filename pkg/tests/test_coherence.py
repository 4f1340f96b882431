"""Snapshot merging, gathering pipelines, and throughput scaling."""

import random

import pytest

from fogstream.coherence import (GatherPipeline, SnapshotConfig, SnapshotPart,
                                 build_pipelines, gather_centralized, merge,
                                 part_for, run_decentralized)


def _parts(reads):
    """reads: [(sensor, read_at)] -> one single-sensor part each."""
    return [part_for(s, 0.0, t) for s, t in reads]


# -- merge -------------------------------------------------------------------

def test_merge_within_tolerance_combines_everything():
    merged, rejected = merge(_parts([("a", 100), ("b", 140), ("c", 120)]),
                             tolerance=50)
    assert rejected == []
    assert merged.covered_sensors == {"a", "b", "c"}
    assert merged.span == (100, 140) and merged.span_ms() == 40


def test_merge_rejects_parts_beyond_tolerance():
    merged, rejected = merge(_parts([("a", 100), ("b", 400), ("c", 110)]),
                             tolerance=50)
    assert merged.covered_sensors == {"a", "c"}
    assert len(rejected) == 1 and rejected[0].covered_sensors == {"b"}


def test_merge_infinite_tolerance_never_rejects():
    for tol in (None, float("inf")):
        merged, rejected = merge(_parts([("a", 0), ("b", 10**6)]), tol)
        assert rejected == [] and merged.covered_sensors == {"a", "b"}


def test_merge_overlapping_sensors_raise():
    with pytest.raises(ValueError):
        merge(_parts([("a", 100), ("a", 110)]), tolerance=50)


def test_merge_matches_greedy_oracle_on_random_parts():
    # greedy semantics: a part is rejected iff adding it would stretch the
    # running span beyond the tolerance at the moment it is considered
    rng = random.Random(6)
    for trial in range(100):
        reads = [(f"s{i}", rng.randrange(0, 300)) for i in range(8)]
        tol = rng.randrange(20, 200)
        merged, rejected = merge(_parts(reads), tol)
        lo = hi = reads[0][1]
        want_keep, want_reject = ["s0"], []
        for s, t in reads[1:]:
            n_lo, n_hi = min(lo, t), max(hi, t)
            if n_hi - n_lo > tol:
                want_reject.append(s)
            else:
                want_keep.append(s)
                lo, hi = n_lo, n_hi
        assert merged.covered_sensors == set(want_keep), trial
        assert [r.covered_sensors for r in rejected] == \
            [{s} for s in want_reject], trial


# -- build_pipelines ---------------------------------------------------------

def test_pipelines_partition_sensors_evenly():
    sensors = [f"s{i:03d}" for i in range(10)]
    pipes = build_pipelines(None, sensors, fanin=4)
    assert len(pipes) == 4
    sizes = sorted(len(p.sensors) for p in pipes)
    assert sizes == [2, 2, 3, 3]
    flat = sorted(s for p in pipes for s in p.sensors)
    assert flat == sensors


def test_pipelines_fanin_bounds():
    sensors = ["a", "b"]
    assert len(build_pipelines(None, sensors, fanin=10)) == 2
    assert build_pipelines(None, [], fanin=3) == []
    with pytest.raises(ValueError):
        build_pipelines(None, sensors, fanin=0)


def test_pipelines_random_sizes_always_partition():
    rng = random.Random(2)
    for trial in range(50):
        n = rng.randrange(1, 40)
        fanin = rng.randrange(1, 9)
        sensors = [f"s{i}" for i in range(n)]
        pipes = build_pipelines(None, sensors, fanin)
        assert len(pipes) == min(fanin, n)
        flat = sorted(s for p in pipes for s in p.sensors)
        assert flat == sorted(sensors), trial
        sizes = [len(p.sensors) for p in pipes]
        assert max(sizes) - min(sizes) <= 1


# -- throughput scaling ------------------------------------------------------

def _cfg(**kw):
    return SnapshotConfig(period_ms=1, tolerance_ms=float("inf"), **kw)


def _dec_throughput(n, rounds=200, fanin=4):
    sensors = [f"s{i:04d}" for i in range(n)]
    pipes = build_pipelines(None, sensors, fanin)
    return run_decentralized(pipes, rounds, _cfg()).throughput


def test_decentralized_throughput_flat_in_sensor_count():
    t100 = _dec_throughput(100)
    t1000 = _dec_throughput(1000)
    assert t100 > 0
    assert abs(t1000 - t100) / t100 < 0.2


def test_centralized_throughput_decays_like_one_over_n():
    cfg = _cfg()
    t100 = gather_centralized([f"s{i}" for i in range(100)], 200,
                              cfg).throughput
    t1000 = gather_centralized([f"s{i}" for i in range(1000)], 200,
                               cfg).throughput
    assert t1000 < 0.25 * t100
    # closed form: cloud pays N * merge_cost / capacity per snapshot once
    # the period stops gating it
    want = cfg.cloud_capacity / (1000 * cfg.merge_cost)
    assert abs(t1000 - want) / want < 0.1


def test_decentralized_beats_centralized_at_scale():
    n = 500
    sensors = [f"s{i:04d}" for i in range(n)]
    dec = run_decentralized(build_pipelines(None, sensors, 4), 200, _cfg())
    cen = gather_centralized(sensors, 200, _cfg())
    assert dec.throughput > 2 * cen.throughput


# -- coherence under jitter and skew ----------------------------------------

def test_spans_bounded_by_jitter_and_all_complete():
    rng = random.Random(9)
    sensors = [f"s{i}" for i in range(40)]

    def jitter(sensor, r):
        return rng.randrange(0, 30)

    cfg = SnapshotConfig(period_ms=100, tolerance_ms=100.0)
    res = run_decentralized(build_pipelines(None, sensors, 4), 50, cfg,
                            jitter=jitter)
    assert res.incomplete == 0 and res.retries == 0
    assert all(0 <= s < 30 for s in res.spans())


def test_late_read_triggers_retry_and_recovers():
    late_once = {"done": False}

    def jitter(sensor, r):
        if sensor == "s3" and r == 5 and not late_once["done"]:
            late_once["done"] = True
            return 500
        return 0

    cfg = SnapshotConfig(period_ms=100, tolerance_ms=50.0)
    res = gather_centralized([f"s{i}" for i in range(8)], 10, cfg,
                             jitter=jitter)
    assert res.retries == 1
    assert res.incomplete == 0
    assert all(r["complete"] for r in res.rows)


def test_clock_skew_shifts_local_time_but_not_span():
    cfg = SnapshotConfig(period_ms=100, tolerance_ms=50.0, max_skew_ms=50)
    offsets = {"s0": 40, "s1": -40}
    res = gather_centralized(["s0", "s1"], 5, cfg, offsets=offsets)
    assert res.incomplete == 0
    assert all(r["span_ms"] == 0 for r in res.rows)


def test_excessive_skew_is_rejected():
    cfg = SnapshotConfig(max_skew_ms=50)
    with pytest.raises(ValueError):
        gather_centralized(["s0"], 1, cfg, offsets={"s0": 60})
