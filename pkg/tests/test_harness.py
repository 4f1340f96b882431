"""Scenario parsing, trace generators, metric helpers, CSV output, CLI."""

import filecmp
import os

import pytest

from fogstream.cli import main as cli_main
from fogstream.errors import ScenarioError
from fogstream.harness import (AIRPORT_BOX, BUILTIN_SCENARIOS,
                               MAX_SPEED_DEG_PER_MS, NY_BOX,
                               SyntheticTaxiGenerator, TaxiConfig,
                               builtin_scenario, latency_windows,
                               load_trace_csv, parse_scenario, percentile,
                               run, validate_scenario, write_csv, ysb_traces)

GOOD_SCENARIO = """\
[topology]
node cloud0 cloud cpu=50
node fog-e1 fog entry cpu=5 link=cloud0:10:1000

[queries]
q1 bottom-up SELECT ts, campaign FROM stream(events, 500) WHERE event_type=2;

[traces]
ysb producers=2 keys=10 period=40

[config]
seed=5
duration=4000
"""


# -- parsing -----------------------------------------------------------------

def test_parse_good_scenario():
    sc = parse_scenario(GOOD_SCENARIO, "good")
    assert sc.seed == 5 and sc.duration_ms == 4000 and sc.kind == "generic"
    assert [s["id"] for s in sc.topology] == ["cloud0", "fog-e1"]
    assert sc.topology[1]["links"] == [("cloud0", 10, 1000)]
    assert sc.queries[0][0] == "q1" and sc.queries[0][1] == "bottom-up"
    validate_scenario(sc)


def test_parse_errors_carry_name_and_line():
    with pytest.raises(ScenarioError, match=r"bad:1"):
        parse_scenario("stray content\n", "bad")
    with pytest.raises(ScenarioError, match=r"bad:1.*\[nope\]"):
        parse_scenario("[nope]\n", "bad")
    with pytest.raises(ScenarioError, match=r"bad:2"):
        parse_scenario("[topology]\nnode x fog wings=2\n", "bad")
    with pytest.raises(ScenarioError, match="seed"):
        parse_scenario("[config]\nduration=10\n", "bad")
    with pytest.raises(ScenarioError, match=r"bad config line"):
        parse_scenario("[config]\nseed\n", "bad")


def test_validate_flags_unknown_strategy_and_bad_query():
    text = GOOD_SCENARIO.replace("bottom-up", "sideways")
    with pytest.raises(ScenarioError, match="strategy"):
        validate_scenario(parse_scenario(text, "s"))
    text = GOOD_SCENARIO.replace("campaign", "nope")
    with pytest.raises(Exception):
        validate_scenario(parse_scenario(text, "s"))


def test_builtin_scenarios_all_parse_and_validate():
    for name in BUILTIN_SCENARIOS:
        sc = builtin_scenario(name)
        assert sc.name == name
        validate_scenario(sc)


# -- taxi generator ----------------------------------------------------------

def test_taxi_traces_respect_speed_bound_and_schema():
    traces = SyntheticTaxiGenerator(TaxiConfig(seed=3, taxis=4,
                                               duration_ms=20_000)).traces()
    assert len(traces) == 4
    for rows in traces.values():
        assert rows
        prev = None
        for ts, v in rows:
            assert set(v) == {"ts", "medallion", "trip_id", "journey_flag",
                              "latitude", "longitude", "distance",
                              "trip_distance", "passenger_count"}
            if prev is not None:
                dt = ts - prev[0]
                bound = MAX_SPEED_DEG_PER_MS * dt * (1 + 1e-2)
                assert abs(v["latitude"] - prev[1]["latitude"]) <= bound
                assert abs(v["longitude"] - prev[1]["longitude"]) <= bound
            prev = (ts, v)


def test_taxi_sensor_models_validate_their_own_traces():
    gen = SyntheticTaxiGenerator(TaxiConfig(seed=11, taxis=3,
                                            duration_ms=15_000))
    models = gen.sensor_models()
    assert sorted(models) == ["taxi000", "taxi001", "taxi002"]


def test_taxi_inside_only_keeps_journeys_off_and_coords_in_ny():
    cfg = TaxiConfig(seed=5, taxis=3, duration_ms=20_000, inside_only=True)
    lat_lo, lat_hi, lon_lo, lon_hi = NY_BOX
    for rows in SyntheticTaxiGenerator(cfg).traces().values():
        for _, v in rows:
            assert v["journey_flag"] is False
            assert lat_lo <= v["latitude"] <= lat_hi
            assert lon_lo <= v["longitude"] <= lon_hi


def test_taxi_traces_deterministic_per_seed():
    cfg = TaxiConfig(seed=9, taxis=2, duration_ms=10_000)
    a = SyntheticTaxiGenerator(cfg).traces()
    b = SyntheticTaxiGenerator(cfg).traces()
    assert a == b
    c = SyntheticTaxiGenerator(TaxiConfig(seed=10, taxis=2,
                                          duration_ms=10_000)).traces()
    assert a != c


def test_ysb_traces_shape():
    traces = ysb_traces(seed=1, producers=3, duration_ms=1000, keys=5,
                        period_ms=50)
    assert sorted(traces) == ["prod00", "prod01", "prod02"]
    for p, rows in traces.items():
        assert all(0 <= v["campaign"] < 5 for _, v in rows)
        steps = [b - a for (a, _), (b, _) in zip(rows, rows[1:])]
        assert set(steps) == {50}


# -- metric helpers ----------------------------------------------------------

def test_percentile_nearest_rank():
    assert percentile([], 50) is None
    assert percentile([7], 99) == 7
    data = list(range(1, 101))
    assert percentile(data, 50) == 50
    assert percentile(data, 99) == 99
    assert percentile(data, 100) == 100


def test_latency_windows_bucket_by_emit_and_event():
    # one emission at emit=250 for event ts=100, one at 1050 for 900
    emissions = [(250, 100, "s", {}), (1050, 900, "s", {})]
    rows = latency_windows(emissions, 500, 2000, p=50)
    assert rows == [(0, 150, 1), (500, None, 0), (1000, 150, 1),
                    (1500, None, 0)]
    by_event = latency_windows(emissions, 500, 2000, p=50, by="event")
    assert by_event[0] == (0, 150, 1)
    assert by_event[1] == (500, 150, 1)


# -- CSV I/O -----------------------------------------------------------------

def test_write_csv_is_byte_identical_and_formats_values(tmp_path):
    rows = [(1, 0.5, True, "x"), (2, 1.0 / 3.0, False, "y")]
    meta = {"seed": 7, "alpha": 0.25}
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_csv(str(a), meta, ["t", "v", "ok", "tag"], rows)
    write_csv(str(b), meta, ["t", "v", "ok", "tag"], rows)
    assert filecmp.cmp(str(a), str(b), shallow=False)
    text = a.read_text()
    assert text.startswith("# alpha=0.25\n# seed=7\n")
    assert "0.333333" in text and "true" in text and "false" in text


def test_trace_csv_round_trip(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("ts_ms,sensor_id,value,flag\n"
                    "10,s1,1.5,true\n"
                    "20,s1,2,false\n"
                    "15,s2,0.25,true\n")
    traces = load_trace_csv(str(path))
    assert sorted(traces) == ["s1", "s2"]
    assert traces["s1"][0] == (10, {"ts": 10, "value": 1.5, "flag": True})
    assert traces["s1"][1][1]["value"] == 2
    assert traces["s2"][0][1]["flag"] is True


# -- end-to-end scenario runs ------------------------------------------------

def test_generic_scenario_run_writes_csvs_and_matches_reference(tmp_path):
    sc = parse_scenario(GOOD_SCENARIO, "good")
    res = run(sc, str(tmp_path))
    assert res["ok"]
    names = os.listdir(tmp_path)
    assert any(n.startswith("sink_q1") for n in names)
    assert "summary.csv" in names


def test_generic_scenario_rerun_is_byte_identical(tmp_path):
    sc = parse_scenario(GOOD_SCENARIO, "good")
    run(sc, str(tmp_path / "a"))
    run(parse_scenario(GOOD_SCENARIO, "good"), str(tmp_path / "b"))
    for name in os.listdir(tmp_path / "a"):
        assert filecmp.cmp(str(tmp_path / "a" / name),
                           str(tmp_path / "b" / name), shallow=False), name


# -- CLI ---------------------------------------------------------------------

def test_cli_list_and_validate(capsys):
    assert cli_main(["list-scenarios"]) == 0
    out = capsys.readouterr().out.split()
    assert "fig1" in out and "taxi" in out
    assert cli_main(["validate", "empty"]) == 0


def test_cli_unknown_scenario_exits_2(capsys):
    assert cli_main(["validate", "no-such-thing"]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_bad_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.scenario"
    bad.write_text("[config]\nduration=1\n")
    assert cli_main(["validate", str(bad)]) == 2


def test_cli_run_scenario_file(tmp_path, capsys):
    path = tmp_path / "good.scenario"
    path.write_text(GOOD_SCENARIO)
    out = tmp_path / "out"
    assert cli_main(["run", str(path), "--out", str(out)]) == 0
    assert (out / "summary.csv").exists()
