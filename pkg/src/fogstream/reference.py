"""Single-process reference interpreter.

Evaluates a logical plan over recorded per-sensor record streams and returns
the multiset of sink emissions. Distributed executions must match this output
per window regardless of placement, worker count, or network interleaving.

Aggregation sums are accumulated in sorted (event_ts, origin, value) order at
window finalization so float results are identical between this interpreter
and the distributed engine, whatever the arrival order was.
"""

from __future__ import annotations

from .query import LogicalPlan, output_schema


def source_records(traces: dict) -> list:
    """Merge per-sensor record lists into one (ts, origin, values) stream.

    traces: sensor_id -> [(ts, values dict), ...] with ts non-decreasing.
    """
    merged = []
    for sensor in sorted(traces):
        for i, (ts, values) in enumerate(traces[sensor]):
            merged.append((ts, sensor, i, values))
    merged.sort(key=lambda r: (r[0], r[1], r[2]))
    return [(ts, origin, values) for ts, origin, i, values in merged]


def apply_plan(plan: LogicalPlan, traces: dict, horizon: int) -> list:
    """Sink emission multiset (list of value tuples) for the plan over traces.

    horizon is the final watermark: windows and top-k boundaries ending after
    it never finalize, matching the distributed end-of-stream punctuation.
    """
    records = [r for r in source_records(traces) if r[0] < horizon]
    for i, op in enumerate(plan.ops[1:-1], start=1):
        if op.kind == "filter":
            kept = []
            for ts, origin, values in records:
                try:
                    ok = op.predicate.eval(values)
                except KeyError:
                    continue
                if ok:
                    kept.append((ts, origin, values))
            records = kept
        elif op.kind == "project":
            records = [(ts, origin, {f: values[f] for f in values if f in op.fields})
                       for ts, origin, values in records]
        elif op.kind == "map":
            out = []
            for ts, origin, values in records:
                values = dict(values)
                dropped = False
                for target, expr in op.assignments:
                    try:
                        values[target] = expr.eval(values)
                    except KeyError:
                        dropped = True
                        break
                if not dropped:
                    out.append((ts, origin, values))
            records = out
        elif op.kind == "key_aggregate":
            records = _aggregate(op, records, horizon)
        elif op.kind == "topk":
            records = _topk(op, records, horizon)
    schema = [f.name for f in output_schema(plan)]
    return [tuple(values.get(f) for f in schema) for ts, origin, values in records]


def _aggregate(op, records, horizon):
    windows: dict = {}  # (start, key tuple) -> [(ts, origin, value)]
    for ts, origin, values in records:
        start = (ts // op.window_ms) * op.window_ms
        if start + op.window_ms > horizon:
            continue
        try:
            key = tuple(values[k] for k in (op.keys or []))
            value = values[op.agg_field] if op.agg_field else 1
        except KeyError:
            continue
        windows.setdefault((start, key), []).append((ts, origin, value))
    out = []
    for (start, key), entries in sorted(windows.items()):
        if op.agg == "count":
            agg = len(entries)
        else:
            agg = 0
            for _, _, v in sorted(entries):
                agg += v
        values = {"ts": start, op.out_field: agg}
        for name, v in zip(op.keys or [], key):
            values[name] = v
        out.append((start, "", values))
    return out


def _topk(op, records, horizon):
    ordered = sorted(records, key=lambda r: (r[0], r[1]))
    out = []
    state: dict = {}  # key -> (event_ts, origin, values)
    idx = 0
    t = op.period_ms
    while t <= horizon:
        while idx < len(ordered) and ordered[idx][0] < t:
            ts, origin, values = ordered[idx]
            key = values.get(op.key_field) if op.key_field else origin
            prev = state.get(key)
            if prev is None or (ts, origin) >= (prev[0], prev[1]):
                state[key] = (ts, origin, values)
            idx += 1
        for key, (ts, origin, values) in top_entries(state, op):
            emitted = {f: values[f] for f in values if f in op.out_fields}
            out.append((t, origin, emitted))
        t += op.period_ms
    return out


def top_entries(state: dict, op) -> list:
    """Top k by order_field descending; ties break on smallest key."""
    entries = [(key, ent) for key, ent in state.items()
               if op.order_field in ent[2]]
    entries.sort(key=lambda kv: (-kv[1][2][op.order_field], str(kv[0])))
    return entries[: op.k]
