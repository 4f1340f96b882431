"""Acquisitional query processing at the sensor edge.

Instead of reading every sensor field on every tick and shipping the full
record upstream, the deployed query itself dictates what to read and when.
Three mechanisms cooperate:

- staged reads: the filter predicate is factored into stages so cheap
  boolean guards are read first and a failing guard stops the tick before
  the expensive fields are touched;
- skip horizons: when a conjunction of interval constraints on numeric
  fields fails and the sensor declares a speed bound per field, the earliest
  instant the predicate could flip is computed and reads are suppressed
  until then;
- shared reads: queries with ahead/delay tolerances on the same
  (sensor, field) are served by one read placed inside the intersection of
  their tolerance windows.

Skipping is sound only if traces respect the declared speed bounds, which
is validated when a SensorModel is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .errors import ScenarioError, UnboundedSpeed
from .query import (BOOL, And, Cmp, Const, Expr, FieldRef, LogicalPlan,
                    required_fields)


@dataclass
class SensorModel:
    """A replayed sensor with per-field read costs and motion bounds.

    max_speed maps field name to the largest |value change| per ms the
    sensor can exhibit; fields without an entry cannot support skipping.
    """
    id: str
    fields: list                     # [SchemaField]
    trace: list                      # [(ts_ms, {field: value})]
    read_cost: dict = field(default_factory=dict)
    max_speed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        prev_ts = None
        prev = None
        for ts, values in self.trace:
            if prev_ts is not None and ts <= prev_ts:
                raise ScenarioError(
                    f"sensor {self.id}: trace timestamps not strictly "
                    f"increasing at {ts}")
            if prev is not None:
                dt = ts - prev_ts
                for f, bound in self.max_speed.items():
                    if f not in values or f not in prev:
                        continue
                    delta = abs(values[f] - prev[f])
                    if delta > bound * dt * (1 + 1e-9):
                        raise ScenarioError(
                            f"sensor {self.id}: field {f} moved {delta} in "
                            f"{dt} ms, exceeds max_speed {bound}")
            prev_ts, prev = ts, values

    def end_ts(self) -> int:
        return self.trace[-1][0] if self.trace else 0


@dataclass
class ReadStage:
    """Fields to read this stage and the predicate fragment they unlock."""
    fields: list
    predicate: Optional[Expr] = None


@dataclass
class ReadPlan:
    stages: list                     # [ReadStage]

    def all_fields(self) -> list:
        out = []
        for st in self.stages:
            out.extend(st.fields)
        return out


@dataclass
class FieldSchedule:
    next_read: int
    period_ms: int
    ahead_ms: int = 0
    delay_ms: int = 0
    skip_until: Optional[int] = None


class ReadSchedule:
    """Per (sensor, field) read timing owned by the sensor's entry node."""

    def __init__(self):
        self.entries: dict = {}      # (sensor, field) -> FieldSchedule

    def set(self, sensor: str, fld: str, sched: FieldSchedule):
        self.entries[(sensor, fld)] = sched

    def get(self, sensor: str, fld: str) -> Optional[FieldSchedule]:
        return self.entries.get((sensor, fld))

    def skip(self, sensor: str, fields, until: int):
        for fld in fields:
            fs = self.entries.get((sensor, fld))
            if fs is None:
                fs = FieldSchedule(next_read=until, period_ms=0)
                self.entries[(sensor, fld)] = fs
            fs.skip_until = until
            fs.next_read = max(fs.next_read, until)


def _conjuncts(pred: Expr) -> list:
    if isinstance(pred, And):
        out = []
        for item in pred.items:
            out.extend(_conjuncts(item))
        return out
    return [pred]


def compile_read_plan(plan: LogicalPlan, read_cost: dict = None) -> ReadPlan:
    """Factor the query's filter into read stages with early exits.

    Boolean guard fields come first, remaining predicate fields follow in
    ascending read cost, and each conjunct is evaluated as soon as all its
    fields are available. Fields needed only for transmission are read last,
    after the whole predicate has passed.
    """
    cost = read_cost or {}
    kinds = plan.stream_of_source().kinds()
    transmit = sorted(required_fields(plan, 1))
    filt = next((op for op in plan.ops if op.kind == "filter"), None)
    if filt is None:
        return ReadPlan([ReadStage(transmit)])

    conjuncts = _conjuncts(filt.predicate)
    guard_fields = sorted(
        {f for c in conjuncts for f in c.fields()
         if all(kinds.get(x) == BOOL for x in c.fields())},
        key=lambda f: (cost.get(f, 1.0), f))
    rest = sorted(filt.predicate.fields() - set(guard_fields),
                  key=lambda f: (cost.get(f, 1.0), f))

    stages: list = []
    read: set = set()
    pending = list(conjuncts)
    for f in guard_fields + rest:
        read.add(f)
        ready = [c for c in pending if c.fields() <= read]
        pending = [c for c in pending if not (c.fields() <= read)]
        frag = None
        if ready:
            frag = ready[0] if len(ready) == 1 else And(ready)
        stages.append(ReadStage([f], frag))
    extra = [f for f in transmit if f not in read]
    if extra:
        stages.append(ReadStage(extra))
    return ReadPlan(stages)


def interval_bounds(pred: Expr, kinds: dict = None) -> Optional[dict]:
    """Constant bounds per field if pred is a conjunction of interval
    constraints on numeric fields, else None."""
    out: dict = {}
    for c in _conjuncts(pred):
        if not isinstance(c, Cmp) or c.op == "!=":
            return None
        if isinstance(c.left, FieldRef) and isinstance(c.right, Const):
            f, v = c.left.name, c.right.value
        elif isinstance(c.left, Const) and isinstance(c.right, FieldRef):
            f, v = c.right.name, c.left.value
        else:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return None
        if kinds is not None and kinds.get(f) == BOOL:
            return None
        out.setdefault(f, []).append(v)
    return out


def skip_horizon(sensor: SensorModel, predicate: Expr, current: dict,
                 now: int) -> int:
    """Earliest time the predicate's truth value could change.

    The predicate must be a conjunction of interval constraints; each
    constrained field needs a declared max_speed. A flip requires some
    field to reach its nearest constraint bound, which takes at least
    distance / max_speed ms.
    """
    per_field = interval_bounds(predicate)
    if per_field is None:
        raise UnboundedSpeed("predicate is not a conjunctive interval "
                             "fragment")
    best = math.inf
    for f, bounds in per_field.items():
        speed = sensor.max_speed.get(f)
        if speed is None:
            raise UnboundedSpeed(f"field {f} has no max_speed")
        dist = min(abs(current[f] - b) for b in bounds)
        if speed == 0:
            continue                 # stationary field never flips the term
        best = min(best, dist / speed)
    if best is math.inf:
        return sensor.end_ts() + 1
    return now + int(best)


def shared_read(requests: list) -> list:
    """Merge tolerance-compatible read requests into minimal reads.

    requests: (sensor, field, due_ms, ahead_ms, delay_ms) tuples. Returns
    (read_at_ms, [request indices]) with each request served inside
    [due - ahead, due + delay]. Classic interval stabbing: sweep windows
    by right endpoint and reuse one read per overlapping run; the read is
    placed at the midpoint of the intersection.
    """
    groups: dict = {}
    for idx, (sensor, fld, due, ahead, delay) in enumerate(requests):
        groups.setdefault((sensor, fld), []).append(
            (due - ahead, due + delay, idx))
    reads = []
    for key in sorted(groups):
        windows = sorted(groups[key], key=lambda w: (w[1], w[0], w[2]))
        cur_l = cur_r = None
        serves: list = []
        for lo, hi, idx in windows:
            if serves and lo <= cur_r:
                cur_l = max(cur_l, lo)
                serves.append(idx)
            else:
                if serves:
                    reads.append(((cur_l + cur_r) // 2, serves))
                cur_l, cur_r, serves = lo, hi, [idx]
        if serves:
            reads.append(((cur_l + cur_r) // 2, serves))
    reads.sort(key=lambda r: (r[0], r[1]))
    return reads


def tick(sensor: SensorModel, read_plan: ReadPlan, schedule: ReadSchedule,
         now: int, counters: dict = None) -> Optional[dict]:
    """One scheduled wake-up: staged reads, early exit, optional skip.

    Returns the record to transmit (a dict of the read fields) or None if
    a guard failed or the tick falls inside a skip horizon.
    """
    values = None
    for ts, v in sensor.trace:
        if ts == now:
            values = v
            break
    if values is None:
        return None
    c = counters if counters is not None else {}
    c.setdefault("reads", 0)
    c.setdefault("reads_skipped", 0)
    c.setdefault("reads_by_field", {})
    out: dict = {}
    for stage in read_plan.stages:
        for f in stage.fields:
            fs = schedule.get(sensor.id, f)
            if fs is not None and fs.skip_until is not None \
                    and fs.skip_until > now:
                c["reads_skipped"] += 1
                return None          # skipped field implies a false guard
            c["reads"] += 1
            c["reads_by_field"][f] = c["reads_by_field"].get(f, 0) + 1
            out[f] = values[f]
        if stage.predicate is not None and not stage.predicate.eval(values):
            return None
    return out


class AqpRunner:
    """Engine-side hook deciding, per trace record, whether to transmit.

    Plugged into EngineNode as `aqp`; the source calls wants() for every
    record it pulls. A False return drops the record at the sensor, which
    is sound because the record provably fails the query's filter (either
    it was just evaluated, or it falls inside a proven skip horizon).
    """

    def __init__(self, plans: dict, sensors: dict = None,
                 read_cost: dict = None):
        self.plans = dict(plans)
        self.sensors = sensors or {}
        self.read_plans = {q: compile_read_plan(p, read_cost)
                           for q, p in plans.items()}
        self.skippable: dict = {}
        for q, p in plans.items():
            filt = next((op for op in p.ops if op.kind == "filter"), None)
            kinds = p.stream_of_source().kinds()
            if filt is not None and \
                    interval_bounds(filt.predicate, kinds) is not None:
                self.skippable[q] = filt.predicate
        self.skip_until: dict = {}   # (query, sensor) -> ms
        self.stats = {q: {"ticks": 0, "transmitted": 0, "reads": 0,
                          "reads_skipped": 0, "reads_by_field": {}}
                      for q in plans}

    def wants(self, q: str, sensor: str, ts: int, values: dict) -> bool:
        rp = self.read_plans.get(q)
        if rp is None:
            return True
        st = self.stats[q]
        st["ticks"] += 1
        if ts < self.skip_until.get((q, sensor), -1):
            st["reads_skipped"] += len(rp.all_fields())
            return False
        for stage in rp.stages:
            st["reads"] += len(stage.fields)
            for f in stage.fields:
                by = st["reads_by_field"]
                by[f] = by.get(f, 0) + 1
            if stage.predicate is not None \
                    and not stage.predicate.eval(values):
                self._maybe_skip(q, sensor, ts, values)
                return False
        st["transmitted"] += 1
        return True

    def _maybe_skip(self, q: str, sensor: str, ts: int, values: dict):
        pred = self.skippable.get(q)
        model = self.sensors.get(sensor)
        if pred is None or model is None:
            return
        try:
            until = skip_horizon(model, pred, values, ts)
        except UnboundedSpeed:
            return
        if until > ts:
            self.skip_until[(q, sensor)] = until

    def savings(self, q: str) -> dict:
        """Read and transmission reductions versus the naive baseline.

        Baseline reads every referenced field and transmits every record
        on every tick.
        """
        st = self.stats[q]
        per_tick = len(self.read_plans[q].all_fields())
        baseline_reads = st["ticks"] * per_tick
        reads = st["reads"]
        return {
            "ticks": st["ticks"],
            "reads": reads,
            "baseline_reads": baseline_reads,
            "read_reduction": (1 - reads / baseline_reads)
            if baseline_reads else 0.0,
            "transmitted": st["transmitted"],
            "baseline_transmissions": st["ticks"],
            "transmission_reduction": (1 - st["transmitted"] / st["ticks"])
            if st["ticks"] else 0.0,
        }
