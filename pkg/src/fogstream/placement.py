"""Operator placement onto a topology snapshot and incremental repair.

Cost model: transfer = sum over dataflow edges of (bytes/ms) x (summed link
latency of the routed path); node load = sum of (input records/ms x work
cost) / cpu_capacity. Filters with selectivity < 1 shrink downstream rates,
so pushing them toward entry nodes never increases transfer.

Three strategies: bottom-up (chain DP over the true transfer metric),
top-down (start all-on-cloud, descend ops only when it pays off), and
cloud-only. Ties always break on lowest node id, then lowest op id.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

from .errors import Infeasible
from .query import LogicalPlan, output_schema
from .topology import CLOUD, FOG, SENSOR, TopologyGraph

DEFAULT_WORK = {
    "source": 0.2, "filter": 0.2, "project": 0.1, "map": 0.2,
    "key_aggregate": 0.5, "topk": 0.5, "snapshot_join": 0.5, "sink": 0.1,
}

FIELD_BYTES = {"i64": 8, "f64": 8, "bool": 1, "text": 16}
RECORD_OVERHEAD = 8


@dataclass
class OperatorInstance:
    op_index: int
    instance: int
    placed_on: str
    work_cost: float
    selectivity_hint: float = 1.0

    @property
    def key(self) -> str:
        return f"{self.op_index}.{self.instance}"


@dataclass
class PlanCost:
    transfer: float
    max_node_load: float

    @property
    def feasible(self) -> bool:
        return self.max_node_load <= 1.0


@dataclass
class ExecutionPlan:
    query: str
    plan: LogicalPlan
    instances: list                    # [OperatorInstance]
    routes: dict                       # edge_id -> [node, ...]
    alt_routes: dict                   # edge_id -> [[node, ...], ...]
    topology_version: int
    cost: Optional[PlanCost] = None
    strategy: str = ""

    def instance_by_key(self, key: str) -> OperatorInstance:
        for inst in self.instances:
            if inst.key == key:
                return inst
        raise KeyError(key)

    def instances_of_op(self, op_index: int) -> list:
        return [i for i in self.instances if i.op_index == op_index]

    def instances_on(self, node: str) -> list:
        return [i for i in self.instances if i.placed_on == node]

    def edges(self) -> list:
        """[(edge_id, upstream instance, downstream instance)] in dataflow order."""
        out = []
        sources = self.instances_of_op(0)
        first_mid = self.instances_of_op(1)[0]
        for s in sources:
            out.append((edge_id(self.query, s, first_mid), s, first_mid))
        for i in range(1, len(self.plan.ops) - 1):
            up = self.instances_of_op(i)[0]
            down = self.instances_of_op(i + 1)[0]
            out.append((edge_id(self.query, up, down), up, down))
        return out


@dataclass
class PlanDelta:
    query: str
    moved: list        # [(instance_key, new_node)]
    rerouted: dict     # edge_id -> new path
    new_plan: ExecutionPlan


def edge_id(query: str, up: OperatorInstance, down: OperatorInstance) -> str:
    return f"{query}:e{up.key}-{down.key}"


def record_bytes(schema: list) -> int:
    return RECORD_OVERHEAD + sum(FIELD_BYTES[f.kind] for f in schema)


# ---------------------------------------------------------------------------
# Derived per-plan quantities
# ---------------------------------------------------------------------------

class _PlanShape:
    """Rates and record sizes along the chain, given selectivity hints."""

    def __init__(self, plan: LogicalPlan, rates=None, selectivities=None,
                 work_costs=None):
        self.plan = plan
        stream = plan.stream_of_source()
        self.members = sorted(stream.members)
        rates = rates or {}
        self.member_rate = {m: rates.get(m, stream.rate_hint) / 1000.0
                            for m in self.members}  # records per ms
        sel = selectivities or {}
        self.selectivity = [sel.get(i, 1.0) for i in range(len(plan.ops))]
        wc = work_costs or {}
        self.work = [wc.get(i, DEFAULT_WORK[op.kind])
                     for i, op in enumerate(plan.ops)]
        self.rec_bytes = [record_bytes(output_schema(plan, i))
                          for i in range(len(plan.ops))]

    def edge_rate(self, up_index: int, source_member=None) -> float:
        """Records/ms flowing out of op up_index (for one member if source)."""
        if up_index == 0:
            base = (self.member_rate[source_member] if source_member
                    else sum(self.member_rate.values()))
        else:
            base = sum(self.member_rate.values())
        rate = base
        for i in range(0, up_index + 1):
            rate *= self.selectivity[i]
        return rate

    def edge_bytes_per_ms(self, up_index: int, source_member=None) -> float:
        return self.edge_rate(up_index, source_member) * self.rec_bytes[up_index]


def _dist(topo: TopologyGraph, cache: dict, a: str, b: str) -> float:
    if a == b:
        return 0
    key = (a, b)
    if key not in cache:
        path = topo.shortest_path(a, b)
        cache[key] = topo.path_latency(path) if path else float("inf")
    return cache[key]


# ---------------------------------------------------------------------------
# place()
# ---------------------------------------------------------------------------

def place(plan: LogicalPlan, topo: TopologyGraph, strategy: str,
          rates=None, selectivities=None, work_costs=None,
          r_alt: int = 2) -> ExecutionPlan:
    """Assign the plan to the snapshot, returning a feasible ExecutionPlan.

    Sources pin to their sensors' entry nodes, the sink to the lowest-id
    cloud node, top-k to cloud (its state cannot be rebuilt from bounded
    replay). Raises Infeasible when no capacity-respecting assignment exists.
    """
    if strategy not in ("bottom-up", "top-down", "cloud-only"):
        raise ValueError(f"unknown strategy {strategy!r}")
    shape = _PlanShape(plan, rates, selectivities, work_costs)
    clouds = topo.by_layer(CLOUD)
    if not clouds:
        raise Infeasible("no cloud node")
    sink_node = clouds[0]
    entry_of = {}
    for m in shape.members:
        if m not in topo.nodes:
            raise Infeasible(f"sensor {m} not in topology")
        entries = topo.entry_nodes_of(m)
        if not entries:
            raise Infeasible(f"sensor {m} has no entry node")
        entry_of[m] = sorted(entries)[0]

    mid = list(range(1, len(plan.ops) - 1))
    candidates = sorted(topo.by_layer(FOG) + topo.by_layer(CLOUD))
    dist_cache: dict = {}

    def chain_cost(assign: dict) -> float:
        total = 0.0
        for m in shape.members:
            total += (shape.edge_bytes_per_ms(0, m)
                      * _dist(topo, dist_cache, entry_of[m], assign[mid[0]] if mid else sink_node))
        for j, i in enumerate(mid):
            nxt = assign[mid[j + 1]] if j + 1 < len(mid) else sink_node
            total += shape.edge_bytes_per_ms(i) * _dist(topo, dist_cache, assign[i], nxt)
        if not mid:
            pass
        return total

    pinned = {i: sink_node for i in mid if plan.ops[i].kind == "topk"}

    if strategy == "cloud-only":
        assign = {i: sink_node for i in mid}
    elif strategy == "bottom-up":
        assign = _dp_chain(plan, shape, topo, dist_cache, mid, candidates,
                           entry_of, sink_node, pinned)
    else:
        assign = dict({i: sink_node for i in mid})
        assign = _descend(plan, shape, topo, dist_cache, mid, candidates,
                          entry_of, sink_node, pinned, assign, chain_cost)
    assign.update(pinned)

    ep = _materialize(plan, topo, shape, assign, entry_of, sink_node,
                      strategy, r_alt)
    problems = check_execution_plan(ep, topo, rates, selectivities, work_costs)
    if problems:
        ep = _repair(ep, plan, topo, shape, assign, entry_of, sink_node,
                     strategy, r_alt, rates, selectivities, work_costs)
    return ep


def _dp_chain(plan, shape, topo, cache, mid, candidates, entry_of, sink_node,
              pinned):
    """Exact min-transfer assignment for the linear chain (capacity aside)."""
    if not mid:
        return {}
    best: dict = {}
    for n in (candidates if mid[0] not in pinned else [pinned[mid[0]]]):
        c = sum(shape.edge_bytes_per_ms(0, m) * _dist(topo, cache, entry_of[m], n)
                for m in shape.members)
        best[n] = (c, {mid[0]: n})
    for j in range(1, len(mid)):
        i = mid[j]
        prev_i = mid[j - 1]
        nxt: dict = {}
        opts = candidates if i not in pinned else [pinned[i]]
        for n in opts:
            entries = []
            for pn, (c, assign) in best.items():
                entries.append((c + shape.edge_bytes_per_ms(prev_i)
                                * _dist(topo, cache, pn, n), pn))
            entries.sort(key=lambda e: (e[0], e[1]))
            c, pn = entries[0]
            nxt[n] = (c, {**best[pn][1], i: n})
        best = nxt
    entries = []
    for n, (c, assign) in best.items():
        entries.append((c + shape.edge_bytes_per_ms(mid[-1])
                        * _dist(topo, cache, n, sink_node), n))
    entries.sort(key=lambda e: (e[0], e[1]))
    return best[entries[0][1]][1]


def _descend(plan, shape, topo, cache, mid, candidates, entry_of, sink_node,
             pinned, assign, chain_cost):
    """Greedy top-down: move ops off the cloud only when it reduces transfer."""
    for _ in range(8):
        improved = False
        for i in mid:
            if i in pinned:
                continue
            current = chain_cost(assign)
            entries = []
            for n in candidates:
                trial = {**assign, i: n}
                entries.append((chain_cost(trial), n))
            entries.sort(key=lambda e: (e[0], e[1]))
            c, n = entries[0]
            if c < current and n != assign[i]:
                assign[i] = n
                improved = True
        if not improved:
            break
    return assign


def _materialize(plan, topo, shape, assign, entry_of, sink_node, strategy,
                 r_alt) -> ExecutionPlan:
    instances = []
    for k, m in enumerate(shape.members):
        instances.append(OperatorInstance(0, k, entry_of[m],
                                          shape.work[0], shape.selectivity[0]))
    for i in range(1, len(plan.ops) - 1):
        instances.append(OperatorInstance(i, 0, assign[i],
                                          shape.work[i], shape.selectivity[i]))
    instances.append(OperatorInstance(len(plan.ops) - 1, 0, sink_node,
                                      shape.work[-1], shape.selectivity[-1]))
    ep = ExecutionPlan(query=plan.id, plan=plan, instances=instances,
                       routes={}, alt_routes={},
                       topology_version=topo.version, strategy=strategy)
    for eid, up, down in ep.edges():
        path = topo.shortest_path(up.placed_on, down.placed_on)
        if path is None:
            raise Infeasible(f"no route {up.placed_on}->{down.placed_on}")
        ep.routes[eid] = path
        ep.alt_routes[eid] = _alternatives(topo, path, r_alt)
    ep.cost = cost(ep, topo, shape=shape)
    return ep


def _alternatives(topo: TopologyGraph, primary: list, r_alt: int) -> list:
    """Up to r_alt-1 fallback paths, node-disjoint from the primary interior."""
    alts = []
    if len(primary) > 2 and r_alt > 1:
        alt = topo.shortest_path(primary[0], primary[-1], avoid=primary[1:-1])
        if alt is not None:
            alts.append(alt)
    return alts


def _repair(ep, plan, topo, shape, assign, entry_of, sink_node, strategy,
            r_alt, rates, selectivities, work_costs):
    """Move instances off overloaded nodes toward the cloud until feasible."""
    clouds = topo.by_layer(CLOUD)
    for _ in range(len(assign) * 4 + 4):
        problems = check_execution_plan(ep, topo, rates, selectivities, work_costs)
        if not problems:
            return ep
        node = problems[0][0]
        movable = sorted(i for i, n in assign.items()
                        if n == node and plan.ops[i].kind != "topk")
        if not movable or node in clouds:
            raise Infeasible(f"cannot relieve node {node}: {problems[0][1]}")
        i = movable[0]
        path = topo.shortest_path(node, sink_node)
        assign[i] = path[1] if path and len(path) > 1 else sink_node
        ep = _materialize(plan, topo, shape, assign, entry_of, sink_node,
                          strategy, r_alt)
    raise Infeasible("placement repair did not converge")


# ---------------------------------------------------------------------------
# cost() and the independent feasibility checker
# ---------------------------------------------------------------------------

def cost(ep: ExecutionPlan, topo: TopologyGraph, rates=None,
         selectivities=None, work_costs=None, shape=None) -> PlanCost:
    shape = shape or _PlanShape(ep.plan, rates, selectivities, work_costs)
    transfer = 0.0
    for eid, up, down in ep.edges():
        member = shape.members[up.instance] if up.op_index == 0 else None
        bpm = shape.edge_bytes_per_ms(up.op_index, member)
        transfer += bpm * topo.path_latency(ep.routes[eid])
    loads = node_loads(ep, topo, shape)
    max_load = max(loads.values()) if loads else 0.0
    return PlanCost(transfer=transfer, max_node_load=max_load)


def node_loads(ep: ExecutionPlan, topo: TopologyGraph,
               shape: Optional[_PlanShape] = None) -> dict:
    shape = shape or _PlanShape(ep.plan)
    loads: dict = {}
    for inst in ep.instances:
        if inst.op_index == 0:
            in_rate = shape.member_rate[shape.members[inst.instance]]
        else:
            in_rate = shape.edge_rate(inst.op_index - 1)
        node = topo.nodes[inst.placed_on]
        if node.cpu_capacity <= 0:
            loads[inst.placed_on] = float("inf")
            continue
        loads.setdefault(inst.placed_on, 0.0)
        loads[inst.placed_on] += in_rate * inst.work_cost / node.cpu_capacity
    return loads


def check_execution_plan(ep: ExecutionPlan, topo: TopologyGraph, rates=None,
                         selectivities=None, work_costs=None) -> list:
    """Re-derive loads, slots, and route validity from scratch.

    Returns a list of (node_or_edge, problem) strings; empty means feasible.
    Kept independent of place()'s internal bookkeeping on purpose.
    """
    problems = []
    shape = _PlanShape(ep.plan, rates, selectivities, work_costs)
    loads = node_loads(ep, topo, shape)
    for node, load in sorted(loads.items()):
        if load > 1.0:
            problems.append((node, f"load {load:.3f} > 1"))
    per_node: dict = {}
    for inst in ep.instances:
        if inst.op_index == 0:
            continue  # sources live on entry nodes outside slot accounting
        per_node[inst.placed_on] = per_node.get(inst.placed_on, 0) + 1
    for node, count in sorted(per_node.items()):
        if count > topo.nodes[node].memory_slots:
            problems.append((node, f"{count} instances > {topo.nodes[node].memory_slots} slots"))
    for eid, up, down in ep.edges():
        path = ep.routes.get(eid)
        if not path or path[0] != up.placed_on or path[-1] != down.placed_on:
            problems.append((eid, "route endpoints do not match placement"))
            continue
        for a, b in zip(path, path[1:]):
            if topo.link(a, b) is None:
                problems.append((eid, f"missing link {a}~{b}"))
    return problems


# ---------------------------------------------------------------------------
# Exhaustive enumeration (small instances)
# ---------------------------------------------------------------------------

def enumerate_optimum(plan: LogicalPlan, topo: TopologyGraph, rates=None,
                      selectivities=None, work_costs=None):
    """Brute-force best feasible assignment; (cost, assignment) or None.

    Only sensible on small instances (<= 8 fog nodes, <= 5 operators).
    """
    shape = _PlanShape(plan, rates, selectivities, work_costs)
    clouds = topo.by_layer(CLOUD)
    sink_node = clouds[0]
    entry_of = {m: sorted(topo.entry_nodes_of(m))[0] for m in shape.members}
    mid = list(range(1, len(plan.ops) - 1))
    candidates = sorted(topo.by_layer(FOG) + topo.by_layer(CLOUD))
    best = None
    for combo in itertools.product(candidates, repeat=len(mid)):
        assign = dict(zip(mid, combo))
        if any(plan.ops[i].kind == "topk" and assign[i] not in clouds
               for i in mid):
            continue
        try:
            ep = _materialize(plan, topo, shape, assign, entry_of, sink_node,
                              "enum", 1)
        except Infeasible:
            continue
        if check_execution_plan(ep, topo, rates, selectivities, work_costs):
            continue
        key = (ep.cost.transfer, tuple(combo))
        if best is None or key < best[0]:
            best = (key, assign)
    if best is None:
        return None
    return (best[0][0], best[1])


# ---------------------------------------------------------------------------
# reoptimize()
# ---------------------------------------------------------------------------

def reoptimize(ep: ExecutionPlan, delta, topo: TopologyGraph,
               rates=None, selectivities=None, work_costs=None) -> PlanDelta:
    """Minimal repair after a topology change.

    delta: ("node-down", node_id) or ("link-down", (a, b)). Untouched
    instances keep placement; raises Infeasible when no single-move repair
    exists (caller falls back to a full place()).
    """
    kind, target = delta
    moved: list = []
    rerouted: dict = {}

    def link_in_path(path, a, b):
        return any({x, y} == {a, b} for x, y in zip(path, path[1:]))

    if kind == "link-down":
        a, b = target
        new_routes = dict(ep.routes)
        for eid, up, down in ep.edges():
            if not link_in_path(ep.routes[eid], a, b):
                continue
            alt = next((p for p in ep.alt_routes.get(eid, [])
                        if not link_in_path(p, a, b)
                        and _path_valid(topo, p)), None)
            if alt is None:
                alt = topo.shortest_path(up.placed_on, down.placed_on)
                if alt is None or link_in_path(alt, a, b):
                    raise Infeasible(f"no surviving route for {eid}")
            rerouted[eid] = alt
            new_routes[eid] = alt
        new_ep = _clone_with(ep, ep.instances, new_routes, topo)
        return PlanDelta(ep.query, moved, rerouted, new_ep)

    if kind != "node-down":
        return PlanDelta(ep.query, [], {}, ep)

    dead = target
    hosted = [i for i in ep.instances if i.placed_on == dead]
    if any(i.op_index == 0 for i in hosted):
        raise Infeasible(f"entry node {dead} hosts a source; full redeploy needed")
    plan = ep.plan
    shape = _PlanShape(plan, rates, selectivities, work_costs)
    clouds = topo.by_layer(CLOUD)
    sink_node = clouds[0]
    entry_of = {}
    for m in shape.members:
        entries = sorted(topo.entry_nodes_of(m))
        if not entries:
            raise Infeasible(f"sensor {m} has no live entry node")
        entry_of[m] = entries[0]
    assign = {i.op_index: i.placed_on for i in ep.instances
              if 0 < i.op_index < len(plan.ops) - 1}

    candidates = sorted(n for n in topo.by_layer(FOG) + topo.by_layer(CLOUD)
                        if n != dead)
    for inst in sorted(hosted, key=lambda i: i.op_index):
        if inst.op_index == len(plan.ops) - 1:
            raise Infeasible("sink node failed; full redeploy needed")
        options = []
        for n in candidates:
            if plan.ops[inst.op_index].kind == "topk" and n not in clouds:
                continue
            trial = {**assign, inst.op_index: n}
            # ops still assigned to the dead node ride along provisionally
            # so trial routes never terminate at the failed host
            for op_i, host in list(trial.items()):
                if host == dead:
                    trial[op_i] = n
            try:
                trial_ep = _materialize_avoiding(plan, topo, shape, trial,
                                                 entry_of, sink_node, dead)
            except Infeasible:
                continue
            if check_execution_plan(trial_ep, topo, rates, selectivities,
                                    work_costs):
                continue
            options.append((trial_ep.cost.transfer, n))
        if not options:
            raise Infeasible(f"no feasible host for instance {inst.key}")
        options.sort(key=lambda o: (o[0], o[1]))
        assign[inst.op_index] = options[0][1]
        moved.append((inst.key, options[0][1]))

    new_ep = _materialize_avoiding(plan, topo, shape, assign, entry_of,
                                   sink_node, dead)
    issues = check_execution_plan(new_ep, topo, rates, selectivities,
                                  work_costs)
    if issues:
        raise Infeasible(f"repair fails validation: {issues[0]}")
    for eid in new_ep.routes:
        if eid in ep.routes and new_ep.routes[eid] != ep.routes[eid]:
            rerouted[eid] = new_ep.routes[eid]
    return PlanDelta(ep.query, moved, rerouted, new_ep)


def _clone_with(ep: ExecutionPlan, instances: list, routes: dict,
                topo: TopologyGraph) -> ExecutionPlan:
    new_ep = ExecutionPlan(query=ep.query, plan=ep.plan,
                           instances=list(instances), routes=dict(routes),
                           alt_routes=dict(ep.alt_routes),
                           topology_version=topo.version,
                           strategy=ep.strategy)
    new_ep.cost = cost(new_ep, topo)
    return new_ep


def _path_valid(topo: TopologyGraph, path: list) -> bool:
    return all(topo.link(a, b) is not None for a, b in zip(path, path[1:]))


def _materialize_avoiding(plan, topo, shape, assign, entry_of, sink_node,
                          dead) -> ExecutionPlan:
    ep = _materialize(plan, topo, shape, assign, entry_of, sink_node,
                      "reoptimize", 2)
    for eid, up, down in ep.edges():
        if dead in ep.routes[eid][1:-1] or dead in (ep.routes[eid][0], ep.routes[eid][-1]):
            path = topo.shortest_path(up.placed_on, down.placed_on, avoid=[dead])
            if path is None:
                raise Infeasible(f"no route avoiding {dead} for {eid}")
            ep.routes[eid] = path
    ep.cost = cost(ep, topo)
    return ep
