"""Cloud-side coordinator: rollout, failure detection, and recovery.

The coordinator is co-located with the lowest-id cloud node (one hop away on
a fat private link) and speaks to every engine through source-routed control
envelopes over the same simulated network the data uses.

Rollouts are sequential and downstream-first: the sink side of a query is
deployed before its upstreams so no data ever arrives at an unconfigured
consumer, and sources are started last. A rollout either completes or is
compensated with undeploys, so partial deployments never process data.

Recovery comes in two flavors. Fine-grained: reoptimize produces a minimal
PlanDelta, changed Node-EPs are redeployed in update mode (runtime state on
untouched nodes survives, which is what preserves exactly-once), and the
upstream logs replay into the moved instances. Stop-the-world: undeploy
everything, re-place on the surviving topology, restart sources from their
live position; records from the outage are lost by design.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import deploy as dep
from .engine import AckMsg, EngineConfig, EngineNode, Envelope, Heartbeat
from .errors import Infeasible
from .monitor import Monitor, StatsReport
from .placement import place, reoptimize
from .query import LogicalPlan, output_schema, parse_query
from .recovery import FailureDetector
from .simnet import FaultScript, Network
from .topology import CLOUD, FOG, SENSOR, TopologyGraph

COORD = "coordinator"


@dataclass
class _QueryCtl:
    plan: LogicalPlan
    ep: object
    epoch: int
    strategy: str
    horizon: int
    status: str              # deploying | active | recovering | failed | done
    params: tuple            # (rates, selectivities, work_costs)
    events: list = field(default_factory=list)


class Coordinator:
    def __init__(self, net: Network, topo: TopologyGraph, cfg: EngineConfig,
                 monitor: Monitor):
        self.net = net
        self.topo = topo
        self.cfg = cfg
        self.monitor = monitor
        clouds = topo.by_layer(CLOUD)
        if not clouds:
            raise Infeasible("coordinator needs a cloud node")
        self.cloud0 = clouds[0]
        net.add_node(COORD, self.handle)
        net.add_link(COORD, self.cloud0, latency=1, bandwidth=100000)
        self.detector = FailureDetector(cfg.hb_timeout_ms)
        self.down_links: set = set()     # frozenset({a, b}) per failed link
        self.queries: dict = {}
        self.rollouts: dict = {}      # (query, epoch) -> state
        self.counters = {"stw": 0, "fine": 0, "failed_rollouts": 0}
        net.schedule(cfg.hb_interval_ms, COORD, ("sweep",))

    # -- control routing -------------------------------------------------

    def path_to(self, node: str):
        avoid = [n for n in self.detector.down if n != node]
        if node == self.cloud0:
            return [node]
        path = self.topo.shortest_path(self.cloud0, node, avoid=avoid,
                                       avoid_links=self.down_links)
        return path  # includes cloud0 as the first hop

    def paths_from(self, node: str) -> list:
        """Engine-side return paths, primary plus a node-disjoint alternate."""
        if node == self.cloud0:
            return [[COORD]]
        avoid = [n for n in self.detector.down if n != node]
        primary = self.topo.shortest_path(node, self.cloud0, avoid=avoid,
                                          avoid_links=self.down_links)
        if primary is None:
            return []
        paths = [primary[1:] + [COORD]]
        if len(primary) > 2:
            alt = self.topo.shortest_path(
                node, self.cloud0, avoid=list(primary[1:-1]) + avoid,
                avoid_links=self.down_links)
            if alt is not None:
                paths.append(alt[1:] + [COORD])
        return paths

    def _refresh_coord_paths(self):
        """Push updated return paths to every reachable engine.

        Stale heartbeat paths through a dead relay would make healthy
        nodes look dead in turn, so paths are recomputed after every
        detected fault.
        """
        for node in sorted(self.topo.nodes):
            if self.topo.nodes[node].layer == SENSOR:
                continue
            if node in self.detector.down:
                continue
            path = self.path_to(node)
            if path is None:
                continue
            msg = ("coord-paths", self.paths_from(node))
            self.net.send(COORD, path[0],
                          Envelope(path[1:], msg, dep.HEARTBEAT_BYTES),
                          dep.HEARTBEAT_BYTES)

    def _send_ctrl(self, node: str, msg):
        path = self.path_to(node)
        if path is None:
            return False
        size = dep.wire_size(msg)
        try:
            self.net.send(COORD, path[0], Envelope(path[1:], msg, size), size)
        except Exception:
            return False
        return True

    # -- query submission ------------------------------------------------

    def submit(self, plan: LogicalPlan, strategy: str, horizon: int,
               rates=None, selectivities=None, work_costs=None) -> str:
        qid = plan.id
        ep = place(plan, self.topo, strategy, rates, selectivities, work_costs)
        ctl = _QueryCtl(plan=plan, ep=ep, epoch=1, strategy=strategy,
                        horizon=horizon, status="deploying",
                        params=(rates, selectivities, work_costs))
        self.queries[qid] = ctl
        neps = dep.disassemble(ep, 1)
        steps = [(nep.node, dep.Deploy(qid, 1, nep, "full"))
                 for nep in dep.rollout_order(neps, ep)]
        for host in sorted({i.placed_on for i in ep.instances_of_op(0)}):
            steps.append((host, dep.SourceStart(qid, 1, horizon, "continue")))
        self._start_rollout(qid, 1, steps, kind="submit")
        return qid

    def _start_rollout(self, qid: str, epoch: int, steps: list, kind: str):
        now = self.net.now
        state = {"steps": steps, "idx": 0, "acked": [], "kind": kind,
                 "t0": now}
        self.rollouts[(qid, epoch)] = state
        self.net.schedule(now + self.cfg.rollout_timeout_ms, COORD,
                          ("rollout-timeout", qid, epoch))
        self._advance_rollout(qid, epoch)

    def _advance_rollout(self, qid: str, epoch: int):
        state = self.rollouts.get((qid, epoch))
        ctl = self.queries[qid]
        while state is not None:
            if state["idx"] >= len(state["steps"]):
                del self.rollouts[(qid, epoch)]
                ctl.status = "active"
                ctl.events.append((self.net.now, f"rollout {epoch} complete"))
                return
            node, msg = state["steps"][state["idx"]]
            if self._send_ctrl(node, msg):
                return  # wait for the ack
            self._fail_rollout(qid, epoch, f"cannot reach {node}")
            return

    def _on_ctrl_ack(self, ack: dep.CtrlAck, now: int):
        state = self.rollouts.get((ack.query, ack.epoch))
        if state is None:
            return
        node, msg = state["steps"][state["idx"]]
        if ack.node != node or ack.about != msg.kind:
            return
        if not ack.ok:
            self._fail_rollout(ack.query, ack.epoch,
                               f"{node} refused {msg.kind}: {ack.detail}")
            return
        state["acked"].append(node)
        state["idx"] += 1
        self._advance_rollout(ack.query, ack.epoch)

    def _fail_rollout(self, qid: str, epoch: int, reason: str):
        state = self.rollouts.pop((qid, epoch), None)
        ctl = self.queries[qid]
        self.counters["failed_rollouts"] += 1
        ctl.events.append((self.net.now, f"rollout {epoch} failed: {reason}"))
        if state and state["kind"] == "delta":
            self._stw(qid, self.net.now)
        else:
            # all-or-nothing: compensate the partial deployment
            for node in sorted(set(state["acked"] if state else [])):
                self._send_ctrl(node, dep.Undeploy(qid, epoch))
            ctl.status = "failed"

    # -- event handling --------------------------------------------------

    def handle(self, msg, now, frm):
        if isinstance(msg, Envelope):
            inner = msg.msg
            if isinstance(inner, Heartbeat):
                if self.detector.beat(inner.node, now):
                    self._refresh_coord_paths()
            elif isinstance(inner, StatsReport):
                if self.detector.beat(inner.node, now):
                    self._refresh_coord_paths()
                self.monitor.record(inner)
            elif isinstance(inner, dep.CtrlAck):
                self._on_ctrl_ack(inner, now)
            return
        if isinstance(msg, tuple):
            if msg[0] == "sweep":
                fresh = self.detector.sweep(now)
                if fresh:
                    self._refresh_coord_paths()
                for node in fresh:
                    self._on_node_down(node, now)
                self.net.schedule(now + self.cfg.hb_interval_ms, COORD,
                                  ("sweep",))
            elif msg[0] == "rollout-timeout":
                _, qid, epoch = msg
                if (qid, epoch) in self.rollouts:
                    self._fail_rollout(qid, epoch, "timeout")
            elif msg[0] == "link-down":
                self.down_links.add(frozenset((msg[1], msg[2])))
                self._refresh_coord_paths()
                self._on_link_down(msg[1], msg[2], now)
            elif msg[0] == "link-up":
                self.down_links.discard(frozenset((msg[1], msg[2])))
                self._refresh_coord_paths()

    def observe(self, script: FaultScript):
        """Register link faults for delayed detection.

        Node crashes are detected organically through missed heartbeats;
        link state is not heartbeated, so the harness tells the coordinator
        with a configurable detection delay instead.
        """
        for t, kind, target in script.entries:
            if kind in ("link-down", "link-up"):
                a, _, b = target.partition("~")
                self.net.schedule(max(t + self.cfg.link_detect_ms, self.net.now),
                                  COORD, (kind, a, b))

    # -- recovery --------------------------------------------------------

    def _involved(self, ep, node: str) -> bool:
        if any(i.placed_on == node for i in ep.instances):
            return True
        return any(node in route for route in ep.routes.values())

    def _on_node_down(self, node: str, now: int):
        for qid in sorted(self.queries):
            ctl = self.queries[qid]
            if ctl.status not in ("active", "recovering"):
                continue
            if not self._involved(ctl.ep, node):
                continue
            ctl.events.append((now, f"node {node} down"))
            if self.cfg.recovery_mode == "stw":
                self._stw(qid, now)
                continue
            live = self._filtered_topo(set(self.detector.down) - {node})
            try:
                delta = reoptimize(ctl.ep, ("node-down", node), live,
                                   *ctl.params)
            except Infeasible:
                self._stw(qid, now)
                continue
            self.counters["fine"] += 1
            self._apply_delta(qid, delta, now)

    def _on_link_down(self, a: str, b: str, now: int):
        for qid in sorted(self.queries):
            ctl = self.queries[qid]
            if ctl.status not in ("active", "recovering"):
                continue
            used = any(any({x, y} == {a, b} for x, y in zip(p, p[1:]))
                       for p in ctl.ep.routes.values())
            if not used:
                continue
            ctl.events.append((now, f"link {a}~{b} down"))
            live = self._filtered_topo(set(self.detector.down))
            try:
                delta = reoptimize(ctl.ep, ("link-down", (a, b)), live,
                                   *ctl.params)
            except Infeasible:
                self._stw(qid, now)
                continue
            self.counters["fine"] += 1
            self._apply_delta(qid, delta, now)

    def apply_delta(self, qid: str, delta, now=None):
        """Planned reconfiguration entry point (same path as fine recovery)."""
        self.counters["fine"] += 1
        self._apply_delta(qid, delta, self.net.now if now is None else now)

    def _apply_delta(self, qid: str, delta, now: int):
        ctl = self.queries[qid]
        ctl.epoch += 1
        epoch = ctl.epoch
        old_neps = {n.node: dep.encode(dep.Deploy(qid, epoch, n, "update"))
                    for n in dep.disassemble(ctl.ep, epoch)}
        new_list = dep.disassemble(delta.new_plan, epoch)
        steps = []
        for nep in dep.rollout_order(new_list, delta.new_plan):
            msg = dep.Deploy(qid, epoch, nep, "update")
            if old_neps.get(nep.node) == dep.encode(msg):
                continue  # unchanged fragment keeps its state and epoch
            if nep.node in self.detector.down:
                continue
            steps.append((nep.node, msg))
        new_nodes = {n.node for n in new_list}
        for node in sorted(set(old_neps) - new_nodes):
            if node not in self.detector.down:
                steps.append((node, dep.Undeploy(qid, epoch)))
        replay_edges = set()
        moved_keys = {key for key, _ in delta.moved}
        for eid, up, down in delta.new_plan.edges():
            if up.placed_on == down.placed_on:
                continue
            if down.key in moved_keys or eid in delta.rerouted:
                replay_edges.add((eid, up.placed_on))
        for eid, host in sorted(replay_edges):
            if host not in self.detector.down:
                steps.append((host, dep.ReplayRequest(qid, epoch, eid)))
        ctl.ep = delta.new_plan
        ctl.status = "recovering"
        self._start_rollout(qid, epoch, steps, kind="delta")

    def _stw(self, qid: str, now: int):
        ctl = self.queries[qid]
        self.counters["stw"] += 1
        ctl.epoch += 1
        epoch = ctl.epoch
        ctl.events.append((now, f"stop-the-world redeploy, epoch {epoch}"))
        avoid = set(self.detector.down)
        topo2 = self._filtered_topo(avoid)
        try:
            ep = place(ctl.plan, topo2, ctl.strategy, *ctl.params)
        except Infeasible as exc:
            ctl.status = "failed"
            ctl.events.append((now, f"stw infeasible: {exc}"))
            return
        old_nodes = {n.node for n in dep.disassemble(ctl.ep, epoch)}
        steps = [(node, dep.Undeploy(qid, epoch))
                 for node in sorted(old_nodes) if node not in avoid]
        neps = dep.disassemble(ep, epoch)
        steps += [(nep.node, dep.Deploy(qid, epoch, nep, "full"))
                  for nep in dep.rollout_order(neps, ep)]
        for host in sorted({i.placed_on for i in ep.instances_of_op(0)}):
            steps.append((host, dep.SourceStart(qid, epoch, ctl.horizon,
                                                "live")))
        ctl.ep = ep
        ctl.status = "recovering"
        self._start_rollout(qid, epoch, steps, kind="stw")

    def _filtered_topo(self, avoid: set) -> TopologyGraph:
        if not avoid and not self.down_links:
            return self.topo
        topo2 = TopologyGraph()
        topo2.nodes = {n: node for n, node in self.topo.nodes.items()
                       if n not in avoid}
        topo2.links = {k: v for k, v in self.topo.links.items()
                       if k[0] not in avoid and k[1] not in avoid
                       and frozenset((k[0], k[1])) not in self.down_links}
        topo2.version = self.topo.version
        return topo2


class Runtime:
    """One-stop assembly: network, engines, coordinator, monitor."""

    def __init__(self, topo: TopologyGraph, traces: dict,
                 config: EngineConfig = None, aqp=None):
        topo.validate()
        self.topo = topo
        self.traces = traces
        self.cfg = config or EngineConfig()
        self.net = Network()
        topo.instantiate(self.net)
        self.monitor = Monitor()
        self.engines: dict = {}
        for layer in (FOG, CLOUD):
            for node_id in topo.by_layer(layer):
                self.engines[node_id] = EngineNode(
                    self.net, node_id, topo.nodes[node_id].cpu_capacity,
                    traces, self.cfg, aqp)
        self.coordinator = Coordinator(self.net, topo, self.cfg, self.monitor)
        for node_id in sorted(self.engines):
            self.engines[node_id].start(self.coordinator.paths_from(node_id))

    def submit_text(self, text: str, streams: dict, query_id: str,
                    strategy: str, horizon: int, **kw) -> str:
        plan = parse_query(text, streams, query_id)
        return self.submit(plan, strategy, horizon, **kw)

    def submit(self, plan: LogicalPlan, strategy: str, horizon: int,
               rates=None, selectivities=None, work_costs=None) -> str:
        return self.coordinator.submit(plan, strategy, horizon, rates,
                                       selectivities, work_costs)

    def inject(self, script: FaultScript):
        self.net.inject(script)
        self.coordinator.observe(script)

    def run_until(self, t: int):
        self.net.run_until(t)

    def run(self, horizon: int):
        """Run to the horizon plus the drain window so in-flight data lands."""
        self.net.run_until(horizon + self.cfg.drain_ms)

    def sink_emissions(self, query: str) -> list:
        ctl = self.coordinator.queries[query]
        sink = ctl.ep.instances_of_op(len(ctl.plan.ops) - 1)[0]
        return self.engines[sink.placed_on].emissions(query)

    def sink_output(self, query: str) -> list:
        """Emission value tuples in output-schema order, like the reference."""
        ctl = self.coordinator.queries[query]
        schema = [f.name for f in output_schema(ctl.plan)]
        return [tuple(v.get(f) for f in schema)
                for _, _, _, v in self.sink_emissions(query)]

    def latencies(self, query: str) -> list:
        ctl = self.coordinator.queries[query]
        sink = ctl.ep.instances_of_op(len(ctl.plan.ops) - 1)[0]
        st = self.engines[sink.placed_on].queries.get(query)
        return list(st.latency_samples) if st else []
