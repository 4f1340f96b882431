"""Layered physical graph: sensors, fog (entry/routing/exit), cloud.

The graph is mutated only by the coordinator; the optimizer works against
immutable snapshots. Versions increment on every mutation so plans can record
which topology they were optimized against.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

from .errors import DanglingLink, DuplicateId, FogstreamError
from . import simnet

SENSOR = "sensor"
FOG = "fog"
CLOUD = "cloud"

ENTRY = "entry"
ROUTING = "routing"
EXIT = "exit"


@dataclass
class TopologyNode:
    id: str
    layer: str
    fog_role: Optional[str] = None
    cpu_capacity: float = 1.0     # work-units per ms
    memory_slots: int = 8         # resident operator instances
    position: tuple = (0.0, 0.0)


@dataclass
class LinkSpec:
    latency: int
    bandwidth: int


@dataclass
class Zone:
    id: str
    members: list
    aggregate_cpu: float
    aggregate_slots: int
    border_links: list


class TopologyGraph:
    def __init__(self):
        self.nodes: dict[str, TopologyNode] = {}
        self.links: dict[tuple, LinkSpec] = {}  # normalized (min,max) key
        self.version = 0
        self._frozen = False

    # -- mutation --------------------------------------------------------

    def register_node(self, node: TopologyNode, links: list) -> int:
        """Add a node with its links [(peer_id, latency, bandwidth), ...].

        Sensors must attach to at least one fog entry node.
        """
        self._check_mutable()
        if node.id in self.nodes:
            raise DuplicateId(node.id)
        for peer, _, _ in links:
            if peer not in self.nodes:
                raise DanglingLink(f"{node.id} -> {peer}")
        if node.layer == SENSOR:
            entries = [p for p, _, _ in links
                       if self.nodes[p].layer == FOG and self.nodes[p].fog_role == ENTRY]
            if not entries:
                raise DanglingLink(f"sensor {node.id} has no entry-node link")
        self.nodes[node.id] = node
        for peer, latency, bandwidth in links:
            self.links[self._key(node.id, peer)] = LinkSpec(latency, bandwidth)
        self.version += 1
        return self.version

    def add_link(self, a: str, b: str, latency: int, bandwidth: int) -> int:
        self._check_mutable()
        if a not in self.nodes or b not in self.nodes:
            raise DanglingLink(f"{a}~{b}")
        self.links[self._key(a, b)] = LinkSpec(latency, bandwidth)
        self.version += 1
        return self.version

    def _check_mutable(self):
        if self._frozen:
            raise FogstreamError("snapshot is immutable")

    @staticmethod
    def _key(a: str, b: str) -> tuple:
        return (a, b) if a <= b else (b, a)

    # -- queries ---------------------------------------------------------

    def neighbors(self, node_id: str) -> list:
        out = []
        for (a, b) in self.links:
            if a == node_id:
                out.append(b)
            elif b == node_id:
                out.append(a)
        return sorted(out)

    def link(self, a: str, b: str) -> Optional[LinkSpec]:
        return self.links.get(self._key(a, b))

    def by_layer(self, layer: str) -> list:
        return sorted(n for n, spec in self.nodes.items() if spec.layer == layer)

    def entry_nodes_of(self, sensor_id: str) -> list:
        return [p for p in self.neighbors(sensor_id)
                if self.nodes[p].layer == FOG and self.nodes[p].fog_role == ENTRY]

    def reachable(self, frm: str, layers=None) -> set:
        """BFS over up links; layers restricts which node layers may be traversed."""
        seen = {frm}
        queue = [frm]
        while queue:
            cur = queue.pop(0)
            for nxt in self.neighbors(cur):
                if nxt in seen:
                    continue
                if layers is not None and self.nodes[nxt].layer not in layers:
                    continue
                seen.add(nxt)
                queue.append(nxt)
        return seen

    def validate(self):
        """Every sensor must reach at least one cloud node."""
        clouds = set(self.by_layer(CLOUD))
        for s in self.by_layer(SENSOR):
            if not (self.reachable(s) & clouds):
                raise FogstreamError(f"sensor {s} cannot reach any cloud node")

    def shortest_path(self, frm: str, to: str, avoid=(),
                      avoid_links=()) -> Optional[list]:
        """Dijkstra by summed link latency; deterministic lowest-id tie-break.

        Sensors other than the endpoints never relay traffic. avoid skips
        nodes, avoid_links skips undirected (a, b) pairs.
        """
        import heapq as hq

        avoid = set(avoid)
        bad_links = {frozenset(pair) for pair in avoid_links}
        dist = {frm: (0, [frm])}
        heap = [(0, frm, [frm])]
        while heap:
            d, cur, path = hq.heappop(heap)
            if cur == to:
                return path
            if d > dist.get(cur, (float("inf"),))[0]:
                continue
            for nxt in self.neighbors(cur):
                if nxt in avoid or frozenset((cur, nxt)) in bad_links:
                    continue
                if nxt != to and self.nodes[nxt].layer == SENSOR:
                    continue
                spec = self.link(cur, nxt)
                nd = d + spec.latency
                if nxt not in dist or (nd, path + [nxt]) < dist[nxt]:
                    dist[nxt] = (nd, path + [nxt])
                    hq.heappush(heap, (nd, nxt, path + [nxt]))
        return None

    def path_latency(self, path: list) -> int:
        return sum(self.link(a, b).latency for a, b in zip(path, path[1:]))

    # -- snapshots -------------------------------------------------------

    def snapshot(self) -> "TopologyGraph":
        snap = TopologyGraph()
        snap.nodes = copy.deepcopy(self.nodes)
        snap.links = copy.deepcopy(self.links)
        snap.version = self.version
        snap._frozen = True
        return snap

    def structurally_equal(self, other: "TopologyGraph") -> bool:
        return (sorted(self.nodes) == sorted(other.nodes)
                and {k: (v.latency, v.bandwidth) for k, v in self.links.items()}
                == {k: (v.latency, v.bandwidth) for k, v in other.links.items()})

    # -- simnet bridge ---------------------------------------------------

    def instantiate(self, net: simnet.Network):
        """Mirror nodes and links into a simnet.Network."""
        for node_id in sorted(self.nodes):
            net.add_node(node_id)
        for (a, b), spec in sorted(self.links.items()):
            net.add_link(a, b, spec.latency, spec.bandwidth)


def build_zones(graph: TopologyGraph, max_zone_size: int) -> list:
    """Partition fog nodes into zones by greedy bottom-up subtree grouping.

    Orientation is a BFS forest rooted at the cloud nodes; a child's open
    group merges into its parent's while the combined size stays within
    max_zone_size, otherwise the child group closes as a zone. Ties break on
    smallest node id.
    """
    clouds = graph.by_layer(CLOUD)
    depth = {c: 0 for c in clouds}
    parent: dict[str, Optional[str]] = {c: None for c in clouds}
    frontier = list(clouds)
    while frontier:
        nxt = []
        for cur in frontier:
            for nb in graph.neighbors(cur):
                if nb in depth or graph.nodes[nb].layer == SENSOR:
                    continue
                depth[nb] = depth[cur] + 1
                parent[nb] = cur
                nxt.append(nb)
        frontier = sorted(nxt)

    fog = [n for n in graph.by_layer(FOG) if n in depth]
    open_group: dict[str, list] = {n: [n] for n in fog}
    zones: list[list] = []
    # deepest first so children are resolved before their parents
    for n in sorted(fog, key=lambda n: (-depth[n], n)):
        p = parent.get(n)
        if p is not None and graph.nodes[p].layer == FOG:
            merged = open_group[p] + open_group[n]
            if len(merged) <= max_zone_size:
                open_group[p] = merged
                open_group[n] = []
            else:
                zones.append(open_group[n])
        else:
            zones.append(open_group[n])
    zones = [z for z in zones if z]

    out = []
    for members in sorted(zones, key=lambda z: min(z)):
        members = sorted(members)
        member_set = set(members)
        border = []
        for (a, b) in sorted(graph.links):
            if (a in member_set) != (b in member_set):
                border.append(simnet.link_id(a, b))
        out.append(Zone(
            id=f"zone-{members[0]}",
            members=members,
            aggregate_cpu=sum(graph.nodes[m].cpu_capacity for m in members),
            aggregate_slots=sum(graph.nodes[m].memory_slots for m in members),
            border_links=border,
        ))
    return out
