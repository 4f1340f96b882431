"""In-band observability: periodic node stats and latency percentiles.

Engines ship a fixed-size StatsReport to the coordinator at MONITOR priority,
so monitoring traffic queues behind data on congested links instead of
competing with it. Sink hosts piggyback their fresh end-to-end latency
samples on the same report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import NoSamples


@dataclass
class StatsReport:
    node: str
    t: int
    busy_fraction: float
    queue_len: int
    op_counts: dict                      # op_index -> (records_in, records_out)
    latency_samples: dict = field(default_factory=dict)  # query -> [ms]


class Monitor:
    def __init__(self):
        self.reports: list = []               # (t, node, report)
        self.by_node: dict = {}               # node -> [report]
        self.latencies: dict = {}             # query -> [ms]

    def record(self, report: StatsReport):
        self.reports.append((report.t, report.node, report))
        self.by_node.setdefault(report.node, []).append(report)
        for query, samples in sorted(report.latency_samples.items()):
            self.latencies.setdefault(query, []).extend(samples)

    def latency_percentiles(self, query: str, percentiles=(50, 95, 99)) -> dict:
        """Nearest-rank percentiles over all collected samples."""
        samples = sorted(self.latencies.get(query, []))
        if not samples:
            raise NoSamples(query)
        out = {}
        for p in percentiles:
            rank = max(1, math.ceil(p / 100.0 * len(samples)))
            out[p] = samples[rank - 1]
        return out

    def busy_series(self, node: str) -> list:
        return [(r.t, r.busy_fraction) for r in self.by_node.get(node, [])]

    def queue_series(self, node: str) -> list:
        return [(r.t, r.queue_len) for r in self.by_node.get(node, [])]

    def measured_selectivities(self, n_ops: int) -> dict:
        """Observed out/in ratio per operator index, aggregated over nodes.

        Feed these back into place() to refine the selectivity hints.
        """
        totals: dict = {}
        for _, _, report in self.reports:
            for op_index, (rec_in, rec_out) in report.op_counts.items():
                a, b = totals.get(op_index, (0, 0))
                totals[op_index] = (a + rec_in, b + rec_out)
        return {i: (out / rec_in) for i, (rec_in, out) in sorted(totals.items())
                if rec_in > 0}
