"""Token-emission bookkeeping and the derived report."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from ..wire import WorkerId


class MetricsSink:
    """Collects events as they happen; the gateway's view of the token stream."""

    def __init__(self):
        self.arrivals: dict[int, int] = {}
        self.completions: dict[int, int] = {}
        # request -> index -> (token, first emission time, emitting AW)
        self.emissions: dict[int, dict[int, tuple[int, int, str]]] = {}
        self.duplicates = 0
        self.mismatches: list[tuple[int, int]] = []
        self.restore_times: dict[int, tuple[int, str]] = {}
        self.detections: dict[WorkerId, int] = {}
        self.failures: list[tuple[int, WorkerId]] = []
        self.joins: list[tuple[int, WorkerId]] = []
        self.frontiers: dict[int, dict[str, int]] = {}  # failure time -> AW -> layer in flight

    def arrived(self, rid: int, t: int) -> None:
        self.arrivals.setdefault(rid, t)

    def emit(self, aw: WorkerId, rid: int, index: int, token: int, t: int) -> None:
        seen = self.emissions.setdefault(rid, {})
        prev = seen.get(index)
        if prev is None:
            seen[index] = (token, t, str(aw))
            return
        self.duplicates += 1
        if prev[0] != token:
            self.mismatches.append((rid, index))

    def delivered(self, rid: int) -> int:
        seen = self.emissions.get(rid)
        return max(seen) if seen else 0

    def restored(self, rid: int, t: int, mode: str) -> None:
        self.restore_times[rid] = (t, mode)

    def detected(self, w: WorkerId, t: int) -> None:
        self.detections.setdefault(w, t)

    def failed(self, w: WorkerId, t: int) -> None:
        self.failures.append((t, w))

    def frontier_snapshot(self, t: int, layers: dict[str, int]) -> None:
        self.frontiers[t] = layers

    def joined(self, w: WorkerId, t: int) -> None:
        self.joins.append((t, w))

    def done(self, rid: int, t: int) -> None:
        self.completions.setdefault(rid, t)


@dataclass
class StallRecord:
    failure_time: int
    worker: str
    stall: int                 # longest gap over the failure window minus median TBT
    longest_gap: int
    median_tbt: int
    request_id: int | None
    token_index: int | None    # index being generated at the failure
    layer: int | None          # layer its AW was executing at the failure
    recovered_at: int | None
    detection_latency: int | None


@dataclass
class MetricsReport:
    tokens: dict[int, list[int]]
    emission_times: dict[int, list[int]]
    emitters: dict[int, list[str]]
    throughput: list[tuple[int, int]]           # (window start ns, tokens)
    window: int
    stalls: list[StallRecord]
    bytes_by_class: dict[str, int]
    replayed_gpu_time: float
    detection_latencies: dict[str, int]
    restore_times: dict[int, tuple[int, str]]
    batch_stats: dict[str, float]
    duplicates: int
    mismatches: list[tuple[int, int]]
    completed: int
    counters: dict[str, dict] = field(default_factory=dict)

    def tbt(self, rid: int) -> list[int]:
        ts = self.emission_times.get(rid, [])
        return [b - a for a, b in zip(ts, ts[1:])]

    @property
    def total_tokens(self) -> int:
        return sum(len(v) for v in self.tokens.values())

    def tokens_per_second(self, start: int = 0, end: int | None = None) -> float:
        times = [t for ts in self.emission_times.values() for t in ts
                 if t >= start and (end is None or t < end)]
        if not times:
            return 0.0
        hi = end if end is not None else max(times)
        span = hi - start
        return len(times) * 1e9 / span if span > 0 else 0.0


def _sorted_stream(seen: dict[int, tuple[int, int, str]]):
    idx = sorted(seen)
    return idx, [seen[i][0] for i in idx], [seen[i][1] for i in idx], [seen[i][2] for i in idx]


def stall_for_failure(sink: MetricsSink, t_fail: int, worker: WorkerId) -> StallRecord:
    """Longest inter-token gap overlapping [failure, recovery], minus median pre-failure TBT."""
    pre_gaps = []
    affected = []
    for rid, seen in sink.emissions.items():
        idx, _, times, _ = _sorted_stream(seen)
        for a, b in zip(times, times[1:]):
            if b <= t_fail:
                pre_gaps.append(b - a)
        before = [t for t in times if t <= t_fail]
        after = [t for t in times if t > t_fail]
        done_at = sink.completions.get(rid)
        if before and after and (done_at is None or done_at > t_fail):
            k = len(before) - 1
            affected.append((rid, idx[k], before[-1], after[0], seen[idx[k]][2]))
    median = int(statistics.median(pre_gaps)) if pre_gaps else 0
    det = sink.detections.get(worker)
    if not affected:
        return StallRecord(t_fail, str(worker), 0, 0, median, None, None, None, None,
                           None if det is None else det - t_fail)
    recovered = max(a[3] for a in affected)
    rid, last_idx, last_t, next_t, aw = max(affected, key=lambda a: (a[3] - a[2], -a[0]))
    gap = next_t - last_t
    layer = sink.frontiers.get(t_fail, {}).get(aw)
    return StallRecord(t_fail, str(worker), max(0, gap - median), gap, median, rid,
                       last_idx + 1, layer, recovered, None if det is None else det - t_fail)


def build_report(sink: MetricsSink, net, aws, ews, window: int, end: int) -> MetricsReport:
    tokens, times, emitters = {}, {}, {}
    for rid, seen in sorted(sink.emissions.items()):
        _, toks, ts, who = _sorted_stream(seen)
        tokens[rid], times[rid], emitters[rid] = toks, ts, who
    nwin = max(1, -(-end // window))
    counts = [0] * nwin
    for ts in times.values():
        for t in ts:
            counts[min(t // window, nwin - 1)] += 1
    stalls = [stall_for_failure(sink, t, w) for t, w in sink.failures]
    sizes = [n for ew in ews for n in ew.counters.batch_sizes]
    batch = {
        "batches": len(sizes),
        "mean_size": statistics.fmean(sizes) if sizes else 0.0,
        "all_healthy": sum(ew.counters.launches_all_healthy for ew in ews),
        "min_batch": sum(ew.counters.launches_min_batch for ew in ews),
        "late": sum(ew.counters.launches_late for ew in ews),
        "early_tokens": sum(ew.counters.early_tokens for ew in ews),
        "omitted_slots": sum(ew.counters.omitted_slots for ew in ews),
        "shadow_activations": sum(ew.counters.shadow_activations for ew in ews),
    }
    counters = {str(aw.wid): vars(aw.refe.counters).copy() for aw in aws}
    fail_at = {w: t for t, w in sink.failures}
    det = {str(w): t - fail_at[w] for w, t in sink.detections.items() if w in fail_at}
    return MetricsReport(
        tokens=tokens, emission_times=times, emitters=emitters,
        throughput=[(k * window, c) for k, c in enumerate(counts)], window=window,
        stalls=stalls, bytes_by_class=dict(net.bytes_by_class),
        replayed_gpu_time=sum(aw.replayed_gpu for aw in aws),
        detection_latencies=det, restore_times=dict(sink.restore_times),
        batch_stats=batch, duplicates=sink.duplicates, mismatches=list(sink.mismatches),
        completed=len(sink.completions), counters=counters,
    )
