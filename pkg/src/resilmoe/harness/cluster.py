"""Wires the worker state machines onto one scheduler and runs a scenario."""

from __future__ import annotations

import logging

import numpy as np

from ..attention_worker import AttentionWorker
from ..checkpoint_store import CheckpointStore
from ..core import VOCAB_SIZE, Request, segment_size
from ..expert_worker import ExpertWorker
from ..orchestrator import Orchestrator, Pod
from ..wire import CkptSegment, ExpertOutput, Kind, Network, TokenDispatch, WorkerId
from .metrics import MetricsReport, MetricsSink, build_report
from .scenario import Scenario
from .scheduler import Scheduler

logger = logging.getLogger(__name__)

ORCH = WorkerId(Kind.ORCH, 0)
CKPT = WorkerId(Kind.CKPT, 0)


def make_pods(cfg, aws: int, ews: int, pods: int, shadows: bool) -> list[Pod]:
    out = []
    a, e = aws // pods, ews // pods
    for p in range(pods):
        aw_ids = list(range(p * a, (p + 1) * a))
        ew_ids = list(range(p * e, (p + 1) * e))
        primary = {x: ew_ids[x % e] for x in range(cfg.num_experts)}
        shadow = {}
        if shadows and e > 1:
            shadow = {x: [ew_ids[(x + 1) % e]] for x in range(cfg.num_experts)}
        out.append(Pod(aw_ids, ew_ids, primary, shadow))
    return out


def make_requests(sc: Scenario) -> list[tuple[int, Request]]:
    """Arrival times and requests, a pure function of the scenario seed."""
    w = sc.workload
    rng = np.random.default_rng(sc.seed)
    out = []
    if w["kind"] == "trace":
        for rid, (t, plen, mnt) in enumerate(w["trace"]):
            prompt = tuple(int(x) for x in rng.integers(0, VOCAB_SIZE, size=int(plen)))
            out.append((int(t), Request(rid, prompt, int(mnt))))
        return out
    t = float(w["start"])
    for rid in range(int(w["num_requests"])):
        if rid:
            t += rng.exponential(1e9 / w["rate"])
        prompt = tuple(int(x) for x in rng.integers(0, VOCAB_SIZE, size=int(w["prompt_len"])))
        out.append((int(t), Request(rid, prompt, int(w["max_new_tokens"]))))
    return out


class Cluster:
    def __init__(self, sc: Scenario):
        self.sc = sc
        cfg, timing = sc.model, sc.timing
        self.sched = Scheduler(keep_trace=sc.keep_trace)
        token_bytes = cfg.hidden_size * cfg.elem_size
        sizes = {TokenDispatch: token_bytes, ExpertOutput: token_bytes,
                 CkptSegment: segment_size(cfg)}
        rng = np.random.default_rng(sc.seed + 1) if sc.jitter else None
        self.net = Network(self.sched, timing.link_latency, sc.jitter, rng, sizes)
        self.sink = MetricsSink()
        self.pods = make_pods(cfg, sc.aws, sc.ews, sc.pods, sc.shadows)
        ckpt_mode = sc.checkpoint["mode"]
        self.use_store = sc.self_heal and ckpt_mode == "incremental"
        self.store = CheckpointStore(CKPT, cfg, self.net, self.sink) if self.use_store else None
        self.orch = Orchestrator(ORCH, self.net, pods=self.pods, t_w=timing.t_w, sink=self.sink,
                                 store=self.store, ckpt=CKPT if self.use_store else None,
                                 self_heal=sc.self_heal, restore_mode=sc.restore_mode)
        self.orch.provisioner = self._provision
        self.orch.stopped = self.net.kill
        self.net.attach(ORCH, self.orch.handle)
        if self.store is not None:
            self.net.attach(CKPT, self.store.handle)
            self.net.connect(CKPT, ORCH)
        self.aws: dict[WorkerId, AttentionWorker] = {}
        self.ews: dict[WorkerId, ExpertWorker] = {}

        initial_aws = [WorkerId(Kind.AW, i) for i in range(sc.aws)]
        initial_ews = [WorkerId(Kind.EW, i) for i in range(sc.ews)]
        for w in initial_aws + initial_ews:
            self.orch.register(w)
        self.orch.rebuild_erts()
        for w in initial_ews:
            pod = self.pods[self.orch.pod_of(w)]
            self._spawn_ew(w, [WorkerId(Kind.AW, a) for a in pod.aws], announce=False)
        for w in initial_aws:
            self._spawn_aw(w)
        for t, req in make_requests(sc):
            self.sched.at(t, self.orch.submit, req)
        for f in sc.failures:
            self.sched.at(f.time, self.inject_failure, f.kind, f.index)

    # -- workers ---------------------------------------------------------

    def _spawn_aw(self, w: WorkerId, joining: bool = False) -> AttentionWorker:
        sc = self.sc
        pod = self.orch.pod_of(w)
        ert = self.orch.erts[pod]
        mode = sc.checkpoint["mode"]
        if mode == "incremental" and not self.use_store:
            mode = "off"
        aw = AttentionWorker(
            w, sc.model, sc.timing, self.net, ert=ert, orchestrator=ORCH,
            ckpt=CKPT if self.use_store else None, sink=self.sink, ckpt_mode=mode,
            pause_interval=int(sc.checkpoint["interval"]),
            kv_region_bytes=int(sc.checkpoint["kv_region_bytes"]),
            max_seq_len=int(sc.checkpoint["max_seq_len"]), self_heal=sc.self_heal)
        aw.refe.ready = {e for e in ert.hosts() if self.net.is_alive(e)}
        self.aws[w] = aw
        self.net.attach(w, aw.handle)
        self.net.connect(w, ORCH)
        if self.use_store:
            self.net.connect(w, CKPT, sc.timing.ckpt_latency, sc.timing.ckpt_rate)
        for e in self.ews:
            if self.net.is_alive(e):
                self.net.connect(w, e, sc.timing.link_latency)
        aw.start(await_region=joining)
        return aw

    def _spawn_ew(self, w: WorkerId, expected, announce: bool) -> ExpertWorker:
        sc = self.sc
        pod = self.pods[self.orch.pod_of(w)]
        ew = ExpertWorker(w, sc.model, sc.timing, self.net, hosted=pod.hosted_by(w.index),
                          orchestrator=ORCH, self_heal=sc.self_heal, expected_aws=expected)
        self.ews[w] = ew
        self.net.attach(w, ew.handle)
        self.net.connect(w, ORCH)
        for a in self.aws:
            if self.net.is_alive(a):
                self.net.connect(w, a, sc.timing.link_latency)
        if announce:
            ew.announce([a for a in self.orch.pod_aws(self.orch.pod_of(w))])
        return ew

    def _provision(self, kind: Kind, index: int, expected=None) -> WorkerId:
        old = self.orch.view.current(kind, index)
        w = old.next_incarnation() if old is not None else WorkerId(kind, index)
        self.orch.register(w)
        if kind == Kind.EW:
            if expected is None:
                expected = self.orch.pod_aws(self.orch.pod_of(w))
            self._spawn_ew(w, expected, announce=True)
        else:
            self._spawn_aw(w, joining=True)
        return w

    def inject_failure(self, kind: Kind, index: int) -> WorkerId:
        w = self.orch.view.current(kind, index)
        self.sink.frontier_snapshot(self.sched.now, {str(a): aw.layer for a, aw in self.aws.items()
                                                     if self.net.is_alive(a)})
        self.net.kill(w)
        self.sink.failed(w, self.sched.now)
        self.sched.record("fail", str(w))
        if not self.sc.self_heal:
            self.orch.on_worker_failed(w, self.sched.now)
        return w

    # -- running ---------------------------------------------------------

    def run(self, until: int | None = None) -> MetricsReport:
        end = self.sc.duration if until is None else until
        self.sched.run(until=end)
        return self.report(end)

    def report(self, end: int | None = None) -> MetricsReport:
        end = self.sched.now if end is None else end
        return build_report(self.sink, self.net, list(self.aws.values()),
                            list(self.ews.values()), self.sc.metrics_window, end)


def run(sc: Scenario) -> tuple[MetricsReport, Cluster]:
    cl = Cluster(sc)
    return cl.run(), cl


def run_baseline_coarse(sc: Scenario) -> tuple[MetricsReport, Cluster]:
    """Same scenario under coarse restart: no probing, no shadows, no checkpoints."""
    from dataclasses import replace
    base = replace(sc, mode="baseline", shadows=False,
                   checkpoint={**sc.checkpoint, "mode": "off"})
    return run(base)
