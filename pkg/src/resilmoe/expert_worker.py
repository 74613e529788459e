"""Stateless expert worker.

Dispatches are buffered per (expert, layer). The EW launches its frontier
layer once every AW it currently considers healthy has flushed that layer,
or early for any expert whose buffer reaches ``min_batch``. AWs it has not
yet seen are aligned on their first message: a layer-1 token from a new AW
waits for the next wrap, a token for a layer the EW already passed runs as
a solo priority batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .core import ModelConfig, expert_forward
from .timing import Timing
from .wire import (
    PRIMARY, PRIORITY, SHADOW, ExpertOutput, FailureReport, FlushAck, LayerFlush,
    LivenessState, Probe, ProbeAck, Prober, ReadySignal, TokenDispatch, WorkerId,
)

logger = logging.getLogger(__name__)


class UnknownExpert(Exception):
    pass


class NotHosted(Exception):
    pass


@dataclass
class HostedExpert:
    role: int
    active: bool


@dataclass(frozen=True)
class BatchPolicy:
    min_batch: int = 32
    knee_low: int = 256
    base: int = 410_000
    per_token: int = 500

    def __post_init__(self):
        if not 0 < self.min_batch <= self.knee_low:
            raise ValueError("need 0 < min_batch <= knee_low")

    def exec_time(self, batch_size: int) -> int:
        """Flat up to the knee, linear beyond it."""
        return self.base + self.per_token * max(0, batch_size - self.knee_low)


@dataclass
class EwState:
    worker_id: WorkerId
    hosted: dict[int, HostedExpert]
    frontier: int | None = None
    batch_buffers: dict[tuple[int, int], list[TokenDispatch]] = field(default_factory=dict)

    @property
    def early_buffer(self) -> list[TokenDispatch]:
        return [d for (_, layer), buf in sorted(self.batch_buffers.items())
                if layer != self.frontier for d in buf]


@dataclass
class EwCounters:
    batches: int = 0
    tokens: int = 0
    batch_sizes: list[int] = field(default_factory=list)
    launches_all_healthy: int = 0
    launches_min_batch: int = 0
    launches_late: int = 0
    late_tokens: int = 0
    early_tokens: int = 0
    omitted_slots: int = 0
    shadow_activations: int = 0
    nacks: int = 0


class ExpertWorker:
    def __init__(self, wid: WorkerId, cfg: ModelConfig, timing: Timing, net, *,
                 hosted: dict[int, int], orchestrator: WorkerId, self_heal: bool = True,
                 policy: BatchPolicy | None = None, expected_aws=()):
        self.wid = wid
        self.cfg = cfg
        self.net = net
        self.sched = net.sched
        self.orchestrator = orchestrator
        self.state = EwState(wid, {e: HostedExpert(r, r == PRIMARY) for e, r in hosted.items()})
        self.policy = policy or BatchPolicy(cfg.min_expert_batch, cfg.knee_low,
                                            timing.exec_base, timing.exec_per_token)
        self.liveness = LivenessState(timing.probe_interval, timing.retry_limit, timing.deadline)
        self.prober = Prober(wid, net, self.liveness, self._on_aw_failed)
        self.prober.enabled = self_heal
        self.attached: set[WorkerId] = set()
        self.pending_attach: dict[WorkerId, int] = {}
        # AWs known to route here that have not sent anything yet
        self.expected: set[WorkerId] = set(expected_aws)
        self.flushed: dict[int, dict[WorkerId, int]] = {}
        self._watching = None  # layer whose missing flushers are being probed
        self.omitted = 0  # AWs declared failed since the last layer launch
        self.busy_until = 0
        self.counters = EwCounters()
        self.launch_log: list[tuple[int, int, int, str, tuple]] = []

    @property
    def frontier(self) -> int | None:
        return self.state.frontier

    def announce(self, aws: list[WorkerId]) -> None:
        """Ready signal after (re)provisioning."""
        for aw in aws:
            self.net.send(self.wid, aw, ReadySignal(self.wid))

    # -- message handling ------------------------------------------------

    def handle(self, src: WorkerId, msg, cls: str) -> None:
        if isinstance(msg, TokenDispatch):
            try:
                self.enqueue_token(msg)
            except UnknownExpert:
                self.counters.nacks += 1
                logger.warning("%s: dispatch for unhosted expert %d", self.wid, msg.expert_id)
        elif isinstance(msg, LayerFlush):
            self.on_flush(msg)
        elif isinstance(msg, Probe):
            self.net.send(self.wid, src, ProbeAck(msg.nonce))
        elif isinstance(msg, ProbeAck):
            self.prober.activity(src)

    def _classify(self, aw: WorkerId, layer: int) -> str:
        """'current', 'future' or 'late' for a message from ``aw`` at ``layer``."""
        f = self.state.frontier
        self.expected.discard(aw)
        if aw not in self.attached:
            first = self.pending_attach.get(aw)
            if first is None:
                if layer == f or layer > f or (layer == 1 and f != 1):
                    self.pending_attach[aw] = layer
                    first = layer
                else:
                    self.attached.add(aw)
                    return "late"
            if layer != first:
                return "late"
            return "current" if layer == f else "future"
        return "current" if layer == f else "late"

    def enqueue_token(self, d: TokenDispatch) -> None:
        aw = d.aw_id
        self.prober.activity(aw)
        h = self.state.hosted.get(d.expert_id)
        if h is None:
            raise UnknownExpert(d.expert_id)
        if not h.active:
            self.activate_shadow(d.expert_id)
        if self.state.frontier is None:
            self.adopt_frontier(d)
        kind = self._classify(aw, d.layer)
        if kind == "late":
            self.counters.late_tokens += 1
            self._launch(d.expert_id, d.layer, [d], "late")
            return
        if kind == "future":
            self.counters.early_tokens += 1
        buf = self.state.batch_buffers.setdefault((d.expert_id, d.layer), [])
        if d.flags & PRIORITY:
            buf.insert(0, d)
        else:
            buf.append(d)
        if kind == "current":
            self.try_launch_batch(d.expert_id, d.layer, self.sched.now)

    def on_flush(self, msg: LayerFlush) -> None:
        aw = msg.aw_id
        self.prober.activity(aw)
        if self.state.frontier is None:
            self.state.frontier = msg.layer
        if self._classify(aw, msg.layer) == "late":
            if msg.n_tokens == 0:
                self.net.send(self.wid, aw, FlushAck(self.wid, msg.layer))
            return
        self.flushed.setdefault(msg.layer, {})[aw] = msg.n_tokens
        self.prober.unwatch(aw)
        self._try_complete_layer()

    # -- launching -------------------------------------------------------

    def try_launch_batch(self, expert_id: int, layer: int, now: int) -> str:
        """Condition (ii): an expert buffer at the frontier reached min_batch."""
        if layer != self.state.frontier:
            return "wait"
        buf = self.state.batch_buffers.get((expert_id, layer))
        if buf and len(buf) >= self.policy.min_batch:
            del self.state.batch_buffers[(expert_id, layer)]
            self._launch(expert_id, layer, buf, "min_batch")
            return "launch"
        return "wait"

    def required_aws(self, layer: int) -> set[WorkerId]:
        """Failed AWs are dropped from every membership set on detection."""
        req = self.attached | self.expected
        if self.pending_attach:
            req = req | {a for a, l in self.pending_attach.items() if l == layer}
        return req

    def _try_complete_layer(self) -> None:
        """Condition (i): every currently healthy AW flushed the frontier layer."""
        while self.state.frontier is not None and self.net.is_alive(self.wid):
            f = self.state.frontier
            required = self.required_aws(f)
            if not required:
                return
            got = self.flushed.get(f, {})
            if len(got) < len(required) or not required <= got.keys():
                if self._watching != f:
                    self._watching = f
                    for aw in sorted(required - got.keys()):
                        self.prober.watch(aw)
                return
            groups = [(e, self.state.batch_buffers.pop((e, f)))
                      for e in sorted(self.state.hosted) if self.state.batch_buffers.get((e, f))]
            if groups:
                self._launch_group(f, groups, "all_healthy")
            self.counters.omitted_slots += self.omitted
            self.omitted = 0
            for aw, n in sorted(got.items()):
                if n == 0:
                    self.net.send(self.wid, aw, FlushAck(self.wid, f))
            for aw in [a for a, l in self.pending_attach.items() if l == f]:
                del self.pending_attach[aw]
                self.attached.add(aw)
            self.flushed.pop(f, None)
            self.state.frontier = f % self.cfg.num_layers + 1
            self._watching = None
            self.sched.record("ew_advance", str(self.wid), f)

    def _launch(self, expert_id: int, layer: int, batch: list[TokenDispatch], trigger: str) -> None:
        self._launch_group(layer, [(expert_id, batch)], trigger)

    def _launch_group(self, layer: int, groups: list[tuple[int, list[TokenDispatch]]],
                      trigger: str) -> None:
        """One grouped kernel over the given per-expert batches."""
        total = 0
        for _, batch in groups:
            if {d.layer for d in batch} != {layer}:
                raise AssertionError("mixed-layer batch")
            total += len(batch)
        start = max(self.sched.now, self.busy_until)
        self.busy_until = start + self.policy.exec_time(total)
        c = self.counters
        for expert_id, batch in groups:
            n = len(batch)
            c.batches += 1
            c.tokens += n
            c.batch_sizes.append(n)
            if trigger == "all_healthy":
                c.launches_all_healthy += 1
            elif trigger == "min_batch":
                c.launches_min_batch += 1
            else:
                c.launches_late += 1
            aws = tuple(sorted({str(d.aw_id) for d in batch}))
            self.launch_log.append((self.sched.now, expert_id, layer, trigger, aws))
            self.sched.record("launch", str(self.wid), expert_id, layer, n, trigger)
            self.sched.at(self.busy_until, self._finish_batch, expert_id, batch)

    def _finish_batch(self, expert_id: int, batch: list[TokenDispatch]) -> None:
        if not self.net.is_alive(self.wid):
            return
        for d in batch:
            y = expert_forward(expert_id, d.layer, d.embedding)
            self.net.send(self.wid, d.aw_id, ExpertOutput(
                d.request_id, d.aw_id, d.layer, d.token_index, expert_id, d.gate_weight, y, d.flags))

    # -- shadows and joins -----------------------------------------------

    def activate_shadow(self, expert_id: int) -> None:
        h = self.state.hosted.get(expert_id)
        if h is None or h.role != SHADOW:
            raise NotHosted(f"{self.wid} hosts no shadow of expert {expert_id}")
        if not h.active:
            h.active = True
            self.counters.shadow_activations += 1
            self.sched.record("shadow_on", str(self.wid), expert_id)

    def adopt_frontier(self, first_dispatch: TokenDispatch) -> None:
        if self.state.frontier is None:
            self.state.frontier = first_dispatch.layer
            self.sched.record("adopt_frontier", str(self.wid), first_dispatch.layer)

    def _on_aw_failed(self, aw: WorkerId) -> None:
        self.sched.record("ew_detect", str(self.wid), str(aw))
        self.attached.discard(aw)
        self.expected.discard(aw)
        self.pending_attach.pop(aw, None)
        self.omitted += 1
        self.net.send(self.wid, self.orchestrator, FailureReport(self.wid, aw))
        self._try_complete_layer()
