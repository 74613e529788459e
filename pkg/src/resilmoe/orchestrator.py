"""Control plane: registry, ERT versioning, request placement and recovery.

The orchestrator also plays the request gateway: arrivals are admitted to
healthy AWs round-robin. Failures are learned from worker reports (or, in
baseline mode, from the process manager) and never pause healthy workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .attention_worker import FRESH, FROM_CHECKPOINT, REPLAY
from .core import Request
from .refe import ExpertRoutingTable
from .wire import (
    PRIMARY, SHADOW, FailureReport, Kind, RequestDone, RestoreRequest, SubmitRequest,
    WorkerId,
)

logger = logging.getLogger(__name__)


@dataclass
class Pod:
    """A group of AWs that route only to its own EWs."""
    aws: list[int]
    ews: list[int]
    primary: dict[int, int]               # expert -> EW index
    shadows: dict[int, list[int]] = field(default_factory=dict)

    def hosted_by(self, ew: int) -> dict[int, int]:
        roles = {e: PRIMARY for e, w in self.primary.items() if w == ew}
        for e, ws in self.shadows.items():
            if ew in ws:
                roles.setdefault(e, SHADOW)
        return roles


@dataclass
class WorkerInfo:
    kind: Kind
    status: str = "healthy"
    experts: dict[int, int] = field(default_factory=dict)


@dataclass
class ClusterView:
    workers: dict[WorkerId, WorkerInfo] = field(default_factory=dict)
    ert_version: int = 0
    request_placement: dict[int, WorkerId] = field(default_factory=dict)
    provisioning: list[tuple[Kind, int, int]] = field(default_factory=list)

    def current(self, kind: Kind, index: int) -> WorkerId | None:
        ids = [w for w in self.workers if w.kind == kind and w.index == index]
        return max(ids) if ids else None

    def healthy(self, kind: Kind) -> list[WorkerId]:
        return sorted(w for w, info in self.workers.items()
                      if w.kind == kind and info.status == "healthy")


class Orchestrator:
    def __init__(self, wid: WorkerId, net, *, pods: list[Pod], t_w: int, sink,
                 store=None, ckpt: WorkerId | None = None, self_heal: bool = True,
                 restore_mode: str = "checkpoint"):
        if restore_mode not in ("checkpoint", "sequential_replay"):
            raise ValueError(f"unknown restore mode {restore_mode!r}")
        self.wid = wid
        self.net = net
        self.sched = net.sched
        self.pods = pods
        self.t_w = t_w
        self.sink = sink
        self.store = store
        self.ckpt = ckpt
        self.self_heal = self_heal
        self.restore_mode = restore_mode
        self.view = ClusterView()
        self.erts: dict[int, ExpertRoutingTable] = {}
        self.requests: dict[int, Request] = {}
        self.backlog: list[int] = []
        self.admit_cursor = 0
        self.redistribute_cursor = 0
        self.provisioner: Callable[..., WorkerId] | None = None
        self.stopped: Callable[[WorkerId], None] | None = None
        self.reassignments: list[tuple[int, int, WorkerId, WorkerId, str]] = []

    # -- registry --------------------------------------------------------

    def pod_of(self, w: WorkerId) -> int:
        for i, pod in enumerate(self.pods):
            if (w.kind == Kind.AW and w.index in pod.aws) or (w.kind == Kind.EW and w.index in pod.ews):
                return i
        raise KeyError(f"{w} belongs to no pod")

    def register(self, w: WorkerId) -> None:
        experts = self.pods[self.pod_of(w)].hosted_by(w.index) if w.kind == Kind.EW else {}
        self.view.workers[w] = WorkerInfo(w.kind, "healthy", experts)

    def pod_aws(self, pod: int) -> list[WorkerId]:
        return [w for w in self.view.healthy(Kind.AW) if w.index in self.pods[pod].aws]

    # -- routing tables --------------------------------------------------

    def build_ert(self, pod: int) -> ExpertRoutingTable:
        p = self.pods[pod]
        entries = {}
        for e in sorted(p.primary):
            hosts = []
            for ew_index in [p.primary[e]] + p.shadows.get(e, []):
                w = self.view.current(Kind.EW, ew_index)
                if w is not None and self.view.workers[w].status == "healthy":
                    hosts.append(w)
            if not hosts:
                continue
            entries[e] = tuple((w, PRIMARY if j == 0 else SHADOW) for j, w in enumerate(hosts))
        return ExpertRoutingTable(self.view.ert_version, entries)

    def rebuild_erts(self, pods: list[int] | None = None) -> None:
        for pod in range(len(self.pods)) if pods is None else pods:
            self.view.ert_version += 1
            self.erts[pod] = self.build_ert(pod)

    def broadcast_ert(self, pod: int) -> None:
        msg = self.erts[pod].to_message()
        for aw in self.pod_aws(pod):
            self.net.send(self.wid, aw, msg)
        self.sched.record("ert", pod, msg.table_version)

    # -- gateway ---------------------------------------------------------

    def submit(self, req: Request) -> None:
        self.requests[req.id] = req
        self.sink.arrived(req.id, self.sched.now)
        self.backlog.append(req.id)
        self._drain_backlog()

    def _drain_backlog(self) -> None:
        aws = self.view.healthy(Kind.AW)
        if not aws:
            return
        for rid in self.backlog:
            target = aws[self.admit_cursor % len(aws)]
            self.admit_cursor += 1
            self._send_submit(rid, target, FRESH, 0)
        self.backlog = []

    def _send_submit(self, rid: int, target: WorkerId, restoring: int, replay_upto: int) -> None:
        req = self.requests[rid]
        self.view.request_placement[rid] = target
        self.net.send(self.wid, target, SubmitRequest(rid, req.max_new_tokens, restoring,
                                                      req.prompt_token_ids, replay_upto))

    # -- messages --------------------------------------------------------

    def handle(self, src: WorkerId, msg, cls: str) -> None:
        if isinstance(msg, FailureReport):
            self.on_worker_failed(msg.failed, self.sched.now)
        elif isinstance(msg, RequestDone):
            if self.view.request_placement.get(msg.request_id) == msg.aw_id:
                del self.view.request_placement[msg.request_id]
                self.sink.done(msg.request_id, self.sched.now)

    # -- failures --------------------------------------------------------

    def on_worker_failed(self, w: WorkerId, now: int) -> None:
        info = self.view.workers.get(w)
        if info is None or info.status != "healthy":
            return
        info.status = "failed"
        self.sink.detected(w, now)
        self.sched.record("orch_failed", str(w))
        if not self.self_heal:
            self._baseline_failure(w)
            return
        if w.kind == Kind.EW:
            pod = self.pod_of(w)
            self.rebuild_erts([pod])
            self.broadcast_ert(pod)
        elif w.kind == Kind.AW:
            self._redistribute(w)
        self.provision_worker(w.kind, w.index, now)

    def _redistribute(self, failed: WorkerId) -> None:
        rids = sorted(r for r, aw in self.view.request_placement.items() if aw == failed)
        aws = self.view.healthy(Kind.AW)
        for rid in rids:
            if not aws:
                del self.view.request_placement[rid]
                self.backlog.append(rid)
                continue
            target = aws[self.redistribute_cursor % len(aws)]
            self.redistribute_cursor += 1
            delivered = self.sink.delivered(rid)
            committed = None
            if self.restore_mode == "checkpoint" and self.store is not None:
                committed = self.store.latest_committed(rid)
            if committed is not None:
                self._send_submit(rid, target, FROM_CHECKPOINT, delivered)
                self.net.send(self.wid, self.ckpt, RestoreRequest(rid, target))
                how = "checkpoint"
            else:
                self._send_submit(rid, target, REPLAY if delivered else FRESH, delivered)
                how = "replay"
            self.reassignments.append((self.sched.now, rid, failed, target, how))
            self.sched.record("reassign", rid, str(target), how)

    def _baseline_failure(self, w: WorkerId) -> None:
        """Coarse restart: EW alone restarts; an AW failure restarts everything."""
        if w.kind == Kind.EW:
            self.provision_worker(Kind.EW, w.index, self.sched.now)
            return
        for other, info in sorted(self.view.workers.items()):
            if info.status == "healthy" and other.kind in (Kind.AW, Kind.EW):
                info.status = "failed"
                if self.stopped is not None:
                    self.stopped(other)
        self.sched.after(self.t_w, self._restart_all)

    def _restart_all(self) -> None:
        olds = {(w.kind, w.index): self.view.current(w.kind, w.index)
                for w in self.view.workers if w.kind in (Kind.AW, Kind.EW)}
        new_aws = {i: w.next_incarnation() for (k, i), w in olds.items() if k == Kind.AW}
        for (k, i), w in sorted(olds.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
            pod = self.pods[self.pod_of(w)]
            expected = [new_aws[a] for a in pod.aws if a in new_aws] if k == Kind.EW else None
            self._join(k, i, expected)

    # -- provisioning ----------------------------------------------------

    def provision_worker(self, kind: Kind, index: int, now: int) -> None:
        if any(k == kind and i == index for k, i, _ in self.view.provisioning):
            return
        ready_at = now + self.t_w
        self.view.provisioning.append((kind, index, ready_at))
        self.sched.at(ready_at, self._join, kind, index)

    def _join(self, kind: Kind, index: int, expected=None) -> None:
        self.view.provisioning = [p for p in self.view.provisioning if (p[0], p[1]) != (kind, index)]
        w = self.provisioner(kind, index, expected)
        self.sched.record("join", str(w))
        self.sink.joined(w, self.sched.now)
        if kind == Kind.EW:
            pod = self.pod_of(w)
            self.rebuild_erts([pod])
            self.broadcast_ert(pod)
        else:
            self._restart_requests(w)
            self._drain_backlog()

    def _restart_requests(self, w: WorkerId) -> None:
        """Baseline restart: requests of the old incarnation replay from scratch."""
        for rid, aw in sorted(self.view.request_placement.items()):
            if aw.kind == Kind.AW and aw.index == w.index and aw != w \
                    and self.view.workers[aw].status != "healthy":
                self._send_submit(rid, w, REPLAY, self.sink.delivered(rid))
