"""AW-side forwarding engine.

Resolves logical experts through the routing table, dispatches token
embeddings, gathers expert outputs behind the layer barrier, replays calls
whose EW died, and streams KV segments to the checkpoint store in the idle
gaps between expert exchanges.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import KVSegment
from .wire import (
    PRIORITY, PRIMARY, SHADOW, CkptSegment, Commit, ErtUpdate, FailureReport,
    FlushAck, LayerFlush, LivenessState, Prober, TokenDispatch, WorkerId,
)

logger = logging.getLogger(__name__)


class NoRouteAvailable(Exception):
    def __init__(self, expert_id: int):
        super().__init__(f"no live host for expert {expert_id}")
        self.expert_id = expert_id


@dataclass(frozen=True)
class ExpertRoutingTable:
    version: int
    entries: dict[int, tuple[tuple[WorkerId, int], ...]]

    def __post_init__(self):
        for e, hosts in self.entries.items():
            if not hosts:
                raise ValueError(f"expert {e} has no host")
            ids = [w for w, _ in hosts]
            if len(set(ids)) != len(ids):
                raise ValueError(f"expert {e} lists a host twice")

    def hosts(self) -> set[WorkerId]:
        return {w for hosts in self.entries.values() for w, _ in hosts}

    def to_message(self) -> ErtUpdate:
        return ErtUpdate(self.version, tuple(sorted(
            (e, tuple(hosts)) for e, hosts in self.entries.items())))

    @classmethod
    def from_message(cls, msg: ErtUpdate) -> "ExpertRoutingTable":
        return cls(msg.table_version, {e: tuple(h) for e, h in msg.entries})


def resolve(ert: ExpertRoutingTable, expert_id: int, liveness: LivenessState,
            ready: set[WorkerId] | None = None, exclude: set[WorkerId] = frozenset()) -> WorkerId:
    """First non-failed host for ``expert_id``, primaries before shadows."""
    hosts = ert.entries.get(expert_id)
    if not hosts:
        raise NoRouteAvailable(expert_id)
    for role in (PRIMARY, SHADOW):
        for w, r in hosts:
            if r != role or w in exclude or liveness.is_failed(w):
                continue
            if ready is not None and w not in ready:
                continue
            return w
    raise NoRouteAvailable(expert_id)


def apply_ert_update(ert: ExpertRoutingTable, update) -> ExpertRoutingTable:
    """Version-guarded replacement; stale or duplicate updates are ignored."""
    new = update if isinstance(update, ExpertRoutingTable) else ExpertRoutingTable.from_message(update)
    if new.version <= ert.version:
        return ert
    return new


@dataclass
class PendingExpertCall:
    request_id: int
    layer: int
    token_index: int
    expert_id: int
    gate_weight: int
    target_ew: WorkerId
    deadline: int
    embedding: np.ndarray
    attempt: int = 1
    flags: int = 0
    tried: set = field(default_factory=set)


@dataclass
class _CommitMarker:
    request_id: int
    token_index: int
    prompt_len: int
    last_token_id: int


@dataclass
class CkptQueue:
    items: deque = field(default_factory=deque)
    next_seq: int = 1
    last_seq: dict[int, int] = field(default_factory=dict)  # request -> seq of its newest segment

    def push_segment(self, seg: CkptSegment) -> None:
        self.items.append(seg)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class RefeCounters:
    dispatches: int = 0
    replays: int = 0
    reroutes: int = 0
    checkpoint_bytes: int = 0
    checkpoint_segments: int = 0
    commits: int = 0
    gap_ns_used: int = 0
    gap_ns_total: int = 0
    no_route: int = 0


class Refe:
    def __init__(self, owner: WorkerId, net, cfg, *, ert: ExpertRoutingTable,
                 liveness: LivenessState, reply_timeout: int, orchestrator: WorkerId,
                 ckpt: WorkerId | None, on_barrier: Callable[[], None],
                 on_no_route: Callable[[int, int], None], self_heal: bool = True):
        self.owner = owner
        self.net = net
        self.sched = net.sched
        self.cfg = cfg
        self.ert = ert
        self.liveness = liveness
        self.reply_timeout = reply_timeout
        self.orchestrator = orchestrator
        self.ckpt = ckpt
        self.on_barrier = on_barrier
        self.on_no_route = on_no_route
        self.self_heal = self_heal
        self.ready: set[WorkerId] = set()
        self.prober = Prober(owner, net, liveness, self._on_ew_failed)
        self.prober.enabled = self_heal
        self.pending: dict[tuple, PendingExpertCall] = {}
        self.outputs: dict[tuple, np.ndarray] = {}
        self.await_ack: set[WorkerId] = set()
        self.layer: int | None = None
        self.layer_flushed: dict[WorkerId, int] = {}
        self.ckpt_queue = CkptQueue()
        self.remote_base: int | None = None
        self.counters = RefeCounters()
        self._epoch = 0
        self.closed = False
        self.replay_tags: set[int] = set()  # requests whose dispatches count as replay traffic
        self.replay_bytes = 0

    # -- routing ---------------------------------------------------------

    def flush_targets(self) -> list[WorkerId]:
        return sorted(w for w in self.ert.hosts()
                      if w in self.ready and not self.liveness.is_failed(w))

    def begin_layer(self, layer: int) -> None:
        self._epoch += 1
        self.layer = layer
        self.pending.clear()
        self.outputs.clear()
        self.await_ack.clear()
        self.layer_flushed = {}
        self.closed = False

    def expert_io(self, expert_id: int, layer_id: int, token_index: int, request_id: int,
                  gate_weight: int, embedding: np.ndarray) -> PendingExpertCall:
        """Non-blocking dispatch of one token embedding to one logical expert."""
        if layer_id != self.layer:
            raise ValueError(f"dispatch for layer {layer_id} while frontier is {self.layer}")
        target = resolve(self.ert, expert_id, self.liveness, self.ready)
        primary = self.ert.entries[expert_id][0][0]
        if target != primary:
            self.counters.reroutes += 1
        call = PendingExpertCall(request_id, layer_id, token_index, expert_id, gate_weight,
                                 target, self.sched.now + self.reply_timeout, embedding)
        call.tried.add(target)
        self.pending[(request_id, token_index, expert_id)] = call
        self._send_dispatch(call)
        return call

    def _send_dispatch(self, call: PendingExpertCall) -> None:
        msg = TokenDispatch(call.request_id, self.owner, call.layer, call.token_index,
                            call.expert_id, call.gate_weight, call.embedding, call.flags)
        self.counters.dispatches += 1
        if call.request_id in self.replay_tags:
            self.replay_bytes += self.net.size_of(msg) * 2
        self.sched.record("dispatch", str(self.owner), call.request_id, call.token_index,
                          call.layer, call.expert_id, str(call.target_ew), call.flags)
        self.net.send(self.owner, call.target_ew, msg)

    def close_layer(self, counts: dict[WorkerId, int]) -> None:
        """Send LayerFlush to every live EW and arm the reply timeout."""
        self.closed = True
        for ew in self.flush_targets():
            n = counts.get(ew, 0)
            self.layer_flushed[ew] = n
            if n == 0:
                self.await_ack.add(ew)
            self.net.send(self.owner, ew, LayerFlush(self.owner, self.layer, n))
        if self.pending or self.await_ack:
            # silence is measured from each EW's last message, so watch from now
            for ew in sorted(self.waiting_on()):
                self.prober.watch(ew)
            self.sched.after(self.reply_timeout, self._layer_timeout, self._epoch)
        else:
            self._maybe_barrier()

    # -- replies ---------------------------------------------------------

    def on_output(self, src: WorkerId, msg) -> None:
        self.prober.activity(src)
        key = (msg.request_id, msg.token_index, msg.expert_id)
        call = self.pending.get(key)
        if call is None or msg.layer != self.layer:
            return
        del self.pending[key]
        self.outputs[key] = msg.embedding
        self.sched.record("output", str(self.owner), msg.request_id, msg.token_index,
                          msg.layer, msg.expert_id, str(src))
        self._maybe_barrier()

    def on_flush_ack(self, src: WorkerId, msg: FlushAck) -> None:
        self.prober.activity(src)
        if msg.layer == self.layer and src in self.await_ack:
            self.await_ack.discard(src)
            self._maybe_barrier()

    def _maybe_barrier(self) -> None:
        if self.closed and not self.pending and not self.await_ack:
            self.closed = False
            for w in list(self.prober.watched):
                self.prober.unwatch(w)
            self.on_barrier()

    def waiting_on(self) -> set[WorkerId]:
        return {c.target_ew for c in self.pending.values()} | self.await_ack

    # -- self-healing ----------------------------------------------------

    def _layer_timeout(self, epoch: int) -> None:
        if epoch != self._epoch or not self.net.is_alive(self.owner):
            return
        for call in list(self.pending.values()):
            self.on_timeout(call, self.sched.now)
        for ew in list(self.await_ack):
            self.prober.watch(ew)
        if self.pending or self.await_ack:
            self.sched.after(self.reply_timeout, self._layer_timeout, epoch)

    def on_timeout(self, call: PendingExpertCall, now: int) -> str:
        """Start probing the silent target; replay happens once it is declared failed."""
        if now < call.deadline:
            return "wait"
        if not self.self_heal:
            return "wait"
        if self.liveness.is_failed(call.target_ew):
            return self._replay(call)
        self.prober.watch(call.target_ew)
        call.deadline = now + self.reply_timeout
        return "probe"

    def _replay(self, call: PendingExpertCall) -> str:
        try:
            target = resolve(self.ert, call.expert_id, self.liveness, self.ready,
                             exclude=call.tried)
        except NoRouteAvailable:
            self.counters.no_route += 1
            self.pending.pop((call.request_id, call.token_index, call.expert_id), None)
            self.on_no_route(call.request_id, call.expert_id)
            return "escalate"
        call.target_ew = target
        call.tried.add(target)
        call.attempt += 1
        call.flags |= PRIORITY
        call.deadline = self.sched.now + self.reply_timeout
        self.counters.replays += 1
        self._send_dispatch(call)
        return "replay"

    def _on_ew_failed(self, ew: WorkerId) -> None:
        self.sched.record("aw_detect", str(self.owner), str(ew))
        self.net.send(self.owner, self.orchestrator, FailureReport(self.owner, ew))
        self.ready.discard(ew)
        self.await_ack.discard(ew)
        for call in sorted(self.pending.values(), key=lambda c: (c.request_id, c.token_index, c.expert_id)):
            if call.target_ew == ew:
                self._replay(call)
        self._maybe_barrier()

    def drop_request(self, request_id: int) -> None:
        for key in [k for k in self.pending if k[0] == request_id]:
            del self.pending[key]
        self._maybe_barrier()

    def apply_update(self, msg: ErtUpdate) -> None:
        self.ert = apply_ert_update(self.ert, msg)
        self.rehome()

    def mark_ready(self, ew: WorkerId) -> None:
        self.ready.add(ew)
        self.rehome()

    def rehome(self) -> None:
        """Move pending calls whose target left the table (no local detection)."""
        if self.layer is None:
            return
        hosts = self.ert.hosts()
        moved: dict[WorkerId, int] = {}
        for call in sorted(self.pending.values(), key=lambda c: (c.request_id, c.token_index, c.expert_id)):
            if call.target_ew in hosts:
                continue
            try:
                target = resolve(self.ert, call.expert_id, self.liveness, self.ready)
            except NoRouteAvailable:
                continue
            call.target_ew = target
            call.attempt += 1
            self.counters.replays += 1
            self._send_dispatch(call)
            moved[target] = moved.get(target, 0) + 1
        for ew in list(self.await_ack):
            if ew not in hosts:
                self.await_ack.discard(ew)
        for ew, n in sorted(moved.items()):
            if ew not in self.layer_flushed:
                self.layer_flushed[ew] = n
                self.net.send(self.owner, ew, LayerFlush(self.owner, self.layer, n))
        self._maybe_barrier()

    # -- checkpointing ---------------------------------------------------

    def async_update(self, seg: KVSegment, offset: int) -> int:
        q = self.ckpt_queue
        seq = q.next_seq
        q.next_seq += 1
        q.push_segment(CkptSegment(seq, seg.request_id, seg.token_index, seg.layer,
                                   self.remote_base + offset, seg.payload))
        q.last_seq[seg.request_id] = seq
        return seq

    def queue_commit(self, request_id: int, token_index: int, prompt_len: int,
                     last_token_id: int) -> None:
        self.ckpt_queue.items.append(_CommitMarker(request_id, token_index, prompt_len,
                                                   last_token_id))

    def drain_ckpt_queue(self, now: int, gap_end: int) -> int:
        """Send queued segments that fit before ``gap_end``; commits follow their segments."""
        if self.ckpt is None or self.remote_base is None:
            return 0
        q = self.ckpt_queue
        ch = self.net.channel(self.owner, self.ckpt, "data")
        self.counters.gap_ns_total += max(0, gap_end - now)
        sent = 0
        start_busy = max(now, ch.busy_until)
        while q.items:
            item = q.items[0]
            if isinstance(item, _CommitMarker):
                q.items.popleft()
                seq = q.last_seq.get(item.request_id, 0)
                msg = Commit(item.request_id, item.token_index, seq, item.prompt_len,
                             item.last_token_id)
                self.sched.at(max(now, ch.busy_until), self._send_commit, msg)
                continue
            size = self.net.size_of(item)
            ser = 0 if ch.rate is None else math.ceil(size / ch.rate)
            if max(now, ch.busy_until) + ser > gap_end:
                break
            q.items.popleft()
            self.net.send(self.owner, self.ckpt, item)
            self.counters.checkpoint_bytes += size
            self.counters.checkpoint_segments += 1
            sent += 1
        self.counters.gap_ns_used += max(0, ch.busy_until - start_busy) if sent else 0
        return sent

    def _send_commit(self, msg: Commit) -> None:
        if not self.net.is_alive(self.owner):
            return
        self.counters.commits += 1
        self.sched.record("commit", str(self.owner), msg.request_id, msg.token_index, msg.seq)
        self.net.send(self.owner, self.ckpt, msg)
