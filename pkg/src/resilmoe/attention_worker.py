"""Stateful attention worker.

Every AW sweeps layers 1..L forever in lockstep with the EWs: attention for
all resident requests, one dispatch per (token, expert), a LayerFlush to each
EW, then a barrier until every output (or flush ack) is back. Requests join
only at the start of a sweep. Idle AWs still sweep so EW layer launches never
wait on them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    KVSegment, ModelConfig, Request, RequestState, aggregate, attention_forward,
    embed_token, emit_token, segment_size, select_experts,
)
from .refe import ExpertRoutingTable, NoRouteAvailable, Refe
from .timing import Timing
from .wire import (
    CkptInitReq, CkptInitResp, CkptSegment, ErtUpdate, ExpertOutput, FlushAck,
    LivenessState, Probe, ProbeAck, ReadySignal, RequestDone, RestoreDone,
    RestorePlan, RestoreRegion, SubmitRequest, WorkerId,
)

logger = logging.getLogger(__name__)

GIB = 1 << 30

# SubmitRequest.restoring values
FRESH = 0
FROM_CHECKPOINT = 1
REPLAY = 2


class CapacityExceeded(Exception):
    pass


class StoreUnavailable(Exception):
    pass


@dataclass
class AwState:
    worker_id: WorkerId
    active_requests: dict[int, RequestState] = field(default_factory=dict)
    compute_times: tuple[int, int] = (0, 0)
    kv_region: tuple[int, int] = (0, 0)  # (remote base, size)
    slots: dict[int, int] = field(default_factory=dict)  # request -> slot offset

    def frontier(self, request_id: int) -> int:
        return self.active_requests[request_id].frontier


class SlotAllocator:
    """Fixed-size per-request regions, lowest free slot first."""

    def __init__(self, region_size: int, quota: int):
        if quota <= 0 or region_size < quota:
            raise ValueError("region must hold at least one request quota")
        self.quota = quota
        self.n = region_size // quota
        self.free = list(range(self.n))

    def take(self) -> int:
        if not self.free:
            raise CapacityExceeded(f"all {self.n} request slots in use")
        self.free.sort()
        return self.free.pop(0) * self.quota

    def give(self, offset: int) -> None:
        self.free.append(offset // self.quota)


class AttentionWorker:
    def __init__(self, wid: WorkerId, cfg: ModelConfig, timing: Timing, net, *,
                 ert: ExpertRoutingTable, orchestrator: WorkerId, ckpt: WorkerId | None,
                 sink, ckpt_mode: str = "incremental", pause_interval: int = 0,
                 kv_region_bytes: int = 8 * GIB, max_seq_len: int = 2048,
                 self_heal: bool = True):
        if ckpt_mode not in ("off", "incremental", "pause_resume"):
            raise ValueError(f"unknown checkpoint mode {ckpt_mode!r}")
        self.wid = wid
        self.cfg = cfg
        self.timing = timing
        self.net = net
        self.sched = net.sched
        self.sink = sink
        self.orchestrator = orchestrator
        self.ckpt = ckpt
        self.ckpt_mode = ckpt_mode
        self.pause_interval = pause_interval
        self.C = segment_size(cfg)
        self.state = AwState(wid, compute_times=(timing.t_pre, timing.t_dec),
                             kv_region=(0, kv_region_bytes))
        self.slots = SlotAllocator(kv_region_bytes, max_seq_len * cfg.num_layers * self.C)
        liveness = LivenessState(timing.probe_interval, timing.retry_limit, timing.deadline)
        self.refe = Refe(wid, net, cfg, ert=ert, liveness=liveness,
                         reply_timeout=timing.reply_timeout, orchestrator=orchestrator,
                         ckpt=ckpt if ckpt_mode == "incremental" else None,
                         on_barrier=self._finish_layer, on_no_route=self._no_route,
                         self_heal=self_heal)
        self.admit_queue: list[RequestState] = []
        self.restoring: dict[int, RequestState] = {}
        self.restore_info: dict[int, tuple[RestorePlan, int]] = {}
        self.early_plans: dict[int, RestorePlan] = {}
        self.done_early: set[int] = set()
        self.replay_upto: dict[int, int] = {}
        self.sweep: list[RequestState] = []
        self.hidden: dict[tuple[int, int], np.ndarray] = {}
        self.gates: dict[tuple[int, int], list[tuple[int, int]]] = {}
        self.layer = 0
        self.sweeps_since_pause = 0
        self.replayed_gpu = 0.0
        self.tokens_emitted = 0
        self.failed_requests: list[int] = []
        self.running = False
        self._awaiting_region = False

    # -- lifecycle -------------------------------------------------------

    def start(self, await_region: bool = False) -> None:
        """Begin sweeping; a joining AW first waits for its store region."""
        self.running = True
        if self.ckpt is not None and self.ckpt_mode != "off":
            self.register_kv_region()
            if await_region:
                self._awaiting_region = True
                return
        self._start_layer(1)

    def register_kv_region(self) -> None:
        if not self.net.connected(self.wid, self.ckpt):
            raise StoreUnavailable(f"{self.wid} has no channel to the store")
        self.net.send(self.wid, self.ckpt, CkptInitReq(self.wid, self.state.kv_region[1],
                                                        self.slots.quota))

    def offset(self, request_id: int, token_index: int, layer: int) -> int:
        base = self.state.slots[request_id]
        return base + ((token_index - 1) * self.cfg.num_layers + (layer - 1)) * self.C

    def alive(self) -> bool:
        return self.net.is_alive(self.wid)

    # -- message handling ------------------------------------------------

    def handle(self, src: WorkerId, msg, cls: str) -> None:
        if isinstance(msg, ExpertOutput):
            self.refe.on_output(src, msg)
        elif isinstance(msg, FlushAck):
            self.refe.on_flush_ack(src, msg)
        elif isinstance(msg, Probe):
            self.net.send(self.wid, src, ProbeAck(msg.nonce))
        elif isinstance(msg, ProbeAck):
            self.refe.prober.activity(src)
        elif isinstance(msg, SubmitRequest):
            self.on_submit(msg)
        elif isinstance(msg, ErtUpdate):
            self.refe.apply_update(msg)
        elif isinstance(msg, ReadySignal):
            self.refe.mark_ready(msg.worker_id)
        elif isinstance(msg, CkptInitResp):
            self.refe.remote_base = msg.remote_base
            self.state.kv_region = (msg.remote_base, self.state.kv_region[1])
            if self._awaiting_region:
                self._awaiting_region = False
                self._start_layer(1)
        elif isinstance(msg, RestorePlan):
            self.on_restore_plan(src, msg)
        elif isinstance(msg, CkptSegment):
            self.on_restore_segment(msg)
        elif isinstance(msg, RestoreDone):
            self.on_restore_done(msg)

    def on_submit(self, msg: SubmitRequest) -> None:
        req = Request(msg.request_id, tuple(msg.prompt_token_ids), msg.max_new_tokens)
        st = RequestState(req)
        if msg.replay_upto:
            self.replay_upto[req.id] = msg.replay_upto
        if msg.restoring == FROM_CHECKPOINT:
            self.restoring[req.id] = st
            plan = self.early_plans.pop(req.id, None)
            if plan is not None:
                self.on_restore_plan(self.ckpt, plan)
            return
        if msg.replay_upto:
            self.refe.replay_tags.add(req.id)
        self.admit_queue.append(st)

    # -- restoration -----------------------------------------------------

    def accept_restored_request(self, plan: RestorePlan) -> int:
        st = self.restoring[plan.request_id]
        if plan.total_bytes > self.slots.quota:
            raise CapacityExceeded(f"request {plan.request_id} needs {plan.total_bytes} bytes")
        off = self.slots.take()
        self.state.slots[plan.request_id] = off
        self.restore_info[plan.request_id] = (plan, off)
        st.phase = "restoring"
        return off

    def on_restore_plan(self, src: WorkerId, plan: RestorePlan) -> None:
        if plan.request_id not in self.restoring:
            self.early_plans[plan.request_id] = plan
            return
        try:
            off = self.accept_restored_request(plan)
        except CapacityExceeded as e:
            logger.warning("%s: %s", self.wid, e)
            return
        self.net.send(self.wid, src, RestoreRegion(plan.request_id, off))

    def on_restore_segment(self, seg: CkptSegment) -> None:
        st = self.restoring.get(seg.request_id)
        if st is None:
            return
        if seg.offset != self.offset(seg.request_id, seg.token_index, seg.layer):
            raise ValueError(f"restored segment for request {seg.request_id} at wrong offset")
        st.kv[(seg.layer, seg.token_index)] = KVSegment(seg.request_id, seg.token_index,
                                                        seg.layer, seg.payload)
        if seg.request_id in self.done_early and self._restore_complete(st):
            self.done_early.discard(seg.request_id)
            self._finish_restore(seg.request_id)

    def _restore_complete(self, st: RequestState) -> bool:
        plan, _ = self.restore_info[st.request_id]
        return len(st.kv) == (st.request.prompt_len + plan.committed_token_index) * self.cfg.num_layers

    def on_restore_done(self, msg: RestoreDone) -> None:
        st = self.restoring.get(msg.request_id)
        if st is None:
            return
        # the marker rides the control channel and may overtake segments
        if not self._restore_complete(st):
            self.done_early.add(msg.request_id)
            return
        self._finish_restore(msg.request_id)

    def _finish_restore(self, rid: int) -> None:
        st = self.restoring.pop(rid)
        plan, _ = self.restore_info.pop(rid)
        i = plan.committed_token_index
        st.rebuild_chains(self.cfg.num_layers, st.request.prompt_len + i)
        st.next_token_index = i + 1
        st.phase = "decoding"
        st.input_token = plan.last_token_id
        self.sink.restored(rid, self.sched.now, "checkpoint")
        if self.replay_upto.get(rid, 0) > i:
            self.refe.replay_tags.add(rid)
        if st.next_token_index > st.request.max_new_tokens:
            self._complete(st)
            return
        self.admit_queue.append(st)

    # -- sweep loop ------------------------------------------------------

    def _start_layer(self, layer: int, resumed: bool = False) -> None:
        if not self.alive():
            return
        if layer == 1:
            if not resumed and self._maybe_pause():
                return
            self._begin_sweep()
        self.layer = layer
        self.refe.begin_layer(layer)
        for st in self.sweep:
            st.frontier = layer
        prefill = any(st.phase == "prefill" for st in self.sweep)
        attn = self.timing.attn_prefill if prefill else self.timing.attn_decode
        if self.ckpt_mode == "incremental":
            self.refe.drain_ckpt_queue(self.sched.now, self.sched.now + attn)
        self.sched.after(attn, self._end_attention, layer)

    def _maybe_pause(self) -> bool:
        if self.ckpt_mode != "pause_resume" or self.pause_interval <= 0:
            return False
        if self.sweeps_since_pause < self.pause_interval:
            return False
        self.sweeps_since_pause = 0
        dur = int(-(-self.state.kv_region[1] // self.timing.ckpt_rate))
        self.sched.record("pause", str(self.wid), dur)
        self.sched.after(dur, self._start_layer, 1, True)
        return True

    def _begin_sweep(self) -> None:
        self.sweep = [st for st in self.sweep if not st.done]
        for st in self.admit_queue:
            if st.request_id not in self.state.slots:
                try:
                    self.state.slots[st.request_id] = self.slots.take()
                except CapacityExceeded:
                    continue
            self.state.active_requests[st.request_id] = st
            self.sweep.append(st)
        self.admit_queue = [st for st in self.admit_queue if st.request_id not in self.state.active_requests]
        self.sweep.sort(key=lambda s: s.request_id)
        if any(st.phase == "decoding" for st in self.sweep):
            self.sweeps_since_pause += 1

    def _positions(self, st: RequestState) -> range:
        if st.phase == "prefill":
            return range(1, st.request.prompt_len + 1)
        return range(st.position, st.position + 1)

    def _input(self, st: RequestState, pos: int, layer: int) -> np.ndarray:
        if layer > 1:
            return self.hidden[(st.request_id, pos)]
        if st.phase == "prefill":
            return embed_token(self.cfg, st.request.prompt_token_ids[pos - 1])
        return embed_token(self.cfg, st.input_token)

    def _end_attention(self, layer: int) -> None:
        if not self.alive():
            return
        counts: dict[WorkerId, int] = {}
        for st in list(self.sweep):
            if st.done:
                continue
            try:
                self._attend(st, layer, counts)
            except NoRouteAvailable:
                self._no_route(st.request_id, -1)
        self.refe.close_layer(counts)

    def _attend(self, st: RequestState, layer: int, counts: dict) -> None:
        rid = st.request_id
        replaying = rid in self.refe.replay_tags
        if replaying:
            self.replayed_gpu += self.timing.g_pre if st.phase == "prefill" else self.timing.g_dec
        for pos in self._positions(st):
            x = self._input(st, pos, layer)
            out, seg = attention_forward(self.cfg, st, layer, x, position=pos)
            if self.ckpt_mode == "incremental":
                self.refe.async_update(seg, self.offset(rid, pos, layer))
            gates = select_experts(self.cfg, rid, pos, layer)
            self.gates[(rid, pos)] = gates
            for e, w in gates:
                call = self.refe.expert_io(e, layer, pos, rid, w, out)
                counts[call.target_ew] = counts.get(call.target_ew, 0) + 1

    def _finish_layer(self) -> None:
        layer = self.layer
        outs = self.refe.outputs
        for st in self.sweep:
            if st.done:
                continue
            rid = st.request_id
            for pos in self._positions(st):
                gates = self.gates.pop((rid, pos))
                self.hidden[(rid, pos)] = aggregate([outs[(rid, pos, e)] for e, _ in gates],
                                                    [w for _, w in gates])
        if layer == self.cfg.num_layers:
            for st in self.sweep:
                if not st.done:
                    self._end_sweep(st)
        self.sched.record("layer_done", str(self.wid), layer)
        self._start_layer(layer % self.cfg.num_layers + 1)

    def _end_sweep(self, st: RequestState) -> None:
        rid = st.request_id
        P = st.request.prompt_len
        if st.phase == "prefill":
            tok = emit_token(self.hidden[(rid, P)])
            for pos in range(1, P + 1):
                del self.hidden[(rid, pos)]
            st.phase = "decoding"
            st.next_token_index = 1
            st.input_token = tok
            self._commit(st, 0, tok)
            return
        i = st.next_token_index
        tok = emit_token(self.hidden.pop((rid, st.position)))
        st.emitted.append(tok)
        st.input_token = tok
        st.next_token_index = i + 1
        self.tokens_emitted += 1
        self.sched.record("emit", str(self.wid), rid, i, tok)
        self.sink.emit(self.wid, rid, i, tok, self.sched.now)
        self._commit(st, i, tok)
        upto = self.replay_upto.get(rid, 0)
        if upto and i >= upto:
            self.refe.replay_tags.discard(rid)
            if i == upto and rid not in self.sink.restore_times:
                self.sink.restored(rid, self.sched.now, "replay")
        if st.next_token_index > st.request.max_new_tokens:
            self._complete(st)

    def _commit(self, st: RequestState, i: int, tok: int) -> None:
        if self.ckpt_mode == "incremental":
            self.refe.queue_commit(st.request_id, i, st.request.prompt_len, tok)

    def _complete(self, st: RequestState) -> None:
        st.phase = "done"
        st.kv.clear()
        st.chains.clear()
        rid = st.request_id
        self.state.active_requests.pop(rid, None)
        off = self.state.slots.pop(rid, None)
        if off is not None:
            self.slots.give(off)
        self.replay_upto.pop(rid, None)
        self.refe.replay_tags.discard(rid)
        self.net.send(self.wid, self.orchestrator, RequestDone(rid, self.wid))

    def _no_route(self, request_id: int, expert_id: int) -> None:
        st = self.state.active_requests.get(request_id)
        if st is None or st.done:
            return
        logger.warning("%s: request %d failed, no route for expert %d", self.wid, request_id, expert_id)
        self.failed_requests.append(request_id)
        self.refe.drop_request(request_id)
        for key in [k for k in self.gates if k[0] == request_id]:
            del self.gates[key]
        self._complete(st)
