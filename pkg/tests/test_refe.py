import numpy as np
import pytest

from resilmoe.core import KVSegment, ModelConfig
from resilmoe.harness.scheduler import Scheduler
from resilmoe.refe import (
    ExpertRoutingTable, NoRouteAvailable, Refe, apply_ert_update, resolve,
)
from resilmoe.wire import (
    PRIMARY, PRIORITY, SHADOW, CkptSegment, Commit, ExpertOutput, FailureReport,
    FlushAck, Kind, LayerFlush, LivenessState, Network, TokenDispatch, WorkerId,
)

AW = WorkerId(Kind.AW, 0)
EW = [WorkerId(Kind.EW, i) for i in range(3)]
ORCH = WorkerId(Kind.ORCH, 0)
CKPT = WorkerId(Kind.CKPT, 0)
ERT = ExpertRoutingTable(1, {0: ((EW[0], PRIMARY), (EW[1], SHADOW)),
                             1: ((EW[1], PRIMARY), (EW[2], SHADOW))})


def test_resolve_prefers_primary_then_shadow():
    lv = LivenessState()
    assert resolve(ERT, 0, lv) == EW[0]
    lv.register(EW[0], 0)
    lv.peers[EW[0]].status = "failed"
    assert resolve(ERT, 0, lv) == EW[1]
    assert resolve(ERT, 0, LivenessState(), exclude={EW[0]}) == EW[1]
    with pytest.raises(NoRouteAvailable):
        resolve(ERT, 0, lv, exclude={EW[1]})
    with pytest.raises(NoRouteAvailable):
        resolve(ERT, 7, lv)


def test_ready_set_filters_hosts():
    assert resolve(ERT, 0, LivenessState(), ready={EW[1]}) == EW[1]


def test_version_guard():
    newer = ExpertRoutingTable(2, {0: ((EW[1], PRIMARY),)})
    assert apply_ert_update(ERT, newer) is newer
    assert apply_ert_update(newer, ERT) is newer
    assert apply_ert_update(newer, newer.to_message()) is newer
    assert ExpertRoutingTable.from_message(ERT.to_message()) == ERT


def test_table_invariants():
    with pytest.raises(ValueError):
        ExpertRoutingTable(1, {0: ()})
    with pytest.raises(ValueError):
        ExpertRoutingTable(1, {0: ((EW[0], PRIMARY), (EW[0], SHADOW))})


class Harness:
    def __init__(self, ckpt_rate=None):
        self.s = Scheduler()
        self.net = Network(self.s, 1000)
        self.inbox = {w: [] for w in EW + [ORCH, CKPT]}
        for w in EW + [ORCH, CKPT]:
            self.net.attach(w, lambda src, m, c, w=w: self.inbox[w].append(m))
            self.net.connect(AW, w, data_rate=ckpt_rate if w == CKPT else None)
        self.net.attach(AW, self.deliver)
        self.barriers = []
        self.no_route = []
        self.refe = Refe(AW, self.net, ModelConfig(embed_dim=4), ert=ERT,
                         liveness=LivenessState(probe_interval=5000, retry_limit=2,
                                                probe_deadline=4000),
                         reply_timeout=10_000, orchestrator=ORCH, ckpt=CKPT,
                         on_barrier=lambda: self.barriers.append(self.s.now),
                         on_no_route=lambda r, e: self.no_route.append((r, e)))
        self.refe.ready = set(EW)

    def deliver(self, src, m, c):
        if isinstance(m, ExpertOutput):
            self.refe.on_output(src, m)
        elif isinstance(m, FlushAck):
            self.refe.on_flush_ack(src, m)

    def reply(self, ew, dispatch):
        self.net.send(ew, AW, ExpertOutput(dispatch.request_id, AW, dispatch.layer,
                                           dispatch.token_index, dispatch.expert_id,
                                           dispatch.gate_weight, dispatch.embedding))

    def dispatches(self, w):
        return [m for m in self.inbox[w] if isinstance(m, TokenDispatch)]


def test_barrier_waits_for_outputs_and_acks():
    h = Harness()
    r = h.refe
    r.begin_layer(1)
    r.expert_io(0, 1, 1, 7, 100, np.zeros(4, dtype=np.int64))
    r.close_layer({EW[0]: 1})
    h.s.run(until=2000)
    flushes = {w: [m for m in h.inbox[w] if isinstance(m, LayerFlush)] for w in EW}
    assert [f.n_tokens for f in flushes[EW[0]]] == [1]
    assert [f.n_tokens for f in flushes[EW[2]]] == [0]
    h.reply(EW[0], h.dispatches(EW[0])[0])
    h.s.run(until=4000)
    assert h.barriers == []
    h.net.send(EW[1], AW, FlushAck(EW[1], 1))
    h.net.send(EW[2], AW, FlushAck(EW[2], 1))
    h.s.run(until=6000)
    assert len(h.barriers) == 1


def test_wrong_layer_dispatch_rejected():
    h = Harness()
    h.refe.begin_layer(2)
    with pytest.raises(ValueError):
        h.refe.expert_io(0, 3, 1, 1, 1, np.zeros(4, dtype=np.int64))


def test_silent_ew_is_replayed_to_shadow_with_priority():
    h = Harness()
    r = h.refe
    r.begin_layer(1)
    r.expert_io(0, 1, 1, 7, 100, np.zeros(4, dtype=np.int64))
    h.net.kill(EW[0])
    r.close_layer({EW[0]: 1})
    for w in EW[1:]:
        h.net.send(w, AW, FlushAck(w, 1))
    h.s.run(until=100_000)
    replayed = h.dispatches(EW[1])
    assert len(replayed) == 1 and replayed[0].flags & PRIORITY
    assert r.liveness.is_failed(EW[0])
    assert FailureReport(AW, EW[0]) in h.inbox[ORCH]
    h.reply(EW[1], replayed[0])
    h.s.run(until=200_000)
    assert len(h.barriers) == 1
    assert r.counters.replays == 1


def test_no_route_escalates():
    h = Harness()
    r = h.refe
    r.ert = ExpertRoutingTable(1, {0: ((EW[0], PRIMARY),)})
    r.ready = {EW[0]}
    r.begin_layer(1)
    r.expert_io(0, 1, 1, 7, 100, np.zeros(4, dtype=np.int64))
    h.net.kill(EW[0])
    r.close_layer({EW[0]: 1})
    h.s.run(until=200_000)
    assert h.no_route == [(7, 0)]


def test_checkpoint_drain_respects_gap_and_orders_commit():
    h = Harness(ckpt_rate=1.0)
    r = h.refe
    r.remote_base = 1 << 20
    for t in range(4):
        r.async_update(KVSegment(5, t + 1, 1, b"x" * 100), offset=t * 4096)
    r.queue_commit(5, 0, 4, 42)
    sent = r.drain_ckpt_queue(0, 250)
    assert sent == 2
    h.s.run(until=10_000)
    assert [m.seq for m in h.inbox[CKPT]] == [1, 2]
    assert h.inbox[CKPT][0].offset == (1 << 20)
    sent = r.drain_ckpt_queue(h.s.now, h.s.now + 1000)
    assert sent == 2
    h.s.run(until=20_000)
    segs = [m for m in h.inbox[CKPT] if isinstance(m, CkptSegment)]
    commits = [m for m in h.inbox[CKPT] if isinstance(m, Commit)]
    assert [s.seq for s in segs] == [1, 2, 3, 4]
    assert commits == [Commit(5, 0, 4, 4, 42)]
    assert h.inbox[CKPT][-1] == commits[0]


def test_no_drain_before_registration():
    h = Harness(ckpt_rate=1.0)
    h.refe.remote_base = 0
    h.refe.async_update(KVSegment(5, 1, 1, b"x"), offset=0)
    h.refe.remote_base = None
    assert h.refe.drain_ckpt_queue(0, 10**9) == 0
    assert len(h.refe.ckpt_queue) == 1
