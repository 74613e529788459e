import numpy as np
import pytest

from resilmoe.core import ModelConfig
from resilmoe.expert_worker import BatchPolicy, ExpertWorker, NotHosted, UnknownExpert
from resilmoe.harness.scheduler import Scheduler
from resilmoe.timing import Timing
from resilmoe.wire import (
    PRIMARY, PRIORITY, SHADOW, ExpertOutput, FailureReport, FlushAck, Kind, LayerFlush,
    Network, Probe, ProbeAck, TokenDispatch, WorkerId,
)

EW = WorkerId(Kind.EW, 0)
ORCH = WorkerId(Kind.ORCH, 0)
AWS = [WorkerId(Kind.AW, i) for i in range(3)]


class Harness:
    def __init__(self, expected=AWS[:2], hosted={0: PRIMARY, 1: PRIMARY, 2: SHADOW}, min_batch=4):
        self.s = Scheduler()
        self.net = Network(self.s, 1000)
        self.cfg = ModelConfig(num_layers=32, embed_dim=4, min_expert_batch=min_batch)
        self.inbox = {w: [] for w in AWS + [ORCH]}
        self.ew = ExpertWorker(EW, self.cfg, Timing(), self.net, hosted=hosted,
                               orchestrator=ORCH, expected_aws=expected)
        self.net.attach(EW, self.ew.handle)
        for w in AWS + [ORCH]:
            self.net.attach(w, lambda src, m, c, w=w: self.receive(w, src, m))
            self.net.connect(EW, w)

    def receive(self, w, src, m):
        if isinstance(m, Probe):
            self.net.send(w, src, ProbeAck(m.nonce))
        self.inbox[w].append(m)

    def token(self, aw, layer, t, expert=0, flags=0, rid=1):
        return TokenDispatch(rid, aw, layer, t, expert, 1, np.arange(4, dtype=np.int64), flags)

    def send(self, aw, msg):
        self.net.send(aw, EW, msg)

    def outputs(self, aw):
        return [m for m in self.inbox[aw] if isinstance(m, ExpertOutput)]

    def acks(self, aw):
        return [m.layer for m in self.inbox[aw] if isinstance(m, FlushAck)]

    def run(self, dt=5_000_000):
        self.s.run(until=self.s.now + dt)


def test_waits_for_every_expected_aw():
    h = Harness()
    h.send(AWS[0], h.token(AWS[0], 1, 1))
    h.send(AWS[0], LayerFlush(AWS[0], 1, 1))
    h.run()
    assert h.ew.counters.batches == 0
    h.send(AWS[1], LayerFlush(AWS[1], 1, 0))
    h.run()
    assert h.ew.launch_log[0][1:4] == (0, 1, "all_healthy")
    assert len(h.outputs(AWS[0])) == 1
    assert h.acks(AWS[1]) == [1] and h.acks(AWS[0]) == []
    assert h.ew.frontier == 2


def test_min_batch_launches_early():
    h = Harness()
    for t in range(4):
        h.send(AWS[0], h.token(AWS[0], 1, t))
    h.run()
    assert [l[3] for l in h.ew.launch_log] == ["min_batch"]
    assert h.ew.frontier == 1


def test_priority_tokens_go_first():
    h = Harness(min_batch=8)
    h.send(AWS[0], h.token(AWS[0], 1, 1))
    h.send(AWS[0], h.token(AWS[0], 1, 2, flags=PRIORITY))
    h.send(AWS[0], LayerFlush(AWS[0], 1, 2))
    h.send(AWS[1], LayerFlush(AWS[1], 1, 0))
    h.run()
    assert [m.token_index for m in h.outputs(AWS[0])] == [2, 1]


def _advance(h, aw, upto):
    for layer in range(h.ew.frontier or 1, upto):
        h.send(aw, LayerFlush(aw, layer, 0))
    h.run()


def test_new_aw_layer_one_tokens_wait_for_wrap():
    h = Harness(expected=AWS[:1])
    _advance(h, AWS[0], 17)
    assert h.ew.frontier == 17
    h.send(AWS[2], h.token(AWS[2], 1, 1))
    h.send(AWS[2], LayerFlush(AWS[2], 1, 1))
    h.run()
    assert [d.layer for d in h.ew.state.early_buffer] == [1]
    assert h.ew.counters.batches == 0
    _advance(h, AWS[0], 33)
    assert h.ew.frontier == 1
    assert h.ew.counters.batches == 0
    h.send(AWS[0], h.token(AWS[0], 1, 9))
    h.send(AWS[0], LayerFlush(AWS[0], 1, 1))
    h.run()
    launches = [l for l in h.ew.launch_log if l[2] == 1]
    assert launches and launches[0][3] == "all_healthy"
    assert set(launches[0][4]) == {str(AWS[0]), str(AWS[2])}
    assert AWS[2] in h.ew.attached
    assert not h.ew.liveness.is_failed(AWS[2])


def test_late_token_runs_solo():
    h = Harness(expected=AWS[:1])
    _advance(h, AWS[0], 5)
    h.send(AWS[0], h.token(AWS[0], 3, 1, flags=PRIORITY))
    h.run()
    assert h.ew.launch_log[-1][2:4] == (3, "late")
    assert h.ew.counters.late_tokens == 1
    assert len(h.outputs(AWS[0])) == 1


def test_batches_never_mix_layers():
    h = Harness(expected=AWS[:2], min_batch=2)
    rng = np.random.default_rng(0)
    for _ in range(200):
        aw = AWS[int(rng.integers(0, 2))]
        f = h.ew.frontier or 1
        if rng.random() < 0.3:
            h.send(aw, LayerFlush(aw, f, 0))
        else:
            h.send(aw, h.token(aw, f, int(rng.integers(1000)), expert=int(rng.integers(0, 2))))
        h.run(100_000)
    for _, _, layer, _, _ in h.ew.launch_log:
        assert 1 <= layer <= 32


def test_adopt_frontier_is_set_once():
    h = Harness()
    h.ew.adopt_frontier(h.token(AWS[0], 9, 1))
    h.ew.adopt_frontier(h.token(AWS[0], 3, 1))
    assert h.ew.frontier == 9


def test_shadow_activation():
    h = Harness()
    h.send(AWS[0], h.token(AWS[0], 1, 1, expert=2))
    h.run()
    assert h.ew.state.hosted[2].active
    assert h.ew.counters.shadow_activations == 1
    h.ew.activate_shadow(2)
    assert h.ew.counters.shadow_activations == 1
    with pytest.raises(NotHosted):
        h.ew.activate_shadow(0)


def test_unknown_expert():
    h = Harness()
    with pytest.raises(UnknownExpert):
        h.ew.enqueue_token(h.token(AWS[0], 1, 1, expert=7))
    h.send(AWS[0], h.token(AWS[0], 1, 1, expert=7))
    h.run()
    assert h.ew.counters.nacks == 1


def test_failed_aw_is_dropped_from_the_barrier():
    h = Harness()
    h.send(AWS[0], h.token(AWS[0], 1, 1))
    h.send(AWS[0], LayerFlush(AWS[0], 1, 1))
    h.net.kill(AWS[1])
    h.run(200_000_000)
    assert h.ew.frontier == 2
    assert FailureReport(EW, AWS[1]) in h.inbox[ORCH]
    assert h.ew.counters.omitted_slots == 1


def test_batch_policy():
    p = BatchPolicy(min_batch=8, knee_low=256, base=100, per_token=2)
    assert p.exec_time(1) == p.exec_time(256) == 100
    assert p.exec_time(300) == 188
    with pytest.raises(ValueError):
        BatchPolicy(min_batch=0)
