import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resilmoe.harness.scheduler import Scheduler
from resilmoe.wire import (
    TAGS, Action, CkptSegment, Commit, ErtUpdate, ExpertOutput, FlushAck, Kind, LayerFlush,
    LivenessState, MalformedFrame, Network, Probe, Prober, ProbeAck, SubmitRequest,
    TokenDispatch, WorkerId, channel_class, check_silence, decode, encode, note_activity,
    record_probe,
)

wids = st.builds(WorkerId, st.sampled_from([Kind.AW, Kind.EW]), st.integers(0, 2**16 - 1),
                 st.integers(0, 2**16 - 1))
u8, u16, u32, u64 = (st.integers(0, 2**b - 1) for b in (8, 16, 32, 64))
embs = st.lists(st.integers(-2**63, 2**63 - 1), max_size=16).map(
    lambda xs: np.array(xs, dtype=np.int64))


def _strategy(cls):
    from resilmoe import wire
    kw = {}
    for name, codec in wire._LAYOUTS[cls]:
        kw[name] = {
            "u8": u8, "u16": u16, "u32": u32, "u64": u64, "wid": wids,
            "bytes": st.binary(max_size=64), "emb": embs,
            "ints": st.lists(u32, max_size=20).map(tuple),
            "entries": st.lists(st.tuples(u16, st.lists(st.tuples(wids, st.integers(0, 1)),
                                                        max_size=3).map(tuple)),
                                max_size=8).map(tuple),
        }[codec]
    return st.builds(cls, **kw)


any_message = st.one_of([_strategy(c) for c in TAGS])


@given(any_message)
@settings(max_examples=2000)
def test_round_trip(msg):
    assert decode(encode(msg)) == msg


@given(any_message, st.data())
@settings(max_examples=500)
def test_truncation_rejected(msg, data):
    frame = encode(msg)
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(MalformedFrame):
        decode(frame[:cut])


def test_trailing_bytes_and_unknown_tag():
    frame = encode(Probe(7))
    with pytest.raises(MalformedFrame):
        decode(frame + b"\0")
    with pytest.raises(MalformedFrame):
        decode(bytes([250]) + frame[1:])
    with pytest.raises(MalformedFrame):
        decode(b"")


def test_bad_worker_kind():
    frame = bytearray(encode(FlushAck(WorkerId(Kind.EW, 1), 3)))
    frame[1] = 99
    with pytest.raises(MalformedFrame):
        decode(bytes(frame))


def test_fuzz_ten_thousand_random_frames():
    """Random byte strings either decode to a message that re-encodes identically or raise."""
    rng = np.random.default_rng(1)
    tags = list(TAGS.values())
    for _ in range(10_000):
        n = int(rng.integers(1, 80))
        data = bytes([int(rng.choice(tags))]) + rng.bytes(n)
        try:
            msg = decode(data)
        except MalformedFrame:
            continue
        assert encode(msg) == data


def test_ten_thousand_random_messages_round_trip():
    rng = np.random.default_rng(2)
    aw = WorkerId(Kind.AW, 3, 1)
    for k in range(10_000):
        emb = rng.integers(-2**40, 2**40, size=int(rng.integers(0, 12)), dtype=np.int64)
        msgs = (
            TokenDispatch(int(rng.integers(2**62)), aw, int(rng.integers(1, 33)),
                          int(rng.integers(2**31)), int(rng.integers(8)),
                          int(rng.integers(2**16)), emb, int(rng.integers(3))),
            CkptSegment(k, int(rng.integers(2**40)), int(rng.integers(2**20)),
                        int(rng.integers(1, 33)), int(rng.integers(2**40)), rng.bytes(16)),
        )
        for m in msgs:
            assert decode(encode(m)) == m


def test_channel_classes():
    w = WorkerId(Kind.AW, 0)
    assert channel_class(LayerFlush(w, 1, 0)) == "data"
    assert channel_class(CkptSegment(0, 0, 0, 1, 0, b"")) == "data"
    assert channel_class(Commit(1, 1, 1, 1, 1)) == "control"
    assert channel_class(ProbeAck(1)) == "control"
    assert channel_class(ErtUpdate(1, ())) == "control"


def _net(latency=100, sizes=None):
    s = Scheduler()
    net = Network(s, latency, nominal_sizes=sizes)
    a, b = WorkerId(Kind.AW, 0), WorkerId(Kind.EW, 0)
    got = []
    net.attach(a, lambda src, m, c: got.append((s.now, m)))
    net.attach(b, lambda src, m, c: got.append((s.now, m)))
    return s, net, a, b, got


def test_fifo_and_serialization():
    s, net, a, b, got = _net()
    net.connect(a, b, 100, data_rate=2.0)
    for i in range(3):
        net.send(a, b, CkptSegment(i, 0, 0, 1, 0, b"x" * 10))
    s.run()
    assert [t for t, _ in got] == [105, 110, 115]
    assert [m.seq for _, m in got] == [0, 1, 2]


def test_dead_destination_is_silent():
    s, net, a, b, got = _net()
    net.connect(a, b)
    net.kill(b)
    net.send(a, b, Probe(1))
    s.run()
    assert got == []


def test_in_flight_messages_from_dead_sender_dropped():
    s, net, a, b, got = _net()
    net.connect(a, b)
    net.send(a, b, Probe(1))
    s.at(50, net.kill, a)
    s.run()
    assert got == []


def test_byte_accounting_uses_nominal_sizes():
    s, net, a, b, _ = _net(sizes={TokenDispatch: 8192})
    net.connect(a, b)
    net.send(a, b, TokenDispatch(1, a, 1, 1, 0, 1, np.zeros(4, dtype=np.int64)))
    net.send(a, b, SubmitRequest(1, 4, 0, (1, 2)))
    assert net.bytes_by_class == {"dispatch": 8192, "control": 64}


def test_liveness_state_machine():
    lv = LivenessState(probe_interval=10, retry_limit=2, probe_deadline=3)
    p = WorkerId(Kind.EW, 0)
    lv.register(p, 0)
    assert check_silence(lv, p, 9) is Action.NONE
    assert check_silence(lv, p, 10) is Action.SEND_PROBE
    record_probe(lv, p, 10)
    assert lv.status(p) == "suspect"
    assert check_silence(lv, p, 12) is Action.NONE
    assert check_silence(lv, p, 13) is Action.SEND_PROBE
    record_probe(lv, p, 13)
    assert check_silence(lv, p, 16) is Action.DECLARE_FAILED
    note_activity(lv, p, 16)
    assert lv.status(p) == "healthy"


@given(st.integers(1, 20), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_detection_bound(interval_ms, retries, deadline_ms, fail_at):
    """A silent peer is declared failed within interval + retries * deadline of its last sign of life."""
    ms = 1_000_000
    s = Scheduler()
    net = Network(s, 50_000)
    owner, peer = WorkerId(Kind.AW, 0), WorkerId(Kind.EW, 0)
    net.attach(owner, lambda *a: None)
    net.attach(peer, lambda *a: None)
    net.connect(owner, peer)
    lv = LivenessState(interval_ms * ms, retries, deadline_ms * ms)
    declared = []
    pr = Prober(owner, net, lv, lambda w: declared.append(s.now))
    s.at(fail_at, net.kill, peer)
    s.at(fail_at, pr.watch, peer)
    s.run()
    assert len(declared) == 1
    assert declared[0] - fail_at <= interval_ms * ms + retries * deadline_ms * ms
