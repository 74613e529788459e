"""Simulated transport: channels, message frames and liveness detection.

Every pair of connected workers shares one control channel and one data
channel per direction. Channels are FIFO; a message whose source or
destination incarnation is dead at delivery time vanishes (fail-stop
silence).

Frame layout (little endian)::

    tag      u8
    fields   fixed-width integers in declaration order
    bytes    u32 length + raw bytes
    emb      u32 element count + int64 elements
    wid      u8 kind, u16 index, u16 incarnation
    ints     u32 count + u32 elements
    entries  u16 expert count, then per expert: u16 expert id,
             u8 host count, then per host: wid + u8 role
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np


class MalformedFrame(ValueError):
    pass


class Kind(enum.IntEnum):
    AW = 0
    EW = 1
    CKPT = 2
    ORCH = 3


class WorkerId(NamedTuple):
    kind: Kind
    index: int
    incarnation: int = 0

    def __str__(self) -> str:
        return f"{self.kind.name}{self.index}.{self.incarnation}"

    def next_incarnation(self) -> "WorkerId":
        return WorkerId(self.kind, self.index, self.incarnation + 1)


# flags on TokenDispatch / LayerFlush
PRIORITY = 1
CATCHUP = 2

PRIMARY = 0
SHADOW = 1


# --- messages -------------------------------------------------------------
# Each message class lists (field, codec) pairs in ``_layout``.

@dataclass(frozen=True)
class TokenDispatch:
    request_id: int
    aw_id: WorkerId
    layer: int
    token_index: int
    expert_id: int
    gate_weight: int
    embedding: np.ndarray = field(compare=False)
    flags: int = 0

    def __eq__(self, other):
        return _eq_with_embedding(self, other)

    __hash__ = None


@dataclass(frozen=True)
class ExpertOutput:
    request_id: int
    aw_id: WorkerId
    layer: int
    token_index: int
    expert_id: int
    gate_weight: int
    embedding: np.ndarray = field(compare=False)
    flags: int = 0

    def __eq__(self, other):
        return _eq_with_embedding(self, other)

    __hash__ = None


@dataclass(frozen=True)
class LayerFlush:
    """End of one AW's contribution to one (EW, layer)."""
    aw_id: WorkerId
    layer: int
    n_tokens: int
    flags: int = 0


@dataclass(frozen=True)
class FlushAck:
    ew_id: WorkerId
    layer: int
    flags: int = 0


@dataclass(frozen=True)
class Probe:
    nonce: int


@dataclass(frozen=True)
class ProbeAck:
    nonce: int


@dataclass(frozen=True)
class CkptSegment:
    seq: int
    request_id: int
    token_index: int
    layer: int
    offset: int
    payload: bytes


@dataclass(frozen=True)
class CkptInitReq:
    aw_id: WorkerId
    region_size: int
    request_quota: int


@dataclass(frozen=True)
class CkptInitResp:
    remote_base: int


@dataclass(frozen=True)
class Commit:
    request_id: int
    token_index: int
    seq: int
    prompt_len: int
    last_token_id: int


@dataclass(frozen=True)
class RestorePlan:
    request_id: int
    committed_token_index: int
    total_bytes: int
    last_token_id: int


@dataclass(frozen=True)
class RestoreRegion:
    request_id: int
    offset: int


@dataclass(frozen=True)
class RestoreDone:
    request_id: int


@dataclass(frozen=True)
class ErtUpdate:
    table_version: int
    entries: tuple  # ((expert_id, ((WorkerId, role), ...)), ...)


@dataclass(frozen=True)
class ReadySignal:
    worker_id: WorkerId


@dataclass(frozen=True)
class Register:
    worker_id: WorkerId
    kind: int


@dataclass(frozen=True)
class FailureReport:
    reporter: WorkerId
    failed: WorkerId


@dataclass(frozen=True)
class SubmitRequest:
    request_id: int
    max_new_tokens: int
    restoring: int
    prompt_token_ids: tuple
    replay_upto: int = 0  # tokens already delivered to the client


@dataclass(frozen=True)
class RestoreRequest:
    request_id: int
    target: WorkerId


@dataclass(frozen=True)
class RequestDone:
    request_id: int
    aw_id: WorkerId


def _eq_with_embedding(a, b) -> bool:
    if type(a) is not type(b):
        return NotImplemented
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if f.name == "embedding":
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


_I = {"u8": "B", "u16": "H", "u32": "I", "u64": "Q", "i64": "q"}

_LAYOUTS: dict[type, list[tuple[str, str]]] = {
    TokenDispatch: [("request_id", "u64"), ("aw_id", "wid"), ("layer", "u16"),
                    ("token_index", "u32"), ("expert_id", "u16"), ("gate_weight", "u32"),
                    ("flags", "u8"), ("embedding", "emb")],
    ExpertOutput: [("request_id", "u64"), ("aw_id", "wid"), ("layer", "u16"),
                   ("token_index", "u32"), ("expert_id", "u16"), ("gate_weight", "u32"),
                   ("flags", "u8"), ("embedding", "emb")],
    LayerFlush: [("aw_id", "wid"), ("layer", "u16"), ("n_tokens", "u32"), ("flags", "u8")],
    FlushAck: [("ew_id", "wid"), ("layer", "u16"), ("flags", "u8")],
    Probe: [("nonce", "u64")],
    ProbeAck: [("nonce", "u64")],
    CkptSegment: [("seq", "u64"), ("request_id", "u64"), ("token_index", "u32"),
                  ("layer", "u16"), ("offset", "u64"), ("payload", "bytes")],
    CkptInitReq: [("aw_id", "wid"), ("region_size", "u64"), ("request_quota", "u64")],
    CkptInitResp: [("remote_base", "u64")],
    Commit: [("request_id", "u64"), ("token_index", "u32"), ("seq", "u64"),
             ("prompt_len", "u32"), ("last_token_id", "u32")],
    RestorePlan: [("request_id", "u64"), ("committed_token_index", "u32"),
                  ("total_bytes", "u64"), ("last_token_id", "u32")],
    RestoreRegion: [("request_id", "u64"), ("offset", "u64")],
    RestoreDone: [("request_id", "u64")],
    ErtUpdate: [("table_version", "u32"), ("entries", "entries")],
    ReadySignal: [("worker_id", "wid")],
    Register: [("worker_id", "wid"), ("kind", "u8")],
    FailureReport: [("reporter", "wid"), ("failed", "wid")],
    SubmitRequest: [("request_id", "u64"), ("max_new_tokens", "u32"), ("restoring", "u8"),
                    ("prompt_token_ids", "ints"), ("replay_upto", "u32")],
    RestoreRequest: [("request_id", "u64"), ("target", "wid")],
    RequestDone: [("request_id", "u64"), ("aw_id", "wid")],
}

TAGS: dict[type, int] = {cls: i + 1 for i, cls in enumerate(_LAYOUTS)}
_BY_TAG = {t: cls for cls, t in TAGS.items()}

DATA_MESSAGES = (TokenDispatch, ExpertOutput, LayerFlush, FlushAck, CkptSegment)


def channel_class(msg) -> str:
    return "data" if isinstance(msg, DATA_MESSAGES) else "control"


def _put_wid(out: bytearray, w: WorkerId) -> None:
    out += struct.pack("<BHH", int(w.kind), w.index, w.incarnation)


def encode(msg) -> bytes:
    cls = type(msg)
    if cls not in TAGS:
        raise TypeError(f"not a wire message: {cls.__name__}")
    out = bytearray([TAGS[cls]])
    for name, codec in _LAYOUTS[cls]:
        v = getattr(msg, name)
        if codec in _I:
            out += struct.pack("<" + _I[codec], v)
        elif codec == "wid":
            _put_wid(out, v)
        elif codec == "bytes":
            out += struct.pack("<I", len(v)) + bytes(v)
        elif codec == "emb":
            arr = np.ascontiguousarray(v, dtype="<i8")
            out += struct.pack("<I", len(arr)) + arr.tobytes()
        elif codec == "ints":
            out += struct.pack(f"<I{len(v)}I", len(v), *v)
        elif codec == "entries":
            out += struct.pack("<H", len(v))
            for expert_id, hosts in v:
                out += struct.pack("<HB", expert_id, len(hosts))
                for w, role in hosts:
                    _put_wid(out, w)
                    out += struct.pack("<B", role)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise MalformedFrame(f"truncated frame at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFrame(f"truncated payload at byte {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def wid(self) -> WorkerId:
        k, i, inc = self.take("<BHH")
        try:
            return WorkerId(Kind(k), i, inc)
        except ValueError as e:
            raise MalformedFrame(f"bad worker kind {k}") from e


def decode(data: bytes):
    if not data:
        raise MalformedFrame("empty frame")
    cls = _BY_TAG.get(data[0])
    if cls is None:
        raise MalformedFrame(f"unknown tag {data[0]}")
    r = _Reader(data)
    r.pos = 1
    kwargs = {}
    for name, codec in _LAYOUTS[cls]:
        if codec in _I:
            (kwargs[name],) = r.take("<" + _I[codec])
        elif codec == "wid":
            kwargs[name] = r.wid()
        elif codec == "bytes":
            (n,) = r.take("<I")
            kwargs[name] = r.raw(n)
        elif codec == "emb":
            (n,) = r.take("<I")
            kwargs[name] = np.frombuffer(r.raw(8 * n), dtype="<i8").astype(np.int64)
        elif codec == "ints":
            (n,) = r.take("<I")
            kwargs[name] = tuple(r.take(f"<{n}I"))
        elif codec == "entries":
            (n,) = r.take("<H")
            entries = []
            for _ in range(n):
                expert_id, nh = r.take("<HB")
                hosts = []
                for _ in range(nh):
                    w = r.wid()
                    (role,) = r.take("<B")
                    hosts.append((w, role))
                entries.append((expert_id, tuple(hosts)))
            kwargs[name] = tuple(entries)
    if r.pos != len(data):
        raise MalformedFrame(f"{len(data) - r.pos} trailing bytes")
    return cls(**kwargs)


# --- channels -------------------------------------------------------------

@dataclass
class Channel:
    src: WorkerId
    dst: WorkerId
    cls: str
    latency: int
    rate: float | None = None  # bytes per ns; None = no serialization delay
    busy_until: int = 0
    last_arrival: int = 0

    def schedule(self, now: int, size: int) -> tuple[int, int]:
        """Return (transmit_end, arrival) for a message handed over at ``now``."""
        start = max(now, self.busy_until)
        end = start if self.rate is None else start + math.ceil(size / self.rate)
        self.busy_until = end
        arrival = max(end + self.latency, self.last_arrival)
        self.last_arrival = arrival
        return end, arrival


@dataclass
class ChannelPair:
    peer_a: WorkerId
    peer_b: WorkerId
    control: dict[WorkerId, Channel]  # keyed by sender
    data: dict[WorkerId, Channel]
    latency: int


class Network:
    """All channels of the cluster plus the liveness ground truth."""

    def __init__(self, sched, default_latency: int = 50_000, jitter: int = 0,
                 rng=None, nominal_sizes: dict | None = None):
        self.sched = sched
        self.default_latency = default_latency
        self.jitter = jitter
        self.rng = rng
        self.pairs: dict[frozenset, ChannelPair] = {}
        self.endpoints: dict[WorkerId, Callable] = {}
        self.alive: dict[WorkerId, bool] = {}
        self.bytes_by_class: dict[str, int] = {}
        self.nominal_sizes = nominal_sizes or {}
        self.on_send: Callable | None = None

    def attach(self, wid: WorkerId, handler: Callable) -> None:
        self.endpoints[wid] = handler
        self.alive[wid] = True

    def kill(self, wid: WorkerId) -> None:
        self.alive[wid] = False

    def is_alive(self, wid: WorkerId) -> bool:
        return self.alive.get(wid, False)

    def connect(self, a: WorkerId, b: WorkerId, latency: int | None = None,
                data_rate: float | None = None) -> ChannelPair:
        key = frozenset((a, b))
        if key in self.pairs:
            return self.pairs[key]
        lat = self.default_latency if latency is None else latency
        pair = ChannelPair(
            a, b,
            control={a: Channel(a, b, "control", lat), b: Channel(b, a, "control", lat)},
            data={a: Channel(a, b, "data", lat, data_rate), b: Channel(b, a, "data", lat, data_rate)},
            latency=lat,
        )
        self.pairs[key] = pair
        return pair

    def connected(self, a: WorkerId, b: WorkerId) -> bool:
        return frozenset((a, b)) in self.pairs

    def channel(self, src: WorkerId, dst: WorkerId, cls: str) -> Channel:
        pair = self.pairs[frozenset((src, dst))]
        return (pair.data if cls == "data" else pair.control)[src]

    def size_of(self, msg) -> int:
        size = self.nominal_sizes.get(type(msg))
        if size is not None:
            return size
        if isinstance(msg, CkptSegment):
            return len(msg.payload)
        return 64

    def send(self, src: WorkerId, dst: WorkerId, msg, klass: str | None = None) -> int:
        """Send ``msg``; returns the time its transmission completes.

        Nothing is surfaced to the sender if the destination is dead.
        """
        cls = channel_class(msg)
        ch = self.channel(src, dst, cls)
        assert ch.cls == cls
        size = self.size_of(msg)
        end, arrival = ch.schedule(self.sched.now, size)
        if self.jitter and self.rng is not None:
            arrival = max(arrival + int(self.rng.integers(0, self.jitter + 1)), ch.last_arrival)
            ch.last_arrival = arrival
        if klass is None:
            klass = _byte_class(msg)
        self.bytes_by_class[klass] = self.bytes_by_class.get(klass, 0) + size
        if self.on_send is not None:
            self.on_send(src, dst, msg, cls)
        self.sched.at(arrival, self._deliver, src, dst, msg, cls)
        return end

    def _deliver(self, src: WorkerId, dst: WorkerId, msg, cls: str) -> None:
        if not (self.alive.get(src, False) and self.alive.get(dst, False)):
            return
        self.endpoints[dst](src, msg, cls)


def _byte_class(msg) -> str:
    if isinstance(msg, TokenDispatch):
        return "dispatch"
    if isinstance(msg, ExpertOutput):
        return "output"
    if isinstance(msg, CkptSegment):
        return "checkpoint"
    return "control"


# --- liveness -------------------------------------------------------------

class Action(enum.Enum):
    NONE = "none"
    SEND_PROBE = "send_probe"
    DECLARE_FAILED = "declare_failed"


@dataclass
class PeerLiveness:
    last_activity: int = 0
    outstanding_probes: int = 0
    probe_deadline: int = 0
    status: str = "healthy"


@dataclass
class LivenessState:
    probe_interval: int = 10_000_000
    retry_limit: int = 3
    probe_deadline: int = 200_000
    peers: dict[WorkerId, PeerLiveness] = field(default_factory=dict)

    def register(self, peer: WorkerId, now: int) -> None:
        self.peers.setdefault(peer, PeerLiveness(last_activity=now))

    def status(self, peer: WorkerId) -> str:
        p = self.peers.get(peer)
        return "healthy" if p is None else p.status

    def is_failed(self, peer: WorkerId) -> bool:
        p = self.peers.get(peer)
        return p is not None and p.status == "failed"


def note_activity(liveness: LivenessState, peer: WorkerId, now: int) -> None:
    p = liveness.peers.get(peer)
    if p is None:
        liveness.peers[peer] = PeerLiveness(last_activity=now)
        return
    if p.status == "failed":
        return
    p.last_activity = now
    p.outstanding_probes = 0
    p.status = "healthy"


def check_silence(liveness: LivenessState, peer: WorkerId, now: int) -> Action:
    p = liveness.peers[peer]
    if p.status == "failed":
        return Action.NONE
    if p.outstanding_probes == 0:
        if now - p.last_activity >= liveness.probe_interval:
            return Action.SEND_PROBE
        return Action.NONE
    if now < p.probe_deadline:
        return Action.NONE
    if p.outstanding_probes >= liveness.retry_limit:
        return Action.DECLARE_FAILED
    return Action.SEND_PROBE


def record_probe(liveness: LivenessState, peer: WorkerId, now: int) -> None:
    p = liveness.peers[peer]
    p.outstanding_probes += 1
    p.probe_deadline = now + liveness.probe_deadline
    p.status = "suspect"


def declare_failed(liveness: LivenessState, peer: WorkerId) -> None:
    liveness.peers[peer].status = "failed"


class Prober:
    """Drives check_silence for peers a worker is currently waiting on."""

    def __init__(self, owner: WorkerId, net: Network, liveness: LivenessState,
                 on_failed: Callable[[WorkerId], None]):
        self.owner = owner
        self.net = net
        self.sched = net.sched
        self.liveness = liveness
        self.on_failed = on_failed
        self.watched: set[WorkerId] = set()
        self._armed: dict[WorkerId, int] = {}
        self._nonce = 0
        self.probes_sent = 0
        self.enabled = True

    def watch(self, peer: WorkerId) -> None:
        if not self.enabled or self.liveness.is_failed(peer):
            return
        self.liveness.register(peer, self.sched.now)
        self.watched.add(peer)
        self._arm(peer)

    def unwatch(self, peer: WorkerId) -> None:
        self.watched.discard(peer)

    def _arm(self, peer: WorkerId) -> None:
        p = self.liveness.peers[peer]
        if p.outstanding_probes:
            t = p.probe_deadline
        else:
            t = p.last_activity + self.liveness.probe_interval
        t = max(t, self.sched.now)
        if self._armed.get(peer) == t:
            return
        self._armed[peer] = t
        self.sched.at(t, self._check, peer, t)

    def _check(self, peer: WorkerId, armed_at: int) -> None:
        if self._armed.get(peer) != armed_at:
            return
        del self._armed[peer]
        if peer not in self.watched or not self.net.is_alive(self.owner):
            return
        action = check_silence(self.liveness, peer, self.sched.now)
        if action is Action.SEND_PROBE:
            record_probe(self.liveness, peer, self.sched.now)
            self._nonce += 1
            self.probes_sent += 1
            self.net.send(self.owner, peer, Probe(self._nonce))
            self._arm(peer)
        elif action is Action.DECLARE_FAILED:
            declare_failed(self.liveness, peer)
            self.watched.discard(peer)
            self.sched.record("declare_failed", str(self.owner), str(peer))
            self.on_failed(peer)
        elif self.liveness.status(peer) != "failed":
            self._arm(peer)

    def activity(self, peer: WorkerId) -> None:
        note_activity(self.liveness, peer, self.sched.now)
