"""Remote store for incremental KV checkpoints.

Each AW incarnation owns one bucket. Segments are placed by offset
(receiver-passive) and become durable only when a commit record covers them.
A commit is applied only if the request's whole prefix is present with
sequence numbers at or below the commit's; otherwise it is held until the
gap fills.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .core import ModelConfig, segment_size
from .wire import (
    CkptInitReq, CkptInitResp, CkptSegment, Commit, RestoreDone, RestorePlan,
    RestoreRegion, RestoreRequest, WorkerId,
)

logger = logging.getLogger(__name__)


class OffsetOutOfRange(Exception):
    pass


class TargetUnavailable(Exception):
    pass


class SealedBucket(Exception):
    pass


@dataclass
class CommitRecord:
    token_index: int
    seq: int
    prompt_len: int
    last_token_id: int


@dataclass
class Bucket:
    aw_id: WorkerId
    base: int
    size: int
    quota: int
    segments: dict[tuple[int, int, int], tuple[int, bytes]] = field(default_factory=dict)
    commits: dict[int, CommitRecord] = field(default_factory=dict)
    held: dict[int, list[Commit]] = field(default_factory=dict)
    request_base: dict[int, int] = field(default_factory=dict)
    highest_applied_seq: int = 0
    sealed: bool = False

    def locate(self, offset: int, num_layers: int, C: int) -> tuple[int, int, int]:
        """(slot base, token, layer) for an absolute offset."""
        rel = offset - self.base
        if rel < 0 or rel + C > self.size:
            raise OffsetOutOfRange(f"offset {offset} outside bucket of {self.aw_id}")
        slot = rel - rel % self.quota
        within = rel - slot
        if within % C:
            raise OffsetOutOfRange(f"offset {offset} not segment aligned")
        k = within // C
        return slot, k // num_layers + 1, k % num_layers + 1

    # per request: layers present per position, and running max seq over the complete prefix
    _counts: dict[tuple[int, int], list[int]] = field(default_factory=dict)
    _prefix_max: dict[int, list[int]] = field(default_factory=dict)

    def put(self, request_id: int, pos: int, layer: int, seq: int, payload: bytes,
            num_layers: int) -> None:
        key = (request_id, pos, layer)
        if key in self.segments:
            return
        self.segments[key] = (seq, payload)
        cnt = self._counts.setdefault((request_id, pos), [0, 0])
        cnt[0] += 1
        cnt[1] = max(cnt[1], seq)
        pm = self._prefix_max.setdefault(request_id, [0])
        while True:
            nxt = self._counts.get((request_id, len(pm)))
            if nxt is None or nxt[0] < num_layers:
                break
            pm.append(max(pm[-1], nxt[1]))

    def complete_upto(self, request_id: int) -> int:
        return len(self._prefix_max.get(request_id, [0])) - 1

    def prefix_complete(self, request_id: int, upto: int, max_seq: int) -> bool:
        pm = self._prefix_max.get(request_id, [0])
        return upto < len(pm) and pm[upto] <= max_seq


class CheckpointStore:
    def __init__(self, wid: WorkerId, cfg: ModelConfig, net, sink=None):
        self.wid = wid
        self.cfg = cfg
        self.net = net
        self.sched = net.sched
        self.sink = sink
        self.C = segment_size(cfg)
        self.buckets: dict[WorkerId, Bucket] = {}
        self.current: dict[int, WorkerId] = {}  # AW index -> live incarnation
        self.owner: dict[int, WorkerId] = {}    # request -> bucket holding its newest commit
        self._next_base = 0
        self._restores: dict[tuple[WorkerId, int], tuple[Bucket, CommitRecord]] = {}
        self.rejected_sealed = 0
        self.restore_bytes = 0

    # -- registration ----------------------------------------------------

    def register_bucket(self, aw_id: WorkerId, region_size: int, quota: int | None = None) -> int:
        if aw_id in self.buckets:
            return self.buckets[aw_id].base
        prev = self.current.get(aw_id.index)
        if prev is not None:
            self.buckets[prev].sealed = True
        base = self._next_base
        self._next_base += region_size
        self.buckets[aw_id] = Bucket(aw_id, base, region_size, quota or region_size)
        self.current[aw_id.index] = aw_id
        return base

    # -- log application -------------------------------------------------

    def apply_segment(self, bucket: Bucket, seg: CkptSegment) -> None:
        if bucket.sealed:
            self.rejected_sealed += 1
            raise SealedBucket(f"bucket of {bucket.aw_id} is sealed")
        L = self.cfg.num_layers
        slot, pos, layer = bucket.locate(seg.offset, L, self.C)
        if (pos, layer) != (seg.token_index, seg.layer):
            raise OffsetOutOfRange(
                f"offset {seg.offset} maps to ({pos}, {layer}), header says "
                f"({seg.token_index}, {seg.layer})")
        known = bucket.request_base.setdefault(seg.request_id, slot)
        if known != slot:
            raise OffsetOutOfRange(f"request {seg.request_id} wrote outside its region")
        bucket.put(seg.request_id, pos, layer, seg.seq, seg.payload, L)
        bucket.highest_applied_seq = max(bucket.highest_applied_seq, seg.seq)
        held = bucket.held.pop(seg.request_id, None)
        if held:
            for c in held:
                self.apply_commit(bucket, c)

    def apply_commit(self, bucket: Bucket, c: Commit) -> bool:
        cur = bucket.commits.get(c.request_id)
        if cur is not None and cur.token_index >= c.token_index:
            return True
        upto = c.prompt_len + c.token_index
        if not bucket.prefix_complete(c.request_id, upto, c.seq):
            pending = bucket.held.setdefault(c.request_id, [])
            if c not in pending:
                pending.append(c)
            return False
        bucket.commits[c.request_id] = CommitRecord(c.token_index, c.seq, c.prompt_len,
                                                    c.last_token_id)
        self.owner[c.request_id] = bucket.aw_id
        return True

    def latest_committed(self, request_id: int) -> int | None:
        """Committed token index (0 = prompt only), or None if nothing is durable."""
        rec = self._record(request_id)
        return None if rec is None else rec[1].token_index

    def _record(self, request_id: int) -> tuple[Bucket, CommitRecord] | None:
        aw = self.owner.get(request_id)
        if aw is None:
            return None
        b = self.buckets[aw]
        return b, b.commits[request_id]

    # -- restoration -----------------------------------------------------

    def restore_to(self, target: WorkerId, request_id: int) -> None:
        rec = self._record(request_id)
        if rec is None:
            raise KeyError(f"request {request_id} has no committed prefix")
        if not self.net.is_alive(target):
            raise TargetUnavailable(str(target))
        bucket, c = rec
        total = (c.prompt_len + c.token_index) * self.cfg.num_layers * self.C
        self._restores[(target, request_id)] = rec
        self.sched.record("restore_plan", str(target), request_id, c.token_index, total)
        self.net.send(self.wid, target, RestorePlan(request_id, c.token_index, total,
                                                    c.last_token_id))

    def _stream(self, target: WorkerId, region: RestoreRegion) -> None:
        rec = self._restores.pop((target, region.request_id), None)
        if rec is None:
            return
        src, c = rec
        rid = region.request_id
        L, C = self.cfg.num_layers, self.C
        dst = self.buckets.get(target)
        upto = c.prompt_len + c.token_index
        end = self.sched.now
        for pos in range(1, upto + 1):
            for layer in range(1, L + 1):
                _, payload = src.segments[(rid, pos, layer)]
                off = region.offset + ((pos - 1) * L + (layer - 1)) * C
                end = self.net.send(self.wid, target,
                                    CkptSegment(0, rid, pos, layer, off, payload), klass="restore")
                self.restore_bytes += C
                if dst is not None:
                    dst.put(rid, pos, layer, 0, payload, L)
                    dst.request_base[rid] = region.offset
        if dst is not None:
            dst.commits[rid] = CommitRecord(c.token_index, 0, c.prompt_len, c.last_token_id)
            self.owner[rid] = target
        self.sched.at(end, self._done, target, rid)

    def _done(self, target: WorkerId, request_id: int) -> None:
        self.net.send(self.wid, target, RestoreDone(request_id))

    # -- message handling ------------------------------------------------

    def handle(self, src: WorkerId, msg, cls: str) -> None:
        if isinstance(msg, CkptSegment):
            bucket = self.buckets.get(src)
            if bucket is None:
                return
            try:
                self.apply_segment(bucket, msg)
            except SealedBucket:
                pass
        elif isinstance(msg, Commit):
            bucket = self.buckets.get(src)
            if bucket is not None and not bucket.sealed:
                self.apply_commit(bucket, msg)
        elif isinstance(msg, CkptInitReq):
            base = self.register_bucket(msg.aw_id, msg.region_size, msg.request_quota)
            self.net.send(self.wid, src, CkptInitResp(base))
        elif isinstance(msg, RestoreRequest):
            try:
                self.restore_to(msg.target, msg.request_id)
            except (KeyError, TargetUnavailable) as e:
                logger.warning("restore of request %d failed: %s", msg.request_id, e)
        elif isinstance(msg, RestoreRegion):
            self._stream(src, msg)
