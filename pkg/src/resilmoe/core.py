"""Model shape, deterministic mock kernels and KV segment sizing.

All tensor arithmetic is fixed point (scale 2**-16) carried in int64 so that
replaying a computation anywhere in the cluster yields bit-identical results.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FRAC_BITS = 16
ONE = 1 << FRAC_BITS
VOCAB_SIZE = 32000

# Seed for expert weights; independent of any per-scenario seed so that a
# replacement EW holds the same "weights" as the one it replaces.
_EXPERT_WEIGHT_SEED = 0x5EED_E4E7


class MissingKvState(Exception):
    """A KV segment required by attention is absent."""


class LengthMismatch(ValueError):
    pass


class InvalidRequest(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 32
    num_experts: int = 8
    top_k: int = 2
    hidden_size: int = 4096
    attn_heads: int = 32
    kv_heads: int = 8
    elem_size: int = 2
    min_expert_batch: int = 32
    knee_low: int = 256
    knee_high: int = 512
    seed: int = 0
    # length of the mock embedding vectors; byte accounting always uses hidden_size
    embed_dim: int | None = None
    # stored KV payload length; byte accounting always uses segment_size
    kv_payload_bytes: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "num_experts", "top_k", "hidden_size",
                     "attn_heads", "kv_heads", "elem_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.top_k > self.num_experts:
            raise ValueError("top_k must not exceed num_experts")
        if self.kv_heads > self.attn_heads:
            raise ValueError("kv_heads must not exceed attn_heads")
        if self.hidden_size % self.attn_heads:
            raise ValueError("attn_heads must divide hidden_size")
        if not 0 < self.min_expert_batch <= self.knee_low <= self.knee_high:
            raise ValueError("need 0 < min_expert_batch <= knee_low <= knee_high")
        for name in ("embed_dim", "kv_payload_bytes"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def width(self) -> int:
        return self.hidden_size if self.embed_dim is None else self.embed_dim

    @classmethod
    def mixtral(cls, **overrides) -> "ModelConfig":
        """Mixtral-8x7B public dimensions."""
        return cls(**overrides)


def segment_size(cfg: ModelConfig) -> int:
    """Bytes of KV cache appended per (token, layer)."""
    return 2 * cfg.kv_heads * (cfg.hidden_size // cfg.attn_heads) * cfg.elem_size


def expert_traffic_volume(cfg: ModelConfig) -> int:
    """AW<->EW bytes per (token, layer): top-k embeddings out and back."""
    return 2 * cfg.top_k * cfg.hidden_size * cfg.elem_size


@dataclass(frozen=True)
class KVSegment:
    request_id: int
    token_index: int  # absolute sequence position, 1-based
    layer: int
    payload: bytes


@dataclass(frozen=True)
class Request:
    id: int
    prompt_token_ids: tuple[int, ...]
    max_new_tokens: int

    def __post_init__(self):
        if len(self.prompt_token_ids) == 0:
            raise InvalidRequest(f"request {self.id} has an empty prompt")
        if self.max_new_tokens < 1:
            raise InvalidRequest(f"request {self.id} asks for no tokens")

    @property
    def prompt_len(self) -> int:
        return len(self.prompt_token_ids)


@dataclass
class RequestState:
    request: Request
    next_token_index: int = 1
    frontier: int = 1
    phase: str = "prefill"
    kv: dict[tuple[int, int], KVSegment] = field(default_factory=dict)
    emitted: list[int] = field(default_factory=list)
    # per-layer running digest over the KV history, and how many positions it covers
    chains: dict[int, tuple[int, bytes]] = field(default_factory=dict)
    # id of the token fed into the next decode step
    input_token: int | None = None

    @property
    def request_id(self) -> int:
        return self.request.id

    @property
    def position(self) -> int:
        """Sequence position of the token currently being decoded."""
        return self.request.prompt_len + self.next_token_index

    @property
    def done(self) -> bool:
        return self.phase == "done"

    def rebuild_chains(self, num_layers: int, upto: int) -> None:
        """Recompute the per-layer digests from kv for positions 1..upto."""
        self.chains = {}
        for layer in range(1, num_layers + 1):
            digest = _chain_seed(self.request_id, layer)
            for pos in range(1, upto + 1):
                seg = self.kv.get((layer, pos))
                if seg is None:
                    raise MissingKvState(
                        f"request {self.request_id}: no segment at layer {layer}, position {pos}")
                digest = _chain_step(digest, seg.payload)
            self.chains[layer] = (upto, digest)


def _h(data: bytes, size: int = 32) -> bytes:
    return hashlib.blake2b(data, digest_size=size).digest()


def _chain_seed(request_id: int, layer: int) -> bytes:
    return _h(struct.pack("<4sqq", b"kvch", request_id, layer))


def _chain_step(digest: bytes, payload: bytes) -> bytes:
    return _h(digest + payload)


def _rng(digest: bytes) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def select_experts(cfg: ModelConfig, request_id: int, token_index: int,
                   layer: int) -> list[tuple[int, int]]:
    """Deterministic top-k gating.

    Returns ``(expert_id, gate_weight)`` pairs ranked by score; weights are
    fixed point and sum to exactly ``ONE``.
    """
    if not 1 <= layer <= cfg.num_layers:
        raise ValueError(f"layer {layer} outside 1..{cfg.num_layers}")
    base = _h(struct.pack("<4sqqqq", b"gate", cfg.seed, request_id, token_index, layer))
    scored = []
    for e in range(cfg.num_experts):
        s = int.from_bytes(_h(base + struct.pack("<q", e), 8), "little")
        scored.append((s, e))
    scored.sort(key=lambda se: (-se[0], se[1]))
    chosen = scored[: cfg.top_k]
    raw = [1 + (s % 255) for s, _ in chosen]
    total = sum(raw)
    weights = [r * ONE // total for r in raw]
    remainder = ONE - sum(weights)
    lowest = min(range(len(chosen)), key=lambda j: chosen[j][1])
    weights[lowest] += remainder
    return [(e, w) for (_, e), w in zip(chosen, weights)]


@lru_cache(maxsize=4096)
def _expert_coeffs(expert_id: int, layer: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(_h(struct.pack("<4sqqq", b"expw", _EXPERT_WEIGHT_SEED, expert_id, layer)))
    a = rng.integers(-(ONE - 1), ONE, size=n, dtype=np.int64)
    b = rng.integers(-(1 << 12), 1 << 12, size=n, dtype=np.int64)
    a.setflags(write=False)
    b.setflags(write=False)
    return a, b


def expert_forward(expert_id: int, layer: int, x: np.ndarray) -> np.ndarray:
    """Stateless expert FFN stand-in: elementwise fixed-point affine map."""
    a, b = _expert_coeffs(expert_id, layer, len(x))
    return ((a * x) >> FRAC_BITS) + b


def attention_forward(cfg: ModelConfig, state: RequestState, layer: int,
                      x: np.ndarray, position: int | None = None,
                      ) -> tuple[np.ndarray, KVSegment]:
    """Mock attention for one token at one layer.

    The output and the appended segment are a keyed digest of the whole KV
    history of this request at this layer plus the input, so any restoration
    error changes the token stream.
    """
    if len(x) != cfg.width:
        raise LengthMismatch(f"embedding length {len(x)} != {cfg.width}")
    pos = state.position if position is None else position
    count, digest = state.chains.get(layer, (0, _chain_seed(state.request_id, layer)))
    if count != pos - 1:
        raise MissingKvState(
            f"request {state.request_id} layer {layer}: history covers {count} "
            f"positions, need {pos - 1}")
    key = _h(digest + x.tobytes() + struct.pack("<qqq", state.request_id, pos, layer))
    rng = _rng(key)
    noise = rng.integers(-ONE, ONE, size=cfg.width, dtype=np.int64)
    out = (x >> 1) + noise
    payload = rng.bytes(cfg.kv_payload_bytes or segment_size(cfg))
    seg = KVSegment(state.request_id, pos, layer, payload)
    if (layer, pos) in state.kv:
        raise ValueError(f"segment ({layer}, {pos}) already present; KV is append-only")
    state.kv[(layer, pos)] = seg
    state.chains[layer] = (pos, _chain_step(digest, payload))
    return out, seg


def aggregate(outputs: list[np.ndarray], weights: list[int]) -> np.ndarray:
    """Exact fixed-point weighted sum."""
    if len(outputs) != len(weights) or not outputs:
        raise LengthMismatch("outputs and weights must be equal-length and nonempty")
    acc = np.zeros_like(outputs[0])
    for y, w in zip(outputs, weights):
        if len(y) != len(acc):
            raise LengthMismatch("embedding lengths differ")
        acc += y * w
    return acc >> FRAC_BITS


def emit_token(final_embedding: np.ndarray) -> int:
    return int.from_bytes(_h(final_embedding.tobytes(), 8), "little") % VOCAB_SIZE


def embed_token(cfg: ModelConfig, token_id: int) -> np.ndarray:
    rng = _rng(_h(struct.pack("<4sqq", b"embd", cfg.seed, token_id)))
    return rng.integers(-ONE, ONE, size=cfg.width, dtype=np.int64)
