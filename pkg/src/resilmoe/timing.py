"""Simulated durations shared by the worker state machines (all integer ns)."""

from __future__ import annotations

from dataclasses import dataclass

from .harness.scheduler import MS, SEC, US


@dataclass(frozen=True)
class Timing:
    t_pre: int = 2_180_000          # per prefill layer
    t_dec: int = 850_000            # per decode layer
    attn_fraction: float = 0.4      # share of t_dec spent in attention
    link_latency: int = 50 * US     # one-way AW<->EW
    t_w: int = 18_500 * MS          # worker (re)initialization
    g_pre: float = 0.006            # GPU-time units per prefill layer
    g_dec: float = 0.0022           # GPU-time units per decode (token, layer)
    reply_timeout: int = 10 * MS
    probe_interval: int = 10 * MS
    retry_limit: int = 3
    probe_deadline: int | None = None  # default: 4x one-way latency
    ckpt_rate: float = 50.0         # bytes/ns on the AW<->store link (400 Gbps)
    ckpt_latency: int = 50 * US
    exec_per_token: int = 500       # EW cost per token beyond the knee

    def __post_init__(self):
        if self.t_pre <= 0 or self.t_dec <= 0:
            raise ValueError("layer durations must be positive")
        if not 0 < self.attn_fraction < 1:
            raise ValueError("attn_fraction must lie in (0, 1)")
        if self.exec_base < 0:
            raise ValueError("t_dec too small for the configured link latency")
        if self.attn_prefill <= 0:
            raise ValueError("t_pre must exceed the dispatch share of t_dec")

    @property
    def attn_decode(self) -> int:
        return round(self.t_dec * self.attn_fraction)

    @property
    def dispatch_share(self) -> int:
        return self.t_dec - self.attn_decode

    @property
    def attn_prefill(self) -> int:
        """Attention time of a sweep layer that carries a prompt batch."""
        return self.t_pre - self.dispatch_share

    @property
    def exec_base(self) -> int:
        """Flat EW batch latency below the knee, so a full layer takes t_dec."""
        return self.dispatch_share - 2 * self.link_latency

    @property
    def deadline(self) -> int:
        return 4 * self.link_latency if self.probe_deadline is None else self.probe_deadline

    @classmethod
    def from_seconds(cls, t_w: float, t_pre: float, t_dec: float, **kw) -> "Timing":
        return cls(t_w=round(t_w * SEC), t_pre=round(t_pre * SEC), t_dec=round(t_dec * SEC), **kw)


MEGASCALE = Timing()
VLLM = Timing(t_w=24 * SEC, t_pre=1_680_000, t_dec=580_000, g_pre=0.010, g_dec=0.0028)
