"""Scenario files: schema, defaults and validation.

A scenario is a YAML or JSON mapping. Durations are integer nanoseconds.
Every key is optional; see ``DEFAULTS`` for the full schema.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from ..core import ModelConfig
from ..timing import MEGASCALE, VLLM, Timing
from ..wire import Kind, WorkerId

DEFAULTS: dict = {
    "seed": 0,
    "mode": "self_healing",              # self_healing | baseline
    "duration": 2_000_000_000,
    "keep_trace": False,
    "metrics_window": 100_000_000,
    "model": {"embed_dim": 64, "kv_payload_bytes": 32},
    "cluster": {"aws": 8, "ews": 8, "pods": 1, "shadows": True},
    "timing": {"preset": "megascale"},
    "workload": {
        "kind": "poisson",           # poisson | trace
        "rate": 9.0,                 # requests per second
        "num_requests": 16,
        "prompt_len": 10,
        "max_new_tokens": 128,
        "start": 0,
        "trace": [],                 # [[time, prompt_len, max_new_tokens], ...]
    },
    "failures": [],                  # [{"time": ns, "worker": "AW2"}, ...]
    "checkpoint": {
        "mode": "incremental",       # off | incremental | pause_resume
        "interval": 8,               # tokens between pauses (pause_resume)
        "kv_region_bytes": 8 << 30,
        "max_seq_len": 2048,
    },
    "restore_mode": "checkpoint",    # checkpoint | sequential_replay
    "link": {"jitter": 0},
}

PRESETS = {"megascale": MEGASCALE, "vllm": VLLM}


class ScenarioInvalid(ValueError):
    def __init__(self, location: str, problem: str):
        super().__init__(f"{location}: {problem}")
        self.location = location


@dataclass
class Failure:
    time: int
    kind: Kind
    index: int


@dataclass
class Scenario:
    seed: int
    mode: str
    duration: int
    keep_trace: bool
    metrics_window: int
    model: ModelConfig
    timing: Timing
    aws: int
    ews: int
    pods: int
    shadows: bool
    workload: dict
    failures: list[Failure]
    checkpoint: dict
    restore_mode: str
    jitter: int

    @property
    def self_heal(self) -> bool:
        return self.mode == "self_healing"


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ScenarioInvalid(f"{where}{k}", "unknown key")
        if isinstance(base[k], dict) and k not in ("model", "timing"):
            if not isinstance(v, dict):
                raise ScenarioInvalid(f"{where}{k}", "expected a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ScenarioInvalid(f"{where}{k}", "expected a mapping")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


_WORKER = re.compile(r"^(AW|EW)(\d+)$")


def parse_worker(text: str, where: str) -> tuple[Kind, int]:
    m = _WORKER.match(str(text))
    if not m:
        raise ScenarioInvalid(where, f"bad worker name {text!r}; expected AW<n> or EW<n>")
    return Kind[m.group(1)], int(m.group(2))


def _build(cls, kw: dict, where: str, base=None):
    names = {f.name for f in fields(cls)}
    for k in kw:
        if k not in names and k != "preset":
            raise ScenarioInvalid(f"{where}.{k}", "unknown key")
    args = {k: v for k, v in kw.items() if k != "preset"}
    try:
        if base is not None:
            return cls(**{**{f.name: getattr(base, f.name) for f in fields(cls)}, **args})
        return cls(**args)
    except (TypeError, ValueError) as e:
        raise ScenarioInvalid(where, str(e)) from e


def from_mapping(raw: dict | None) -> Scenario:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ScenarioInvalid("<root>", "scenario must be a mapping")
    d = _merge(DEFAULTS, raw, "")
    model = _build(ModelConfig, d["model"], "model")
    preset = d["timing"].get("preset", "megascale")
    if preset not in PRESETS:
        raise ScenarioInvalid("timing.preset", f"unknown preset {preset!r}")
    timing = _build(Timing, d["timing"], "timing", PRESETS[preset])
    c = d["cluster"]
    for k in ("aws", "ews", "pods"):
        if not isinstance(c[k], int) or c[k] < 1:
            raise ScenarioInvalid(f"cluster.{k}", "must be a positive integer")
    if c["aws"] % c["pods"] or c["ews"] % c["pods"]:
        raise ScenarioInvalid("cluster.pods", "must divide both worker counts")
    if d["mode"] not in ("self_healing", "baseline"):
        raise ScenarioInvalid("mode", f"unknown mode {d['mode']!r}")
    if d["restore_mode"] not in ("checkpoint", "sequential_replay"):
        raise ScenarioInvalid("restore_mode", f"unknown restore mode {d['restore_mode']!r}")
    if d["checkpoint"]["mode"] not in ("off", "incremental", "pause_resume"):
        raise ScenarioInvalid("checkpoint.mode", f"unknown mode {d['checkpoint']['mode']!r}")
    w = d["workload"]
    if w["kind"] not in ("poisson", "trace"):
        raise ScenarioInvalid("workload.kind", f"unknown workload {w['kind']!r}")
    if w["kind"] == "poisson" and w["rate"] <= 0:
        raise ScenarioInvalid("workload.rate", "must be positive")
    if w["prompt_len"] < 1:
        raise ScenarioInvalid("workload.prompt_len", "prompt must not be empty")
    if w["max_new_tokens"] < 1:
        raise ScenarioInvalid("workload.max_new_tokens", "must be positive")
    failures = []
    for j, f in enumerate(d["failures"]):
        where = f"failures[{j}]"
        if not isinstance(f, dict) or "time" not in f or "worker" not in f:
            raise ScenarioInvalid(where, "needs time and worker")
        kind, index = parse_worker(f["worker"], f"{where}.worker")
        limit = c["aws"] if kind == Kind.AW else c["ews"]
        if index >= limit:
            raise ScenarioInvalid(f"{where}.worker", f"{f['worker']} does not exist")
        if not 0 <= f["time"] <= d["duration"]:
            raise ScenarioInvalid(f"{where}.time", "outside the run duration")
        failures.append(Failure(int(f["time"]), kind, index))
    if d["duration"] <= 0:
        raise ScenarioInvalid("duration", "must be positive")
    return Scenario(
        seed=int(d["seed"]), mode=d["mode"], duration=int(d["duration"]),
        keep_trace=bool(d["keep_trace"]), metrics_window=int(d["metrics_window"]),
        model=model, timing=timing, aws=c["aws"], ews=c["ews"], pods=c["pods"],
        shadows=bool(c["shadows"]), workload=w, failures=failures,
        checkpoint=d["checkpoint"], restore_mode=d["restore_mode"], jitter=int(d["link"]["jitter"]),
    )


def load(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ScenarioInvalid(str(path), f"cannot parse: {e}") from e
    return from_mapping(raw)


def worker_id(kind: Kind, index: int, incarnation: int = 0) -> WorkerId:
    return WorkerId(kind, index, incarnation)
