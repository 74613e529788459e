"""Closed-form recovery cost of a single failure.

Stall time is wall-clock seconds until the failed request resumes; re-execution
cost is in GPU-time units (duration x number of workers repeating the work).
Inputs may be ``Fraction`` for exact arithmetic or plain floats.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, fields
from fractions import Fraction
from numbers import Real


class DeploymentKind(enum.Enum):
    MONOLITHIC = "monolithic"
    DECOUPLED_AW = "decoupled_aw"
    DECOUPLED_EW = "decoupled_ew"


@dataclass(frozen=True)
class CostParams:
    T_w: Real
    t_pre: Real
    t_dec: Real
    g_pre: Real
    g_dec: Real
    M: int = 16
    L: int = 32

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.L < 1:
            raise ValueError("L must be at least 1")


@dataclass(frozen=True)
class FailurePoint:
    i: int
    layer: int

    def check(self, L: int) -> None:
        if self.i < 1:
            raise ValueError(f"token index {self.i} must be >= 1")
        if not 1 <= self.layer <= L:
            raise ValueError(f"layer {self.layer} outside 1..{L}")


TABLE1 = {
    "vllm": CostParams(Fraction(24), Fraction("0.00168"), Fraction("0.00058"),
                       Fraction("0.010"), Fraction("0.0028")),
    "megascale": CostParams(Fraction("18.5"), Fraction("0.00218"), Fraction("0.00085"),
                            Fraction("0.006"), Fraction("0.0022")),
}


def _decode_layers(p: CostParams, fp: FailurePoint) -> int:
    fp.check(p.L)
    return (fp.i - 1) * p.L + fp.layer


def stall_time(p: CostParams, kind: DeploymentKind, fp: FailurePoint):
    """Reinit plus full replay (monolithic/AW) or reinit plus one frontier layer (EW)."""
    if kind is DeploymentKind.DECOUPLED_EW:
        fp.check(p.L)
        return p.T_w + p.t_dec
    return p.T_w + p.L * p.t_pre + _decode_layers(p, fp) * p.t_dec


def reexec_cost(p: CostParams, kind: DeploymentKind, fp: FailurePoint):
    """GPU-time spent redoing work; every worker repeats it unless only an EW failed."""
    if kind is DeploymentKind.DECOUPLED_EW:
        fp.check(p.L)
        return p.g_dec
    return p.M * (p.L * p.g_pre + _decode_layers(p, fp) * p.g_dec)


def prefill_failure_stall(p: CostParams):
    """Failure during prefill: reinit plus one pass over all layers (prompt in parallel)."""
    return p.T_w + p.L * p.t_pre


def prefill_failure_cost(p: CostParams):
    return p.M * p.L * p.g_pre


def decode_vs_prefill_ratio(p: CostParams, decoded: int = 64):
    """Re-execution cost of a failure after ``decoded`` tokens over a prefill failure."""
    fp = FailurePoint(decoded, p.L)
    return reexec_cost(p, DeploymentKind.MONOLITHIC, fp) / prefill_failure_cost(p)


@dataclass(frozen=True)
class Cell:
    i: int
    layer: int
    stall: Real
    reexec: Real


def sweep(p: CostParams, kind: DeploymentKind, i_range, layer_range) -> list[list[Cell]]:
    """Rows indexed by token i, columns by layer."""
    grid = []
    for i in i_range:
        row = []
        for layer in layer_range:
            fp = FailurePoint(i, layer)
            row.append(Cell(i, layer, stall_time(p, kind, fp), reexec_cost(p, kind, fp)))
        grid.append(row)
    return grid


def grid_to_csv(grid: list[list[Cell]], metric: str = "stall") -> str:
    """Heatmap table: first column is i, header row lists layers."""
    if metric not in ("stall", "reexec"):
        raise ValueError(f"unknown metric {metric!r}")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if not grid:
        return ""
    w.writerow(["i"] + [c.layer for c in grid[0]])
    for row in grid:
        w.writerow([row[0].i] + [float(getattr(c, metric)) for c in row])
    return out.getvalue()


def params_from_mapping(m: dict) -> CostParams:
    """Build CostParams from a parsed parameter file; numbers are read exactly."""
    if "preset" in m:
        base = TABLE1[m["preset"]]
        m = {**{f.name: getattr(base, f.name) for f in fields(base)},
             **{k: v for k, v in m.items() if k != "preset"}}
    kw = {}
    for f in fields(CostParams):
        if f.name not in m:
            if f.name in ("M", "L"):
                continue
            raise ValueError(f"missing parameter {f.name}")
        v = m[f.name]
        kw[f.name] = int(v) if f.name in ("M", "L") else Fraction(str(v))
    return CostParams(**kw)
