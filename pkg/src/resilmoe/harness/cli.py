"""Command line entry point: ``resilmoe run|costmodel|trace``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .. import costmodel as cm
from .cluster import Cluster
from .export import export, render_trace
from .scenario import ScenarioInvalid, load


def cmd_run(args) -> int:
    try:
        sc = load(args.scenario)
    except ScenarioInvalid as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return 2
    if args.trace:
        sc = replace(sc, keep_trace=True)
    if args.baseline:
        sc = replace(sc, mode="baseline", shadows=False,
                     checkpoint={**sc.checkpoint, "mode": "off"})
    cl = Cluster(sc)
    report = cl.run()
    files = export(report, args.out, trace=cl.sched.trace if args.trace else None,
                   digest=cl.sched.digest())
    print(f"tokens={report.total_tokens} completed={report.completed} "
          f"digest={cl.sched.digest()}")
    for s in report.stalls:
        print(f"failure {s.worker} at {s.failure_time / 1e9:.3f}s: stall {s.stall / 1e9:.4f}s")
    for f in files:
        print(f)
    return 0


def cmd_costmodel(args) -> int:
    raw = yaml.safe_load(Path(args.params).read_text()) if args.params else {"preset": "megascale"}
    p = cm.params_from_mapping(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    i_range = range(1, args.max_i + 1, args.i_step)
    layers = range(1, p.L + 1)
    for kind in cm.DeploymentKind:
        grid = cm.sweep(p, kind, i_range, layers)
        for metric in ("stall", "reexec"):
            path = out / f"{kind.value}_{metric}.csv"
            path.write_text(cm.grid_to_csv(grid, metric))
            print(path)
    ratio = cm.decode_vs_prefill_ratio(p)
    (out / "summary.json").write_text(json.dumps({
        "decode64_vs_prefill_reexec_ratio": float(ratio),
        "prefill_failure_stall_s": float(cm.prefill_failure_stall(p)),
    }, indent=2) + "\n")
    return 0


def cmd_trace(args) -> int:
    kinds = set(args.kind) if args.kind else None
    with open(args.trace) as fh:
        print(render_trace(fh, kinds))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="resilmoe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario file and write report files")
    r.add_argument("scenario")
    r.add_argument("-o", "--out", default="report")
    r.add_argument("--trace", action="store_true", help="also write trace.jsonl")
    r.add_argument("--baseline", action="store_true", help="coarse-restart baseline")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("costmodel", help="evaluate the analytic cost model over a grid")
    c.add_argument("params", nargs="?", help="YAML/JSON parameters (default: megascale preset)")
    c.add_argument("-o", "--out", default="costmodel")
    c.add_argument("--max-i", type=int, default=128)
    c.add_argument("--i-step", type=int, default=1)
    c.set_defaults(fn=cmd_costmodel)

    t = sub.add_parser("trace", help="render a trace.jsonl file")
    t.add_argument("trace")
    t.add_argument("--kind", action="append", help="only show these event kinds")
    t.set_defaults(fn=cmd_trace)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
