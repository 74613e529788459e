"""Delimited-text report files.

Columns:
  tbt.csv         request_id, token_index, token_id, emitted_ns, gap_ns, aw
  throughput.csv  window_start_ns, tokens
  stalls.csv      failure_ns, worker, stall_ns, longest_gap_ns, median_tbt_ns,
                  request_id, token_index, layer, recovered_ns, detection_ns
  restore.csv     request_id, restored_ns, mode
  summary.json    totals, bytes by class, batch statistics, counters
  trace.jsonl     one event per line: [time_ns, kind, fields...]
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

from .metrics import MetricsReport


def _write(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export(report: MetricsReport, outdir: str | Path, fmt: str = "csv",
           trace: list[tuple] | None = None, digest: str | None = None) -> list[Path]:
    if fmt != "csv":
        raise ValueError(f"unsupported format {fmt!r}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    p = out / "tbt.csv"
    rows = []
    for rid, toks in report.tokens.items():
        ts = report.emission_times[rid]
        for k, (tok, t) in enumerate(zip(toks, ts)):
            rows.append((rid, k + 1, tok, t, "" if k == 0 else t - ts[k - 1], report.emitters[rid][k]))
    _write(p, ["request_id", "token_index", "token_id", "emitted_ns", "gap_ns", "aw"], rows)
    files.append(p)

    p = out / "throughput.csv"
    _write(p, ["window_start_ns", "tokens"], report.throughput)
    files.append(p)

    p = out / "stalls.csv"
    _write(p, ["failure_ns", "worker", "stall_ns", "longest_gap_ns", "median_tbt_ns",
               "request_id", "token_index", "layer", "recovered_ns", "detection_ns"],
           [tuple(asdict(s).values()) for s in report.stalls])
    files.append(p)

    p = out / "restore.csv"
    _write(p, ["request_id", "restored_ns", "mode"],
           [(rid, t, m) for rid, (t, m) in sorted(report.restore_times.items())])
    files.append(p)

    p = out / "summary.json"
    summary = {
        "total_tokens": report.total_tokens,
        "completed_requests": report.completed,
        "duplicates": report.duplicates,
        "mismatches": report.mismatches,
        "bytes_by_class": report.bytes_by_class,
        "replayed_gpu_time": report.replayed_gpu_time,
        "detection_latencies_ns": report.detection_latencies,
        "batch_stats": report.batch_stats,
        "counters": report.counters,
        "trace_digest": digest,
    }
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files.append(p)

    if trace is not None:
        p = out / "trace.jsonl"
        with p.open("w") as fh:
            for rec in trace:
                fh.write(json.dumps(list(rec)) + "\n")
        files.append(p)
    return files


def restoration_table(rows: list[dict], path: str | Path) -> Path:
    """Restoration sweep: one row per (mode, decoded tokens at failure)."""
    p = Path(path)
    keys = ["mode", "decoded", "restore_ns", "restore_bytes", "replay_bytes", "replayed_gpu_time"]
    _write(p, keys, [[r.get(k, "") for k in keys] for r in rows])
    return p


def render_trace(lines, kinds: set[str] | None = None) -> str:
    """Human-readable rendering of a trace.jsonl stream."""
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        t, kind, *rest = rec
        if kinds and kind not in kinds:
            continue
        out.append(f"{t / 1e6:14.6f} ms  {kind:<16} " + " ".join(str(x) for x in rest))
    return "\n".join(out)
