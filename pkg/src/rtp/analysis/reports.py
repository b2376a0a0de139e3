"""CSV writers. Column orders are fixed; floats use ``repr`` so output is byte-stable.

==========  ============================================================
file        columns
==========  ============================================================
memtable    strategy,N,W,G,A,A_p,activation_mem,param_mem,duplication
ledger      strategy,N,category,peak_bytes,duplication
timeline    schedule,worker,stream,label,start,end
sweep       strategy,N,per_worker_batch,global_batch,peak_bytes
==========  ============================================================
"""
from __future__ import annotations

import csv
import io

from .instrumented import REPORT_CATEGORIES, LedgerReport
from .memory import table1_rows
from .timeline import Timeline

MEMTABLE_COLUMNS = ("strategy", "N", "W", "G", "A", "A_p", "activation_mem", "param_mem", "duplication")
LEDGER_COLUMNS = ("strategy", "N", "category", "peak_bytes", "duplication")
TIMELINE_COLUMNS = ("schedule", "worker", "stream", "label", "start", "end")
SWEEP_COLUMNS = ("strategy", "N", "per_worker_batch", "global_batch", "peak_bytes")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def memtable_csv(W, G, A, A_p, ns) -> str:
    rows = []
    for n in ns:
        for name, act, param, dup in table1_rows(W, G, A, A_p, n):
            rows.append((name, n, W, G, A, A_p, act, param, dup))
    return to_csv(MEMTABLE_COLUMNS, rows)


def ledger_csv(reports: list[LedgerReport]) -> str:
    rows = []
    for rep in reports:
        peak = rep.peak
        for c in REPORT_CATEGORIES:
            rows.append((rep.strategy, rep.n, c, peak[c], rep.duplication[c]))
    return to_csv(LEDGER_COLUMNS, rows)


def timeline_csv(timelines: list[Timeline]) -> str:
    rows = []
    for tl in timelines:
        for e in sorted(tl.events, key=lambda e: (e.worker, e.start, e.stream, e.label)):
            rows.append((tl.schedule, e.worker, e.stream, e.label, float(e.start), float(e.end)))
    return to_csv(TIMELINE_COLUMNS, rows)


def sweep_csv(series: dict[str, list[tuple[int, int]]], n: int) -> str:
    rows = []
    for strategy, points in series.items():
        for global_batch, peak in points:
            rows.append((strategy, n, global_batch // n, global_batch, peak))
    return to_csv(SWEEP_COLUMNS, rows)
