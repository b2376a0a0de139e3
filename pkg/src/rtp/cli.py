"""``rtp-sim``: verification, memory tables, ledger runs, timelines and batch sweeps.

Exit codes: 0 success, 1 tolerance breach (or a failed protocol assertion),
2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .analysis.cost import CostModel
from .analysis.instrumented import (
    activation_bytes,
    batch_sweep,
    boundary_activation_bytes,
    collinear,
    ledger_instrumented_run,
    model_bytes,
)
from .analysis.reports import ledger_csv, memtable_csv, sweep_csv, timeline_csv
from .analysis.timeline import SCHEDULES, simulate_timeline, unit_costs
from .analysis.verify import FD_RTOL, compare_to_serial, gradcheck
from .config import STRATEGIES, ExperimentConfig, config_from_dict, preset, read_config
from .errors import ConfigurationError, ProtocolError

SEED_ENV = "RTP_SIM_SEED"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat JSON experiment config")
    common.add_argument("--preset", help="model preset (toy-gpt, toy-gpt-moe, toy-gpt-8h or a full-size row)")
    common.add_argument("--workers", type=int, metavar="N", help="ring size")
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--batch", type=int, metavar="B", help="global batch size")
    common.add_argument("--seed", type=int, metavar="U64", help=f"fixture seed (falls back to ${SEED_ENV})")
    common.add_argument("--transport", choices=("lockstep", "concurrent"))
    common.add_argument("--moe", action="store_true", default=None, help="use MoE feed-forward blocks")
    common.add_argument("--out", metavar="PATH", help="write the main output here instead of stdout")
    for name in ("alpha", "beta", "gamma", "launch-overhead"):
        common.add_argument(f"--{name}", type=float)

    p = argparse.ArgumentParser(prog="rtp-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="RTP vs serial oracle and finite differences")
    v.add_argument("--samples", type=int, default=40, help="finite-difference samples (default 40)")
    v.add_argument("--corrupt-shard", action="store_true", help=argparse.SUPPRESS)

    m = sub.add_parser("memtable", parents=[common], help="closed-form memory rows for every strategy")
    for name in ("W", "G", "A", "Ap"):
        m.add_argument(f"--{name}", type=int, metavar="BYTES")

    sub.add_parser("ledger", parents=[common], help="instrumented per-worker peaks and duplication")
    sub.add_parser("timeline", parents=[common], help="FSDP / RTP schedule timelines")

    s = sub.add_parser("sweep", parents=[common], help="peak memory against batch size")
    s.add_argument("--batches", default="1,2,4,8", help="comma-separated per-worker batch sizes")
    return p


def build_config(args) -> ExperimentConfig:
    raw = read_config(args.config) if args.config else {}
    exp = config_from_dict(raw)
    overrides: dict = {}
    if args.preset:
        exp = dataclasses.replace(exp, model=preset(args.preset))
    if args.moe:
        overrides["moe"] = True
    for flag, key in (("workers", "n_workers"), ("strategy", "strategy"), ("batch", "batch_size"),
                      ("transport", "transport"), ("alpha", "alpha"), ("beta", "beta"), ("gamma", "gamma"),
                      ("launch_overhead", "launch_overhead")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    elif "seed" not in raw and os.environ.get(SEED_ENV):
        try:
            overrides["seed"] = int(os.environ[SEED_ENV], 0)
        except ValueError:
            raise ConfigurationError(f"${SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    exp = config_from_dict(overrides, exp)
    if exp.seed < 0 or exp.seed >= 1 << 64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {exp.seed}")
    return exp


def _emit(args, text: str) -> None:
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- commands ---------------------------------------------------------------
def cmd_verify(args, exp: ExperimentConfig) -> int:
    exp.validate()
    model = exp.runnable_model()
    variants = [exp.variant] if exp.variant != "serial" else ["inplace", "outofplace"]
    hook = None
    if args.corrupt_shard:
        def hook(rank, m):
            if rank == 0:
                m.rotated_layers()[-1].slot.logical_id = -1
    report = {"config": exp.to_dict(), "checks": []}
    ok = True
    try:
        for variant in variants:
            r = compare_to_serial(model, exp.n_workers, variant, exp.batch_size, exp.seed, exp.transport, hook)
            report["checks"].append({
                "variant": variant,
                "output_error": r.output_error,
                "loss_error": r.loss_error,
                "max_grad_error": r.max_grad_error,
                "pass": r.ok,
            })
            ok &= r.ok
    except ProtocolError as exc:
        report["status"] = "FAIL"
        report["error"] = f"shard-id assertion failed: {exc}"
        _emit(args, json.dumps(report, indent=2, sort_keys=True) + "\n")
        return 1
    if args.samples > 0:
        g = gradcheck(model, exp.n_workers, args.samples, exp.batch_size, exp.seed, variants[0], exp.transport)
        w = g.worst()
        report["gradcheck"] = {
            "samples": len(g.samples),
            "max_rel": g.max_rel,
            "worst": dataclasses.asdict(w) if w else None,
            "pass": g.max_rel < FD_RTOL,
        }
        ok &= g.max_rel < FD_RTOL
    report["status"] = "PASS" if ok else "FAIL"
    _emit(args, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0 if ok else 1


def cmd_memtable(args, exp: ExperimentConfig) -> int:
    literals = [args.W, args.G, args.A, args.Ap]
    if any(v is not None for v in literals):
        if any(v is None for v in literals):
            raise ConfigurationError("memtable needs all of --W, --G, --A and --Ap, or none of them")
        if min(literals) < 0:
            raise ConfigurationError("memory quantities must be non-negative")
        W, G, A, A_p = literals
    else:
        model = exp.model.with_experts(exp.n_workers)
        W = G = model_bytes(model)
        A = activation_bytes(model, exp.batch_size)
        A_p = boundary_activation_bytes(model, exp.batch_size)
    if exp.n_workers < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {exp.n_workers}")
    _emit(args, memtable_csv(W, G, A, A_p, [exp.n_workers]))
    return 0


def cmd_ledger(args, exp: ExperimentConfig) -> int:
    exp.validate()
    model = exp.runnable_model()
    reports = [
        ledger_instrumented_run(model, s, exp.n_workers, exp.batch_size, exp.seed, exp.transport)
        for s in STRATEGIES
    ]
    _emit(args, ledger_csv(reports))
    return 0


def cmd_timeline(args, exp: ExperimentConfig) -> int:
    exp.validate()
    cost = CostModel(exp.alpha, exp.beta, exp.gamma)
    units = unit_costs(exp.runnable_model(), exp.batch_size, exp.n_workers, cost, exp.launch_overhead)
    timelines = [simulate_timeline(s, units, exp.n_workers) for s in SCHEDULES]
    _emit(args, timeline_csv(timelines))
    summary = {
        tl.schedule: {
            "makespan": float(tl.makespan),
            "startup_latency": float(tl.startup_latency()),
            "idle_fraction": float(tl.idle_fraction()),
        }
        for tl in timelines
    }
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if args.out is None else sys.stdout)
    return 0


def cmd_sweep(args, exp: ExperimentConfig) -> int:
    try:
        batches = [int(b) for b in args.batches.split(",") if b.strip()]
    except ValueError:
        raise ConfigurationError(f"--batches must be comma-separated integers, got {args.batches!r}") from None
    if not batches or min(batches) < 1:
        raise ConfigurationError("--batches needs at least one positive per-worker batch size")
    # both rotation variants unless one is named on the command line
    if args.strategy and args.strategy != "serial":
        strategies = [args.strategy]
    else:
        strategies = ["rtp-inplace", "rtp-outofplace"]
    exp.batch_size = exp.n_workers * batches[0]
    exp.validate()
    model = exp.runnable_model()
    series = {s: batch_sweep(model, s, exp.n_workers, batches, exp.seed, exp.transport) for s in strategies}
    _emit(args, sweep_csv(series, exp.n_workers))
    bad = [s for s, pts in series.items() if not collinear(pts)]
    if bad:
        print(f"points are not collinear for {bad}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "memtable": cmd_memtable,
    "ledger": cmd_ledger,
    "timeline": cmd_timeline,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        exp = build_config(args)
        return COMMANDS[args.command](args, exp)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
