"""Command-line entry point: ``cvsim <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.
``CVSIM_CONFIG`` names a machine config file used when ``--config`` is
not given.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from cvsim import formats, kernels, sweep, timing
from cvsim.vvm import Trace

CONFIG_ENV = "CVSIM_CONFIG"


class UsageError(Exception):
    pass


def _write(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _read(path: str | Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_trace(path: str) -> Trace:
    try:
        with open(path) as f:
            return Trace.read_csv(f)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_config(path: str | None) -> timing.MachineConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return timing.MachineConfig()
    try:
        return timing.MachineConfig.from_text(_read(path))
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ── commands ────────────────────────────────────────────────────────────


def cmd_accuracy(args) -> int:
    modes = ["zeropad", "replicate"] if args.mode == "both" else [args.mode]
    out = Path(args.out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    draw = formats.SAMPLERS[args.sampler]
    samples = draw(np.random.default_rng(args.seed), args.n)
    for mode in modes:
        hist = formats.error_density(mode, n=args.n, bins=args.bins, seed=args.seed,
                                     samples=samples)
        path = out / f"accuracy_{mode}.csv"
        _write(path, hist.to_csv())
        print(f"{mode:<10} mean relative error {hist.mean:.6e}  max {hist.max:.6e}  -> {path}")
    return 0


def cmd_gemm(args) -> int:
    spec = kernels.KernelSpec(args.n, args.mode, args.vlen, args.fill)
    if args.init == "identity":
        a = kernels.identity(args.n, args.mode)
        _, b = kernels.random_operands(args.n, args.seed, args.mode)
    else:
        a, b = kernels.random_operands(args.n, args.seed, args.mode)
    run = kernels.run_gemm(a, b, spec)
    census = kernels.instruction_census(run.trace)
    print(f"gemm n={args.n} vlen={args.vlen} mode={args.mode} fill={args.fill} "
          f"seed={args.seed}: {len(run.trace)} vector instructions")
    for m, c in census.items():
        print(f"  {m:<11} {c}")
    moved = int(run.trace.column("bytes").sum())
    print(f"  bytes moved {moved}")
    if args.trace_out:
        try:
            with open(args.trace_out, "w") as f:
                run.trace.write_csv(f)
        except OSError as exc:
            raise UsageError(f"cannot write {args.trace_out}: {exc.strerror or exc}") from None
    if args.c_out:
        try:
            Path(args.c_out).write_bytes(run.c.to_bytes())
        except OSError as exc:
            raise UsageError(f"cannot write {args.c_out}: {exc.strerror or exc}") from None
    if args.init == "identity":
        same = run.c == b
        print(f"identity check: C {'==' if same else '!='} B")
        if args.check and not same:
            return 1
    if args.check:
        expected = kernels.oracle(a, b, spec)
        bad = int(np.count_nonzero(expected.data != run.c.data))
        print(f"oracle check: {'ok' if not bad else f'{bad} mismatching elements'}")
        return 1 if bad else 0
    return 0


def cmd_census(args) -> int:
    trace = _load_trace(args.trace)
    census = kernels.instruction_census(trace)
    print("mnemonic,count")
    for m, c in census.items():
        print(f"{m},{c}")
    return 0


def cmd_simulate(args) -> int:
    trace = _load_trace(args.trace)
    config = _load_config(args.config)
    if args.rob is not None:
        config = config.replace(rob_entries=args.rob)
    try:
        report = timing.simulate(trace, config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(report.summary())
    if config.rob_entries == 1:
        agree = report.total_cycles == report.serialized_cycles
        print(f"rob=1 cross-check: total {report.total_cycles} vs serialized "
              f"{report.serialized_cycles} -> {'ok' if agree else 'MISMATCH'}")
        if not agree:
            return 1
    if args.baseline:
        base = timing.simulate(_load_trace(args.baseline), config)
        res = timing.ImprovementResult(report.total_cycles, base.total_cycles)
        ineq = timing.check_inequalities(report, base)
        print(f"improvement {res.improvement:.4f}%  (cycles_c {res.cycles_c}, "
              f"cycles_u {res.cycles_u})")
        c = ineq.components
        print(f"load side  t_cload + t_unpack = {c['t_cload'] + c['t_unpack']} "
              f"< t_load = {c['t_load']}: {ineq.load_side}")
        print(f"store side t_pack + t_cstore = {c['t_pack'] + c['t_cstore']} "
              f"< t_store = {c['t_store']}: {ineq.store_side}")
    if args.out:
        _write(args.out, report.to_csv())
    return 0


def cmd_sweep(args) -> int:
    if bool(args.spec) == bool(args.preset):
        raise UsageError("give exactly one of --spec or --preset")
    try:
        if args.spec:
            spec = sweep.SweepSpec.from_text(_read(args.spec))
        else:
            spec = sweep.PRESETS[args.preset]()
        if args.cap is not None:
            spec.cap = args.cap
            spec.__post_init__()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = sweep.run_sweep(spec, workers=args.workers)
    text = sweep.rows_to_csv(rows)
    if args.out:
        _write(args.out, text)
        print(f"{len(rows)} rows -> {args.out}")
    else:
        sys.stdout.write(text)
    if args.posit_cycles is not None:
        try:
            budgets = sweep.posit_whatif(rows, args.posit_cycles)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for b in budgets:
            where = " ".join(f"{k}={v}" for k, v in b.point.items())
            cross = "n/a" if b.crossing is None else f"{b.crossing:.1f}"
            print(f"{where}: budget {b.budget:g}{'+' if b.lower_bound else ''} cycles, "
                  f"crossing {cross}, posit@{b.posit_cycles} -> "
                  f"{b.posit_improvement:.1f}% {'viable' if b.viable else 'not viable'}")
    return 0


def cmd_posit_check(args) -> int:
    try:
        fmt = formats.PositFormat(args.nbits, args.esbits)
        report = formats.posit_check(fmt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{fmt}: {report.checked} non-special patterns verified, "
          f"{len(report.violations)} violations")
    for p, why in report.violations:
        print(f"  {p:#0{fmt.nbits // 4 + 2}x}: {why}")
    return 0 if report.ok else 1


# ── parser ──────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cvsim",
        description="In-register bfloat16 compression on a virtual vector machine.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("accuracy", help="bfloat16 round-trip error histograms")
    a.add_argument("--mode", choices=["zeropad", "replicate", "both"], default="both",
                   help="decompression fill (default: both)")
    a.add_argument("--n", type=int, default=10**6, help="number of samples (default 1e6)")
    a.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    a.add_argument("--bins", type=int, default=64, help="histogram bins (default 64)")
    a.add_argument("--sampler", choices=sorted(formats.SAMPLERS), default="normal",
                   help="sample distribution (default normal)")
    a.add_argument("--out", default=".", help="output directory for accuracy_<mode>.csv")
    a.set_defaults(func=cmd_accuracy)

    g = sub.add_parser("gemm", help="run a GEMM kernel on the vector machine")
    g.add_argument("--n", type=int, default=128, help="matrix size (default 128)")
    g.add_argument("--vlen", type=int, default=16384, help="VLEN in bits (default 16384)")
    g.add_argument("--mode", choices=["compressed", "uncompressed"], default="compressed")
    g.add_argument("--fill", choices=["zeropad", "replicate"], default="zeropad",
                   help="bfloat16 widening fill (compressed mode)")
    g.add_argument("--seed", type=int, default=0, help="operand RNG seed (default 0)")
    g.add_argument("--init", choices=["random", "identity"], default="random",
                   help="A operand: random or the identity matrix")
    g.add_argument("--trace-out", help="write the instruction trace CSV here")
    g.add_argument("--c-out", help="write the result matrix (binary) here")
    g.add_argument("--check", action="store_true",
                   help="compare against the scalar oracle; exit 1 on mismatch")
    g.set_defaults(func=cmd_gemm)

    c = sub.add_parser("census", help="count instructions per mnemonic in a trace")
    c.add_argument("--trace", required=True, help="trace CSV")
    c.set_defaults(func=cmd_census)

    s = sub.add_parser("simulate", help="time a trace on a machine config")
    s.add_argument("--trace", required=True, help="trace CSV")
    s.add_argument("--config", help=f"machine config file (default ${CONFIG_ENV} or built-in)")
    s.add_argument("--rob", type=int, help="override rob_entries")
    s.add_argument("--baseline", help="uncompressed trace; report improvement and inequalities")
    s.add_argument("--out", help="write the timing report CSV here")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a parameter sweep")
    w.add_argument("--spec", help="sweep spec file")
    w.add_argument("--preset", choices=sorted(sweep.PRESETS), help="built-in experiment grid")
    w.add_argument("--cap", type=int, help=f"grid size cap (default {sweep.DEFAULT_CAP})")
    w.add_argument("--workers", type=int, help="parallel workers (default: CPU count)")
    w.add_argument("--posit-cycles", type=int,
                   help="also report the latency budget for a posit converter of this cost")
    w.add_argument("--out", help="sweep CSV path (default stdout)")
    w.set_defaults(func=cmd_sweep)

    k = sub.add_parser("posit-check", help="exhaustively verify a posit format")
    k.add_argument("--nbits", type=int, default=16)
    k.add_argument("--esbits", type=int, default=2)
    k.set_defaults(func=cmd_posit_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cvsim {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"cvsim {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
