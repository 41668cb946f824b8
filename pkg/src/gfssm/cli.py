"""Command-line experiment runner.

Usage:
  gfssm equiv-check --T 32 --Q 4 --n 4 --runs 100 --seed 7 --out equiv.csv
  gfssm stability --a-list 0.9,0.99,0.999 --T-list 256,1024 --Q-list 1,4 --out sweep.csv
  gfssm grad-check --seed 1
  gfssm train --task selective_copy --steps 2000 --out loss.csv --metrics metrics.json
  gfssm stream-check --T 96 --chunk 16
  gfssm bench --T 64,256,1024

Every subcommand also takes ``--config FILE`` with ``key = value`` lines
(flag names, dashes or underscores); flags given on the command line win.

Exit status: 0 success, 1 property violation, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import gfssm_kernel as gk
from . import grad_train as gt
from . import sink_streaming as ss
from . import stability_lab as sl
from .rng import Xoshiro256
from .ssd_core import SsdInstance, random_instance, resolve_dtype, ssd_matrix_form, ssd_scan_recurrent

SCHEMA_VERSION = 1

EQUIV_COLUMNS = (
    "run", "seed", "T", "Q", "n", "N", "P",
    "ssd_max_err", "gfssm_max_err", "reduction_max_err", "max_err", "pass",
)
BENCH_COLUMNS = ("T", "path", "seconds")
LOSS_COLUMNS = ("step", "loss", "grad_norm")

SCAN_EXPONENT_BAND = (0.8, 1.3)
MATRIX_EXPONENT_BAND = (1.7, 2.3)


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"invalid number list {text!r}")
    return vals


def _seed(text: str) -> int:
    val = int(text, 0)
    if not -(1 << 63) <= val < (1 << 64):
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return val


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _write_csv(path, columns, rows) -> None:
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return value


def _write_json(path, doc) -> None:
    text = json.dumps({"schema_version": SCHEMA_VERSION, **doc}, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _map(func, items, jobs: int):
    if jobs <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def _derive_seeds(seed: int, count: int) -> list[int]:
    master = Xoshiro256(seed)
    return [master.next_u64() for _ in range(count)]


def _default_precision() -> str:
    return os.environ.get("GFSSM_PRECISION", "double")


def _require_positive(args, names) -> None:
    for name in names:
        val = getattr(args, name)
        if val is None or val < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {val}")


# --- equiv-check ------------------------------------------------------------

def _equiv_run(job) -> dict:
    run, seed, T, Q, n, N, P, precision = job
    rng = Xoshiro256(seed)
    base = random_instance(rng, T, N, P)
    fir = gk.FirCoefficients(rng.uniform(-1.0, 1.0, n))
    base = base.astype(precision)
    ssd_err = float(np.max(np.abs(ssd_scan_recurrent(base)[0] - ssd_matrix_form(base))))
    inst = gk.GfssmInstance(base, gk.GroupConfig(Q, n), fir)
    gf_err = float(np.max(np.abs(gk.grouped_scan(inst)[0] - gk.gfssm_matrix_form(inst))))
    red_err = None
    if Q == 1 and n == 1:
        ident = gk.GfssmInstance(base, gk.GroupConfig(1, 1), gk.FirCoefficients.identity(1))
        red_err = float(np.max(np.abs(gk.grouped_scan(ident)[0] - ssd_scan_recurrent(base)[0])))
    return {
        "run": run, "seed": seed, "T": T, "Q": Q, "n": n, "N": N, "P": P,
        "ssd_max_err": ssd_err, "gfssm_max_err": gf_err,
        "reduction_max_err": "" if red_err is None else red_err,
    }


def cmd_equiv_check(args) -> int:
    _require_positive(args, ("T", "Q", "n", "N", "P", "runs"))
    precision = args.precision
    tol = args.tol if args.tol is not None else (1e-12 if precision == "double" else 1e-4)
    red_tol = 1e-15 if precision == "double" else 0.0
    seeds = _derive_seeds(args.seed, args.runs)
    jobs = [(r, s, args.T, args.Q, args.n, args.N, args.P, precision) for r, s in enumerate(seeds)]
    rows = _map(_equiv_run, jobs, args.jobs)
    ok = True
    for row in rows:
        red = row["reduction_max_err"]
        row["max_err"] = max(row["ssd_max_err"], row["gfssm_max_err"])
        row["pass"] = row["max_err"] <= tol and (red == "" or red <= red_tol)
        ok &= row["pass"]
    _write_csv(args.out, EQUIV_COLUMNS, rows)
    worst = max(r["max_err"] for r in rows)
    print(f"equiv-check: {args.runs} runs, max_err={worst:.3e}, tol={tol:.1e}, {'PASS' if ok else 'FAIL'}",
          file=sys.stderr)
    return 0 if ok else 1


# --- stability --------------------------------------------------------------

def _stability_point(job) -> dict:
    a, T, Q, n, seed, allow = job
    return sl.sweep_point(a, T, Q, n, seed, allow_explosion=allow)


def cmd_stability(args) -> int:
    if any(T < 2 for T in args.T_list) or any(Q < 1 for Q in args.Q_list) or args.n < 1:
        raise UsageError("sweep needs T >= 2, Q >= 1, n >= 1")
    if any(not 0 <= a <= 1 for a in args.a_list) and not args.allow_explosion:
        raise UsageError("decays outside [0, 1] need --allow-explosion")
    jobs = [(a, T, Q, args.n, args.seed, args.allow_explosion) for a in args.a_list for T in args.T_list for Q in args.Q_list]
    rows = _map(_stability_point, jobs, args.jobs)
    _write_csv(args.out, sl.SWEEP_COLUMNS, rows)
    return 0


# --- grad-check -------------------------------------------------------------

def _grad_run(job) -> dict:
    run, seed, T_max, Q_max, n_max, N, P, eps = job
    rng = Xoshiro256(seed)
    T = rng.integers(1, T_max + 1)
    Q = rng.integers(1, Q_max + 1)
    n = rng.integers(1, n_max + 1)
    inst, bank = gt.random_layer(rng, T, N, P, gk.GroupConfig(Q, n))
    up = rng.uniform(-1.0, 1.0, (T, P))
    lg = gt.gfssm_backward(inst, bank, up)
    errs = {}
    for name in gt.PARAM_NAMES:
        fd = gt.finite_diff_grad(name, inst, bank, up, eps=eps)
        errs[name] = gt.max_relative_error(lg.get(name), fd)
    return {"run": run, "seed": seed, "T": T, "Q": Q, "n": n, "max_rel_err": max(errs.values()), "per_param": errs}


def _degenerate_checks(N: int, P: int) -> dict[str, bool]:
    rng = Xoshiro256(0)
    inst, bank = gt.random_layer(rng, 8, N, P, gk.GroupConfig(4, 4))
    zero_up = gt.gfssm_backward(inst, bank, np.zeros((8, P)))
    upstream_zero = all(not np.any(zero_up.get(name)) for name in gt.PARAM_NAMES)
    base = inst.base
    silent = gk.GfssmInstance(
        SsdInstance(base.a, base.B, base.C, np.zeros_like(base.x)), inst.cfg, inst.fir
    )
    silent_bank = ss.PromptBank(np.zeros_like(bank.prompts), bank.prompt_B)
    g = gt.gfssm_backward(silent, silent_bank, rng.uniform(-1.0, 1.0, (8, P)))
    return {"zero_upstream": upstream_zero, "zero_input_grad_k": not np.any(g.grad_k)}


def cmd_grad_check(args) -> int:
    _require_positive(args, ("T", "Q", "n", "N", "P", "runs"))
    seeds = _derive_seeds(args.seed, args.runs)
    jobs = [(r, s, args.T, args.Q, args.n, args.N, args.P, args.eps) for r, s in enumerate(seeds)]
    runs = _map(_grad_run, jobs, args.jobs)
    worst = max(r["max_rel_err"] for r in runs)
    degenerate = _degenerate_checks(args.N, args.P)
    ok = worst < args.tol and all(degenerate.values())
    _write_json(args.out, {
        "command": "grad-check", "seed": args.seed, "eps": args.eps, "tol": args.tol,
        "max_rel_err": worst, "degenerate": degenerate, "runs": runs, "pass": ok,
    })
    print(f"grad-check: max_rel_err={worst:.3e} (tol {args.tol:.1e}) {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    return 0 if ok else 1


# --- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    _require_positive(args, ("T", "Q", "n", "N", "P", "batch", "steps", "vocab"))
    try:
        task = gt.ToyTask(args.task, args.vocab, args.T, args.seed, n_tokens=args.n_tokens)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = gt.ModelConfig(Q=args.Q, n=args.n, N=args.N, P=args.P, batch=args.batch,
                         clip=args.clip if args.clip > 0 else None)
    result = gt.train_toy(task, cfg, args.steps, args.lr, args.seed)
    rows = [{"step": i, "loss": l, "grad_norm": g} for i, (l, g) in enumerate(zip(result.losses, result.grad_norms))]
    _write_csv(args.out, LOSS_COLUMNS, rows)
    metrics = {
        "command": "train", "task": args.task, "seed": args.seed, "Q": args.Q, "n": args.n,
        "steps": args.steps, "lr": args.lr, "initial_loss": result.initial_loss,
        "final_loss": result.final_loss, "final_eval_loss": result.final_eval_loss,
        "final_accuracy": result.final_accuracy, "failed": result.failed, "failed_step": result.failed_step,
    }
    if args.metrics:
        _write_json(args.metrics, metrics)
    print(f"train: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}, "
          f"eval acc {result.final_accuracy:.3f}", file=sys.stderr)
    return 1 if result.failed else 0


# --- stream-check -----------------------------------------------------------

def cmd_stream_check(args) -> int:
    _require_positive(args, ("T", "Q", "n", "N", "P"))
    if any(c < 1 for c in args.chunk):
        raise UsageError("--chunk sizes must be >= 1")
    dt = resolve_dtype(args.precision)
    tol = args.tol if args.tol is not None else (1e-12 if args.precision == "double" else 1e-4)
    rng = Xoshiro256(args.seed)
    inst, bank = gt.random_layer(rng, args.T, args.N, args.P, gk.GroupConfig(args.Q, args.n), a_range=(0.0, 1.0))
    ref = ss.monolithic(inst, bank)  # double-precision reference
    inst_p, bank_p = inst.astype(dt), bank.astype(dt)
    results = {}
    worst = 0.0
    for c in args.chunk:
        for method in ("scan", "matrix"):
            y = ss.stream(inst_p, bank_p, c, method=method)
            err = float(np.max(np.abs(y.astype(np.float64) - ref)))
            results[f"chunk={c},{method}"] = err
            worst = max(worst, err)
    # suspend/resume through the binary cache format
    first = min(args.chunk[0], args.T)
    y0, cache = ss.init_fresh(bank_p, gk.GfssmInstance(inst_p.base.slice(0, first), inst_p.cfg, inst_p.fir))
    blob = ss.cache_to_bytes(cache)
    if args.cache_out:
        Path(args.cache_out).write_bytes(blob)
    resumed = ss.cache_from_bytes(blob, dtype=dt)
    roundtrip_exact = bool(
        np.array_equal(resumed.h_cached, cache.h_cached) and np.array_equal(resumed.tap_cache, cache.tap_cache)
    )
    ok = worst <= tol and roundtrip_exact
    _write_json(args.out, {
        "command": "stream-check", "T": args.T, "Q": args.Q, "n": args.n, "precision": args.precision,
        "tol": tol, "max_divergence": worst, "per_chunk": results, "cache_roundtrip_exact": roundtrip_exact,
        "pass": ok,
    })
    print(f"stream-check: max divergence {worst:.3e} (tol {tol:.1e}) {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    return 0 if ok else 1


# --- bench ------------------------------------------------------------------

def time_paths(T_values, Q=4, n=4, N=2, P=1, repeats=3, seed=0) -> list[dict]:
    """Best-of-``repeats`` wall time of the scan and the materialized form per T."""
    rows = []
    for T in T_values:
        rng = Xoshiro256(seed)
        inst = gk.GfssmInstance(random_instance(rng, T, N, P), gk.GroupConfig(Q, n),
                                gk.FirCoefficients(rng.uniform(-1.0, 1.0, n)))
        for path, fn in (("scan", lambda: gk.grouped_scan(inst)), ("matrix", lambda: gk.gfssm_matrix_form(inst))):
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            rows.append({"T": T, "path": path, "seconds": best})
    return rows


def fit_exponent(rows, path: str) -> float:
    pts = [(r["T"], r["seconds"]) for r in rows if r["path"] == path]
    logT = np.log([p[0] for p in pts])
    logt = np.log([p[1] for p in pts])
    return float(np.polyfit(logT, logt, 1)[0])


def cmd_bench(args) -> int:
    if len(args.T) < 2 or any(T < 1 for T in args.T):
        raise UsageError("--T needs at least two positive lengths")
    _require_positive(args, ("Q", "n", "N", "P", "repeats"))
    rows = time_paths(args.T, args.Q, args.n, args.N, args.P, args.repeats, args.seed)
    _write_csv(args.out, BENCH_COLUMNS, rows)
    scan_exp, mat_exp = fit_exponent(rows, "scan"), fit_exponent(rows, "matrix")
    ok = SCAN_EXPONENT_BAND[0] <= scan_exp <= SCAN_EXPONENT_BAND[1] and \
        MATRIX_EXPONENT_BAND[0] <= mat_exp <= MATRIX_EXPONENT_BAND[1]
    print(f"bench: scan exponent {scan_exp:.2f}, matrix exponent {mat_exp:.2f} {'PASS' if ok else 'FAIL'}",
          file=sys.stderr)
    return 0 if ok else 1


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfssm", description="GFSSM verification and experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=True):
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--out", default=None, help="output path (default: stdout)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1)

    def dims(p, T=32, Q=4, n=4, N=4, P=2):
        p.add_argument("--T", type=int, default=T)
        p.add_argument("--Q", type=int, default=Q)
        p.add_argument("--n", type=int, default=n)
        p.add_argument("--N", type=int, default=N)
        p.add_argument("--P", type=int, default=P)

    def precision(p):
        p.add_argument("--precision", choices=("single", "double"), default=_default_precision())

    p = sub.add_parser("equiv-check", help="scan vs materialized-matrix equivalence")
    common(p)
    dims(p)
    precision(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_equiv_check)

    p = sub.add_parser("stability", help="dynamic range / precision divergence sweep")
    common(p)
    p.add_argument("--a-list", dest="a_list", type=_float_list, default=[0.9, 0.99, 0.999])
    p.add_argument("--T-list", dest="T_list", type=_int_list, default=[256, 1024])
    p.add_argument("--Q-list", dest="Q_list", type=_int_list, default=[1, 4])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--allow-explosion", dest="allow_explosion", action="store_true")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("grad-check", help="analytic backward vs central differences")
    common(p)
    dims(p, T=16, Q=4, n=4, N=3, P=2)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="SGD on a synthetic recall task")
    common(p, jobs=False)
    dims(p, T=32, Q=4, n=4, N=8, P=16)
    p.add_argument("--task", choices=("selective_copy", "delayed_recall"), default="selective_copy")
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--n-tokens", dest="n_tokens", type=int, default=4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--clip", type=float, default=1.0, help="gradient-norm clip; 0 disables")
    p.add_argument("--metrics", default=None, help="JSON metrics path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stream-check", help="chunked streaming vs monolithic processing")
    common(p, jobs=False)
    dims(p, T=96)
    precision(p)
    p.add_argument("--chunk", type=_int_list, default=[16])
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--cache-out", dest="cache_out", default=None, help="write the first-chunk cache here")
    p.set_defaults(func=cmd_stream_check)

    p = sub.add_parser("bench", help="scan vs materialized-matrix timing")
    common(p, jobs=False)
    p.add_argument("--T", type=_int_list, default=[64, 256, 1024])
    p.add_argument("--Q", type=int, default=4)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--N", type=int, default=2)
    p.add_argument("--P", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = read_config(args.config)
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    except UsageError as exc:
        parser.error(str(exc))
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")
    for action in subparser._actions:
        if action.dest in values and isinstance(action, argparse._StoreTrueAction):
            flag = values[action.dest].lower()
            if flag not in ("true", "false", "1", "0", "yes", "no"):
                parser.error(f"{action.dest}: expected a boolean, got {values[action.dest]!r}")
            values[action.dest] = flag in ("true", "1", "yes")
    # string defaults are run through each option's type by argparse
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _apply_config(parser, argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
