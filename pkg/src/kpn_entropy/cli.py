"""Command-line front end: ``kpn-entropy {estimate,bench-*,diagnostics}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import _backend
from .bench import ExperimentPlan, raw_to_csv, rows_to_csv, run_plan
from .distributions import table_one
from .estimators import EstimatorConfig, estimate_kl, estimate_kpn

log = logging.getLogger("kpn_entropy")


class CsvParseError(ValueError):
    pass


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_samples(path: str) -> np.ndarray:
    """Samples from a CSV file, one row per sample.

    A first row containing any non-numeric cell is taken as a header.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in row]
            if not cells or all(c == "" for c in cells):
                continue
            if not rows and width is None and not all(_is_number(c) for c in cells):
                width = len(cells)
                continue
            if width is None:
                width = len(cells)
            if len(cells) != width:
                raise CsvParseError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise CsvParseError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    if not rows:
        raise CsvParseError(f"{path}: no samples")
    return np.array(rows)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip().lower() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpn-entropy", description="kNN entropy estimation (KL and kpN)."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate the entropy of samples in a CSV file")
    est.add_argument("input", help="CSV file, rows = samples, columns = dimensions")
    est.add_argument("--method", choices=["kpn", "kl"], default="kpn")
    est.add_argument("--k", type=int, default=4)
    est.add_argument("--p", type=int, default=None, help="local-fit size (default: 2%% of N)")
    est.add_argument("--exclude-self", action="store_true",
                     help="fit the local Gaussian without the sample itself")
    est.add_argument("--format", choices=["text", "json"], default="text")
    est.add_argument("--out", help="write the report here instead of stdout")
    est.add_argument("--threads", type=int)

    defaults = {
        "bench-grid": dict(n="8000", k="3,4,5", p_frac="0.02,0.05", ensembles=50),
        "bench-dims": dict(n="10000", k="4", p_frac="0.02", ensembles=50),
        "bench-manifold": dict(n="5000", k="4", p_frac="0.02", ensembles=50),
    }
    for name, dflt in defaults.items():
        b = sub.add_parser(name, help=f"run the {name[6:]} benchmark and write CSV")
        b.add_argument("--seed", type=int, required=True, help="base seed (member j uses seed+j)")
        b.add_argument("--n", type=_int_list, default=_int_list(dflt["n"]))
        b.add_argument("--k", type=_int_list, default=_int_list(dflt["k"]))
        b.add_argument("--p-frac", type=_float_list, default=_float_list(dflt["p_frac"]))
        b.add_argument("--ensembles", type=int, default=dflt["ensembles"])
        b.add_argument("--out", help="CSV output path (default stdout)")
        b.add_argument("--raw", help="also write per-member estimates here")
        b.add_argument("--threads", type=int)
        b.add_argument("--workers", type=int, default=1, help="processes for ensemble members")
        b.add_argument("--no-timing", action="store_true",
                       help="write 0 in wall_time_s so reruns are byte-identical")
        if name == "bench-grid":
            b.add_argument("--family", type=_str_list, default=("gaussian", "gamma", "beta"))
        elif name == "bench-dims":
            b.add_argument("--family", type=_str_list, default=("gaussian", "gamma", "beta"))
            b.add_argument("--dims", type=_int_list, default=(4, 8, 16, 40, 80))
        else:
            b.add_argument("--noise", type=_float_list, default=(1e-1, 1e-3))
            b.add_argument("--m", type=_int_list, default=tuple(range(1, 10)),
                           help="observation counts (joint dimension m+1)")

    diag = sub.add_parser("diagnostics", help="run self-checks against independent oracles")
    diag.add_argument("--replicates", type=int, default=500)
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--ep-tol", type=float, default=None)
    return parser


def _plan_from_args(args, parser) -> ExperimentPlan:
    kind = {"bench-grid": "grid", "bench-dims": "dims", "bench-manifold": "manifold"}[args.command]
    common = dict(
        n_values=args.n,
        k_values=args.k,
        p_frac_values=args.p_frac,
        ensembles=args.ensembles,
        base_seed=args.seed,
        workers=args.workers,
    )
    if any(n < 3 for n in args.n) or any(k < 1 for k in args.k):
        parser.error("need n >= 3 and k >= 1")
    if any(k >= n for k in args.k for n in args.n):
        parser.error("every k must be below every n")
    try:
        if kind == "grid":
            known = {s.family: s for s in table_one()}
            unknown = set(args.family) - set(known)
            if unknown:
                parser.error(f"unknown family {sorted(unknown)}; choose from {sorted(known)}")
            return ExperimentPlan(kind, specs=tuple(known[f] for f in args.family), **common)
        if kind == "dims":
            bad = set(args.family) - {"gaussian", "gamma", "beta"}
            if bad:
                parser.error(f"unknown family {sorted(bad)}")
            if any(d < 1 for d in args.dims):
                parser.error("dimensions must be positive")
            return ExperimentPlan(kind, families=args.family, dim_values=args.dims, **common)
        if any(v <= 0 for v in args.noise) or any(m < 1 for m in args.m):
            parser.error("noise variances and observation counts must be positive")
        return ExperimentPlan(kind, noise_values=args.noise, m_values=args.m, **common)
    except ValueError as exc:
        parser.error(str(exc))


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def format_report(report, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    lines = [
        f"method      {report.method}",
        f"n           {report.n}",
        f"d           {report.d}",
        f"k           {report.k}",
    ]
    if report.p is not None:
        lines.append(f"p           {report.p}")
    lines.append(f"estimate    {report.estimate!r} nats")
    lines.append(f"  psi(N)-psi(k)  {report.term_psi!r}")
    for name, val in report.term_geom.items():
        lines.append(f"  {name}  {val!r}")
    if report.method == "kpN":
        lines.append(f"ep_nonconverged  {report.ep_nonconverged_count}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args, parser) -> int:
    x = read_samples(args.input)
    n = x.shape[0]
    if n < 2:
        parser.error("need at least 2 samples")
    if not 1 <= args.k <= n - 1:
        parser.error(f"--k must lie in [1, {n - 1}]")
    if args.method == "kl":
        report = estimate_kl(x, args.k)
    else:
        p = args.p if args.p is not None else min(n - 1, max(args.k, 2, round(0.02 * n)))
        if not max(args.k, 2) <= p <= n - 1:
            parser.error(f"--p must lie in [max(k, 2), {n - 1}]")
        report = estimate_kpn(x, EstimatorConfig(args.k, p, include_self=not args.exclude_self))
    _write(format_report(report, args.format), args.out)
    return 0


def cmd_bench(args, parser) -> int:
    plan = _plan_from_args(args, parser)
    rows = run_plan(plan)
    _write(rows_to_csv(rows, timing=not args.no_timing), args.out)
    if args.raw:
        _write(raw_to_csv(rows), args.raw)
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"error in {r.experiment} ({r.method}): {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_diagnostics(args) -> int:
    from . import diagnostics

    kw = {} if args.ep_tol is None else {"ep_tol": args.ep_tol}
    results = diagnostics.run_all(replicates=args.replicates, seed=args.seed, **kw)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = getattr(args, "threads", None)
    if threads is None:
        try:
            threads = _backend.threads_from_env()
        except ValueError:
            parser.error("ENTROPY_KPN_THREADS must be an integer")
    if threads is not None and threads < 1:
        parser.error("thread count must be >= 1")
    _backend.set_threads(threads)
    try:
        if args.command == "estimate":
            return cmd_estimate(args, parser)
        if args.command == "diagnostics":
            return cmd_diagnostics(args)
        return cmd_bench(args, parser)
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
