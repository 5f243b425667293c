"""Ensemble benchmarks of the KL and kpN estimators against analytic entropies.

A plan expands into cells (one distribution, N, k and p/N each).  Every cell
draws ``ensembles`` independent sample sets, member ``j`` seeded with
``base_seed + j``, and both estimators share one neighbour search per member.
Relative errors are ``100 |H* - H| / |H*|`` (percent); the variance column is
the variance of that percent error over members.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import DistributionSpec, analytic_entropy, dimension_ramp, sample
from .estimators import EstimatorConfig, estimate_both

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "experiment,method,family,n,d,k,p,ensembles,analytic_entropy,"
    "mean_rel_err_pct,var_rel_err_pct,mean_abs_err,ep_nonconverged,wall_time_s"
).split(",")
RAW_COLUMNS = ["experiment", "member", "seed", "estimate"]
METHODS = ("KL", "kpN")
KINDS = ("grid", "dims", "manifold")


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run.

    ``grid`` uses ``specs``; ``dims`` builds ramps from ``families`` x
    ``dim_values``; ``manifold`` builds linear manifolds from
    ``noise_values`` x ``m_values``.  Every distribution is crossed with
    ``n_values`` x ``k_values`` x ``p_frac_values``.
    """

    kind: str
    specs: tuple = ()
    families: tuple = ()
    dim_values: tuple = ()
    noise_values: tuple = ()
    m_values: tuple = tuple(range(1, 10))
    n_values: tuple = (10000,)
    k_values: tuple = (4,)
    p_frac_values: tuple = (0.02,)
    ensembles: int = 50
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plan kind {self.kind!r}")
        if self.ensembles < 1:
            raise ValueError("ensembles must be >= 1")
        needed = {
            "grid": ("specs",),
            "dims": ("families", "dim_values"),
            "manifold": ("noise_values", "m_values"),
        }[self.kind]
        for name in needed + ("n_values", "k_values", "p_frac_values"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} must not be empty")
        if any(not 0 < f < 1 for f in self.p_frac_values):
            raise ValueError("p/N fractions must lie in (0, 1)")

    def distributions(self) -> list[DistributionSpec]:
        if self.kind == "grid":
            return list(self.specs)
        if self.kind == "dims":
            return [dimension_ramp(f, d) for f in self.families for d in self.dim_values]
        return [
            DistributionSpec.linear_manifold(m, s, label=f"manifold-m{m}-noise{s:g}")
            for s in self.noise_values
            for m in self.m_values
        ]


@dataclass(frozen=True)
class Cell:
    experiment: str
    spec: DistributionSpec
    n: int
    k: int
    p: int


@dataclass
class ResultRow:
    experiment: str
    method: str
    family: str
    n: int
    d: int
    k: int
    p: int
    ensembles: int
    analytic_entropy: float
    mean_rel_err_pct: float
    var_rel_err_pct: float
    mean_abs_err: float
    ep_nonconverged: int
    wall_time_s: float
    estimates: list = field(default_factory=list, repr=False)
    seeds: list = field(default_factory=list, repr=False)
    error: str | None = None

    def csv_values(self, timing: bool = True) -> list[str]:
        vals = [getattr(self, c) for c in CSV_COLUMNS]
        if not timing:
            vals[-1] = 0.0
        return [repr(float(v)) if isinstance(v, float) else str(v) for v in vals]


def local_size(n: int, k: int, d: int, p_frac: float) -> int:
    """``round(p_frac * n)`` raised to at least ``max(k, d + 2)``."""
    return min(n - 1, max(int(round(p_frac * n)), k, d + 2))


def expand(plan: ExperimentPlan) -> list[Cell]:
    cells = []
    for spec in plan.distributions():
        name = spec.label or f"{spec.family}-{spec.dim}d"
        for n in plan.n_values:
            for k in plan.k_values:
                for frac in plan.p_frac_values:
                    p = local_size(n, k, spec.dim, frac)
                    exp = f"{plan.kind}/{name}/n{n}/k{k}/pf{frac:g}"
                    cells.append(Cell(exp, spec, int(n), int(k), p))
    return cells


def _member(args):
    spec, n, k, p, seed = args
    s = sample(spec, n, seed)
    kl, kpn = estimate_both(s, EstimatorConfig(k, p))
    return kl.estimate, kpn.estimate, kpn.ep_nonconverged_count


def _run_members(tasks, workers):
    if workers <= 1 or len(tasks) == 1:
        return [_member(t) for t in tasks]
    # spawn, not fork: forking after numba has started OpenMP threads aborts
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        # map yields in submission order, i.e. member order
        return list(pool.map(_member, tasks))


def _stats(h_true, estimates):
    est = np.asarray(estimates, dtype=float)
    abs_err = np.abs(h_true - est)
    rel = 100.0 * abs_err / abs(h_true)
    return (
        math.fsum(rel) / rel.size,
        float(np.var(rel)),
        math.fsum(abs_err) / abs_err.size,
    )


def run_cell(cell: Cell, plan: ExperimentPlan) -> list[ResultRow]:
    """Both methods' aggregate rows for one cell (failure rows on error)."""
    h_true = analytic_entropy(cell.spec).value
    seeds = [plan.base_seed + j for j in range(plan.ensembles)]
    tasks = [(cell.spec, cell.n, cell.k, cell.p, sd) for sd in seeds]
    common = dict(
        experiment=cell.experiment,
        family=cell.spec.family,
        n=cell.n,
        d=cell.spec.dim,
        k=cell.k,
        p=cell.p,
        ensembles=plan.ensembles,
        analytic_entropy=h_true,
    )
    t0 = time.perf_counter()
    try:
        results = _run_members(tasks, plan.workers)
    except Exception as exc:  # one bad cell must not abort the plan
        log.error("cell %s failed: %s", cell.experiment, exc)
        nan = float("nan")
        return [
            ResultRow(method=m, mean_rel_err_pct=nan, var_rel_err_pct=nan, mean_abs_err=nan,
                      ep_nonconverged=0, wall_time_s=time.perf_counter() - t0,
                      error=f"{type(exc).__name__}: {exc}", **common)
            for m in METHODS
        ]
    wall = time.perf_counter() - t0
    nonconv = sum(r[2] for r in results)
    rows = []
    for col, method in enumerate(METHODS):
        est = [r[col] for r in results]
        mean_rel, var_rel, mean_abs = _stats(h_true, est)
        rows.append(
            ResultRow(method=method, mean_rel_err_pct=mean_rel, var_rel_err_pct=var_rel,
                      mean_abs_err=mean_abs, ep_nonconverged=nonconv if method == "kpN" else 0,
                      wall_time_s=wall, estimates=est, seeds=seeds, **common)
        )
    log.info("%s: KL %.3g%%, kpN %.3g%% (%.1f s)", cell.experiment,
             rows[0].mean_rel_err_pct, rows[1].mean_rel_err_pct, wall)
    return rows


def run_plan(plan: ExperimentPlan) -> list[ResultRow]:
    rows = []
    for cell in expand(plan):
        rows.extend(run_cell(cell, plan))
    return rows


def run_grid(plan: ExperimentPlan) -> list[ResultRow]:
    if plan.kind != "grid":
        raise ValueError("run_grid needs a grid plan")
    return run_plan(plan)


def run_dim_sweep(plan: ExperimentPlan) -> list[ResultRow]:
    if plan.kind != "dims":
        raise ValueError("run_dim_sweep needs a dims plan")
    return run_plan(plan)


def run_manifold(plan: ExperimentPlan) -> list[ResultRow]:
    if plan.kind != "manifold":
        raise ValueError("run_manifold needs a manifold plan")
    return run_plan(plan)


def rows_to_csv(rows, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_values(timing))
    return buf.getvalue()


def raw_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r in rows:
        for j, (seed, est) in enumerate(zip(r.seeds, r.estimates)):
            w.writerow([f"{r.experiment}/{r.method}", j, seed, repr(float(est))])
    return buf.getvalue()


def read_rows(text: str) -> list[dict]:
    """Parse a results CSV back into dicts of strings."""
    return list(csv.DictReader(io.StringIO(text)))
