"""Self-checks that compare the library against independent oracles.

Each check returns a :class:`CheckResult`; :func:`run_all` runs the suite
used by ``kpn-entropy diagnostics``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .distributions import DistributionSpec, analytic_pdf_and_hessian, logpdf
from .epmgp import TOL, AxisAlignedBox, GaussianModel, ep_box_state, gaussian_box_logmass
from .estimators import kl_mass_bounds, log_mass_identity_check, probability_mass_quadrature


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _log_interval_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)), accurate in either tail."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    flip = lo > 0
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    l_hi, l_lo = log_ndtr(hi2), log_ndtr(lo2)
    return l_hi + np.log(-np.expm1(l_lo - l_hi))


def check_mass_identity(n=200, ks=(1, 3, 5), replicates=500, seed=0, z=3.0):
    """Ensemble mean of exact log-mass equals psi(k) - psi(n)."""
    out = []
    for k in ks:
        mean, se, target = log_mass_identity_check(n, k, replicates, seed)
        gap = abs(mean - target) / se
        out.append(
            CheckResult(
                f"log-mass identity k={k}",
                gap <= z,
                f"mean {mean:.5f}, target {target:.5f}, |gap| {gap:.2f} SE",
            )
        )
    return out


def check_ep_diagonal(cases=200, max_dim=20, seed=1, tol=TOL, atol=1e-10, ep_rtol=1e-9):
    """Diagonal covariances reproduce the product of 1-D masses.

    The public routine (exact shortcut) must agree to ``atol``.  EP itself
    (``ep_box_state``, no shortcut) must agree to ``ep_rtol`` relative to
    ``max(1, |log mass|)``: it is exact after one sweep, but far-tail boxes
    carry large site precisions whose terms cancel in the log-mass sum.
    """
    rng = np.random.default_rng(seed)
    worst_api = worst_ep = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, max_dim + 1))
        mean = rng.normal(size=d)
        var = rng.uniform(0.1, 4.0, size=d)
        center = mean + rng.normal(size=d) * 2.0
        g = GaussianModel(mean, np.diag(var))
        box = AxisAlignedBox(center, rng.uniform(0.05, 3.0))
        sd = np.sqrt(var)
        exact = math.fsum(_log_interval_mass((box.lower - mean) / sd, (box.upper - mean) / sd))
        api = gaussian_box_logmass(g, box, tol=tol)
        state = ep_box_state(g, box, tol=tol)
        worst_api = max(worst_api, abs(api - exact))
        worst_ep = max(worst_ep, abs(state.log_z - exact) / max(1.0, abs(exact)))
    return CheckResult(
        "EP exact on diagonal covariances",
        worst_api <= atol and worst_ep <= ep_rtol,
        f"{cases} cases, d <= {max_dim}, max |error| {worst_api:.2e}, "
        f"EP sweeps max rel. error {worst_ep:.2e}",
    )


def check_ep_correlated(cases=50, seed=2, tol=TOL, atol=1e-3, max_corr=0.5):
    """EP on correlated 2-D boxes against tensor Gauss-Legendre quadrature.

    EP is an approximation; its log-mass error grows with correlation (about
    1e-2 at |r| = 0.9), so cases draw |r| <= ``max_corr``, box centres within
    about one sd of the mean and half-widths up to 1.5 sd.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        r = rng.uniform(-max_corr, max_corr)
        sd = rng.uniform(0.5, 2.0, size=2)
        spec = DistributionSpec.gaussian(rng.normal(size=2), sd**2, r)
        center = spec.params["mean"] + rng.normal(size=2) * sd
        box = AxisAlignedBox(center, rng.uniform(0.25, 1.5) * float(sd.min()))
        g = GaussianModel(spec.params["mean"], spec.params["cov"])
        state = ep_box_state(g, box, tol=tol)
        quad = probability_mass_quadrature(lambda pts: np.exp(logpdf(spec, pts)), box)
        worst = max(worst, abs(state.log_z - math.log(quad)))
    return CheckResult(
        "EP vs quadrature, correlated 2-D",
        worst <= atol,
        f"{cases} cases, max |log-mass error| {worst:.2e}",
    )


def hessian_range_on_box(spec, center, half_width, points=201):
    """Smallest and largest Hessian eigenvalue over a grid covering a 1-D box."""
    lam = []
    for x in np.linspace(center - half_width, center + half_width, points):
        _, (lo, hi) = analytic_pdf_and_hessian(spec, [x])
        lam += [lo, hi]
    return min(lam), max(lam)


def check_mass_bounds(centers=(0.0, 2.0), eps_values=(0.05, 0.1, 0.2)):
    """Constant-density mass error lies inside the Hessian-eigenvalue bracket.

    The bracket uses the Hessian's extreme eigenvalues over the whole box
    (the remainder of a second-order expansion is a Hessian at some interior
    point); the density is sign-definite in curvature on every box tested.
    """
    spec = DistributionSpec.gaussian([0.0], [1.0])
    out = []
    for x0 in centers:
        for eps in eps_values:
            box = AxisAlignedBox(np.array([x0]), eps)
            mass = probability_mass_quadrature(lambda pts: np.exp(logpdf(spec, pts)), box)
            dens, _ = analytic_pdf_and_hessian(spec, [x0])
            err = abs(mass - 2.0 * eps * dens)
            lam_lo, lam_hi = hessian_range_on_box(spec, x0, eps)
            definite = lam_lo * lam_hi > 0
            lower, upper = kl_mass_bounds(lam_lo, lam_hi, eps, 1)
            out.append(
                CheckResult(
                    f"mass-error bracket x={x0:g} eps={eps:g}",
                    definite and lower <= err <= upper,
                    f"{lower:.6e} <= {err:.6e} <= {upper:.6e}",
                )
            )
    return out


def run_all(replicates=500, ep_tol=TOL, seed=0) -> list[CheckResult]:
    results = check_mass_identity(replicates=replicates, seed=seed)
    results.append(check_ep_diagonal(tol=ep_tol))
    results.append(check_ep_correlated(tol=ep_tol))
    results.extend(check_mass_bounds())
    return results
