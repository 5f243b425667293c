"""Gaussian probability of an axis-aligned box by Expectation Propagation.

The box constraint factorises into one indicator per coordinate.  EP replaces
each indicator by a Gaussian site, matching zeroth, first and second moments
of the one-dimensional truncated cavity, and the normaliser of the resulting
Gaussian approximation is the estimate of the box mass.

All iterations run in standardised coordinates (unit marginal variances), so
the result is invariant to translating and rescaling the problem.  Sites are
visited sequentially with rank-one covariance updates; the approximate
covariance is rebuilt from scratch after every sweep.  Updates are undamped
until a sweep fails to shrink the largest site change, after which every
update moves only ``damping`` of the way to its moment-matched value.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _backend
from .numerics import (
    SpdMatrix,
    spd_factorize,
    truncated_normal_moments,
    truncated_normal_moments_array,
    truncnorm_nb,
)

DAMPING = 0.5
MAX_SWEEPS = 60
TOL = 1e-8


class EpConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AxisAlignedBox:
    """``[center - half_width, center + half_width]`` in every coordinate."""

    center: np.ndarray
    half_width: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if c.ndim != 1:
            raise ValueError("box center must be a vector")
        if not self.half_width > 0:
            raise ValueError("box half-width must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", float(self.half_width))

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width


@dataclass
class GaussianModel:
    mean: np.ndarray
    cov: SpdMatrix

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if not isinstance(self.cov, SpdMatrix):
            self.cov = SpdMatrix(np.atleast_2d(self.cov))
        if self.cov.dim != self.mean.shape[0]:
            raise ValueError("mean and covariance dimensions differ")
        if self.cov.factor is None:
            spd_factorize(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class EpState:
    """Converged (or last) EP iterate, expressed in the original coordinates."""

    site_precisions: np.ndarray
    site_shifts: np.ndarray
    approx_mean: np.ndarray
    approx_cov: np.ndarray
    log_z: float
    converged: bool
    sweeps: int


def _standardize(mean, cov, lo, hi):
    sd = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    corr = cov / (sd[..., :, None] * sd[..., None, :])
    idx = np.arange(cov.shape[-1])
    corr[..., idx, idx] = 1.0
    return corr, (lo - mean) / sd, (hi - mean) / sd, sd


def _is_diagonal(cov) -> bool:
    return not np.any(cov - np.diag(np.diag(cov)))


def _diagonal_logmass(a, b) -> float:
    return math.fsum(
        truncated_normal_moments(0.0, 1.0, lo, hi).logZ for lo, hi in zip(a, b)
    )


def _check(g: GaussianModel, box: AxisAlignedBox):
    if box.center.shape[0] != g.dim:
        raise ValueError("box and Gaussian dimensions differ")


def gaussian_box_logmass(
    g: GaussianModel,
    box: AxisAlignedBox,
    *,
    damping: float = DAMPING,
    max_sweeps: int = MAX_SWEEPS,
    tol: float = TOL,
) -> float:
    """log of the probability that ``N(g.mean, g.cov)`` assigns to ``box``.

    Diagonal covariances are handled exactly as a product of univariate
    masses.  Otherwise EP runs; if it has not converged after ``max_sweeps``
    the last iterate is used and an :class:`EpConvergenceWarning` is emitted.
    """
    _check(g, box)
    cov = g.cov.entries
    corr, a, b, _ = _standardize(g.mean, cov, box.lower, box.upper)
    if _is_diagonal(cov):
        return _diagonal_logmass(a, b)
    logz, conv, _ = _run_batch(corr[None], a[None], b[None], damping, max_sweeps, tol)
    if not conv[0]:
        warnings.warn("EP did not converge; returning last iterate", EpConvergenceWarning)
    return float(logz[0])


def ep_box_state(
    g: GaussianModel,
    box: AxisAlignedBox,
    *,
    damping: float = DAMPING,
    max_sweeps: int = MAX_SWEEPS,
    tol: float = TOL,
) -> EpState:
    """Run EP (no diagonal shortcut) and return the full final state."""
    _check(g, box)
    corr, a, b, sd = _standardize(g.mean, g.cov.entries, box.lower, box.upper)
    tau, nu, sigma, mu, logz, conv, sweeps = _ep_single_numpy(
        corr, a, b, damping, max_sweeps, tol
    )
    # site exp(-tau z^2 / 2 + nu z) with z = (x - mean) / sd
    site_prec = tau / sd**2
    site_shift = nu / sd + tau * g.mean / sd**2
    return EpState(
        site_precisions=site_prec,
        site_shifts=site_shift,
        approx_mean=g.mean + sd * mu,
        approx_cov=sigma * np.outer(sd, sd),
        log_z=logz,
        converged=conv,
        sweeps=sweeps,
    )


def box_logmass_batch(
    means,
    covs,
    lowers,
    uppers,
    *,
    damping: float = DAMPING,
    max_sweeps: int = MAX_SWEEPS,
    tol: float = TOL,
):
    """Box log-masses for a stack of Gaussians.

    Parameters
    ----------
    means, lowers, uppers : (n, d) arrays
    covs : (n, d, d) array of positive-definite covariances

    Returns
    -------
    logz : (n,) array
    converged : (n,) bool array
    sweeps : (n,) int array
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    corr, a, b, _ = _standardize(means, covs, np.asarray(lowers), np.asarray(uppers))
    n, d = a.shape
    logz = np.empty(n)
    conv = np.ones(n, dtype=bool)
    sweeps = np.zeros(n, dtype=np.int64)
    off = covs.copy()
    off[:, np.arange(d), np.arange(d)] = 0.0
    diag = ~np.any(off.reshape(n, -1), axis=1)
    if diag.any():
        lz, _, _ = truncated_normal_moments_array(0.0, 1.0, a[diag], b[diag])
        logz[diag] = lz.sum(axis=1)
    rest = np.flatnonzero(~diag)
    if rest.size:
        lz, cv, sw = _run_batch(corr[rest], a[rest], b[rest], damping, max_sweeps, tol)
        logz[rest], conv[rest], sweeps[rest] = lz, cv, sw
    return logz, conv, sweeps


def _canonical_order(corr, a, b):
    """Reorder coordinates by (lower, upper) bound.

    Sequential EP visits sites in coordinate order, so a fixed order makes the
    result independent of how the caller happened to order the coordinates.
    """
    order = np.lexsort((b, a), axis=-1)
    rows = np.arange(a.shape[0])[:, None]
    corr = corr[rows[:, :, None], order[:, :, None], order[:, None, :]]
    return corr, a[rows, order], b[rows, order]


def _run_batch(corr, a, b, damping, max_sweeps, tol):
    corr, a, b = _canonical_order(corr, a, b)
    corr = np.ascontiguousarray(corr)
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if _backend.use_numba():
        return _ep_batch_numba(corr, a, b, float(damping), int(max_sweeps), float(tol))
    return _ep_batch_numpy(corr, a, b, damping, max_sweeps, tol)


def gaussian_box_logmass_mc(g: GaussianModel, box: AxisAlignedBox, n: int, seed) -> float:
    """Monte-Carlo estimate: log of the fraction of ``n`` draws inside the box.

    Returns ``-inf`` (with a warning) when no draw lands in the box.
    """
    _check(g, box)
    rng = np.random.default_rng(seed)
    hits = 0
    remaining = int(n)
    block = 1 << 16
    while remaining > 0:
        m = min(block, remaining)
        z = rng.standard_normal((m, g.dim))
        x = g.mean + z @ g.cov.factor.T
        hits += int(np.count_nonzero(np.all((x >= box.lower) & (x <= box.upper), axis=1)))
        remaining -= m
    if hits == 0:
        warnings.warn("no Monte-Carlo draw fell inside the box", RuntimeWarning)
        return -math.inf
    return math.log(hits / n)


# ---------------------------------------------------------------------------
# numpy kernels


def _rebuild_numpy(corr, tau, nu):
    """Covariance, mean and log|I + T^1/2 R T^1/2| of (R^-1 + T)^-1."""
    d = tau.shape[-1]
    sq = np.sqrt(tau)
    bmat = np.eye(d) + sq[..., :, None] * corr * sq[..., None, :]
    chol = np.linalg.cholesky(bmat)
    v = np.linalg.solve(chol, sq[..., :, None] * corr)
    sigma = corr - np.swapaxes(v, -1, -2) @ v
    mu = (sigma @ nu[..., None])[..., 0]
    logdet_b = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return sigma, mu, logdet_b


def _site_change(d_tau, d_nu, tau, nu):
    return np.maximum(np.abs(d_tau), np.abs(d_nu)) / (1.0 + np.abs(tau) + np.abs(nu))


def _ep_sweep_numpy(corr, a, b, tau, nu, sigma, mu, delta):
    """One sequential sweep over all sites, in place; returns max site change.

    ``delta`` holds the per-problem step size (1 is an undamped update).
    """
    nb, d = a.shape
    rows = np.arange(nb)
    change = np.zeros(nb)
    for j in range(d):
        vj = sigma[:, j, j].copy()
        tau_c = 1.0 / vj - tau[:, j]
        ok = tau_c > 0.0
        if not ok.all():
            tau_c = np.where(ok, tau_c, 1.0)
        nu_c = mu[:, j] / vj - nu[:, j]
        var_c = 1.0 / tau_c
        _, m_hat, v_hat = truncated_normal_moments_array(nu_c * var_c, var_c, a[:, j], b[:, j])
        tau_new = np.maximum(1.0 / v_hat - tau_c, 0.0)
        nu_new = m_hat / v_hat - nu_c
        d_tau = np.where(ok, delta * (tau_new - tau[:, j]), 0.0)
        d_nu = np.where(ok, delta * (nu_new - nu[:, j]), 0.0)
        change = np.maximum(change, _site_change(d_tau, d_nu, tau[:, j] + d_tau, nu[:, j] + d_nu))
        denom = 1.0 + d_tau * vj
        s = sigma[:, :, j].copy()
        mu += s * ((d_nu - d_tau * mu[:, j]) / denom)[:, None]
        sigma -= (d_tau / denom)[:, None, None] * s[:, :, None] * s[:, None, :]
        sigma[rows, j, j] = vj / denom
        tau[:, j] += d_tau
        nu[:, j] += d_nu
    return change


def _ep_logz_numpy(corr, a, b, tau, nu, sigma, mu, logdet_b):
    vj = np.diagonal(sigma, axis1=-2, axis2=-1)
    tau_c = 1.0 / vj - tau
    nu_c = mu / vj - nu
    var_c = 1.0 / tau_c
    m_c = nu_c * var_c
    lz_hat, _, _ = truncated_normal_moments_array(m_c, var_c, a, b)
    terms = (
        lz_hat
        + 0.5 * np.log1p(var_c * tau)
        + 0.5 * (m_c * m_c * tau_c - mu * mu / vj + nu * mu)
    )
    return terms.sum(axis=-1) - 0.5 * logdet_b, np.all(tau_c > 0.0, axis=-1)


def _ep_batch_numpy(corr, a, b, damping, max_sweeps, tol, return_state=False):
    nb, d = a.shape
    tau = np.zeros((nb, d))
    nu = np.zeros((nb, d))
    sigma = corr.copy()
    mu = np.zeros((nb, d))
    logdet_b = np.zeros(nb)
    converged = np.zeros(nb, dtype=bool)
    sweeps = np.zeros(nb, dtype=np.int64)
    active = np.arange(nb)
    last_change = np.full(nb, np.inf)
    delta = np.ones(nb)
    for sweep in range(max_sweeps):
        if active.size == 0:
            break
        t, v, sg, m = tau[active], nu[active], sigma[active], mu[active]
        change = _ep_sweep_numpy(
            corr[active], a[active], b[active], t, v, sg, m, delta[active]
        )
        # damp from the first sweep that fails to shrink the site changes
        delta[active[change >= last_change[active]]] = damping
        last_change[active] = change
        sg, m, ld = _rebuild_numpy(corr[active], t, v)
        tau[active], nu[active], sigma[active], mu[active] = t, v, sg, m
        logdet_b[active] = ld
        sweeps[active] = sweep + 1
        done = change < tol
        converged[active[done]] = True
        active = active[~done]
    logz, cavity_ok = _ep_logz_numpy(corr, a, b, tau, nu, sigma, mu, logdet_b)
    converged &= cavity_ok
    if return_state:
        return tau, nu, sigma, mu, logz, converged, sweeps
    return logz, converged, sweeps


def _ep_single_numpy(corr, a, b, damping, max_sweeps, tol):
    tau, nu, sigma, mu, logz, conv, sweeps = _ep_batch_numpy(
        corr[None], a[None], b[None], damping, max_sweeps, tol, return_state=True
    )
    return tau[0], nu[0], sigma[0], mu[0], float(logz[0]), bool(conv[0]), int(sweeps[0])


# ---------------------------------------------------------------------------
# numba kernels

if _backend.HAS_NUMBA:
    njit = _backend.njit

    @njit
    def _rebuild_nb(corr, tau, nu, sigma, mu):
        d = tau.shape[0]
        sq = np.sqrt(tau)
        bmat = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                bmat[i, j] = sq[i] * corr[i, j] * sq[j]
            bmat[i, i] += 1.0
        chol = np.linalg.cholesky(bmat)
        # v = chol^-1 (sq * corr), forward substitution row by row
        v = np.empty((d, d))
        for i in range(d):
            for c in range(d):
                v[i, c] = sq[i] * corr[i, c]
            for k in range(i):
                lik = chol[i, k]
                for c in range(d):
                    v[i, c] -= lik * v[k, c]
            inv = 1.0 / chol[i, i]
            for c in range(d):
                v[i, c] *= inv
        vtv = v.T @ v
        logdet_b = 0.0
        for i in range(d):
            logdet_b += 2.0 * math.log(chol[i, i])
            for j in range(d):
                sigma[i, j] = corr[i, j] - vtv[i, j]
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += sigma[i, j] * nu[j]
            mu[i] = acc
        return logdet_b

    @njit
    def _ep_single_nb(corr, a, b, damping, max_sweeps, tol):
        d = a.shape[0]
        tau = np.zeros(d)
        nu = np.zeros(d)
        sigma = corr.copy()
        mu = np.zeros(d)
        s = np.empty(d)
        logdet_b = 0.0
        converged = False
        sweeps = 0
        delta = 1.0
        last_change = np.inf
        for sweep in range(max_sweeps):
            change = 0.0
            for j in range(d):
                vj = sigma[j, j]
                tau_c = 1.0 / vj - tau[j]
                if not tau_c > 0.0:
                    continue
                nu_c = mu[j] / vj - nu[j]
                var_c = 1.0 / tau_c
                _, m_hat, v_hat = truncnorm_nb(nu_c * var_c, var_c, a[j], b[j], False, False)
                tau_new = max(1.0 / v_hat - tau_c, 0.0)
                nu_new = m_hat / v_hat - nu_c
                d_tau = delta * (tau_new - tau[j])
                d_nu = delta * (nu_new - nu[j])
                tau[j] += d_tau
                nu[j] += d_nu
                rel = max(abs(d_tau), abs(d_nu)) / (1.0 + abs(tau[j]) + abs(nu[j]))
                if rel > change:
                    change = rel
                denom = 1.0 + d_tau * vj
                coef = d_tau / denom
                shift = (d_nu - d_tau * mu[j]) / denom
                for i in range(d):
                    s[i] = sigma[i, j]
                for i in range(d):
                    mu[i] += s[i] * shift
                    ci = coef * s[i]
                    for k in range(d):
                        sigma[i, k] -= ci * s[k]
                sigma[j, j] = vj / denom
            logdet_b = _rebuild_nb(corr, tau, nu, sigma, mu)
            sweeps = sweep + 1
            if change >= last_change:
                delta = damping
            last_change = change
            if change < tol:
                converged = True
                break

        logz = -0.5 * logdet_b
        for j in range(d):
            vj = sigma[j, j]
            tau_c = 1.0 / vj - tau[j]
            if not tau_c > 0.0:
                converged = False
                tau_c = 1e-300
            nu_c = mu[j] / vj - nu[j]
            var_c = 1.0 / tau_c
            m_c = nu_c * var_c
            lz_hat, _, _ = truncnorm_nb(m_c, var_c, a[j], b[j], False, False)
            logz += (
                lz_hat
                + 0.5 * math.log1p(var_c * tau[j])
                + 0.5 * (m_c * m_c * tau_c - mu[j] * mu[j] / vj + nu[j] * mu[j])
            )
        return logz, converged, sweeps

    @njit(parallel=True)
    def _ep_batch_numba(corr, a, b, damping, max_sweeps, tol):
        n = a.shape[0]
        logz = np.empty(n)
        conv = np.empty(n, dtype=np.bool_)
        sweeps = np.empty(n, dtype=np.int64)
        for i in _backend.prange(n):
            lz, cv, sw = _ep_single_nb(corr[i], a[i], b[i], damping, max_sweeps, tol)
            logz[i] = lz
            conv[i] = cv
            sweeps[i] = sw
        return logz, conv, sweeps

else:  # pragma: no cover
    _ep_batch_numba = None
