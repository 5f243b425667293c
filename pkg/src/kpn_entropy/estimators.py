"""Kozachenko-Leonenko (KL) and kpN entropy estimators.

Both estimators average a per-sample log probability-mass correction on top of
``psi(N) - psi(k)``.  KL assumes a constant density over the L-infinity ball
of radius ``eps_i`` (the distance to the k-th neighbour).  kpN instead fits a
Gaussian to the ``p`` nearest neighbours of each sample, pins it to the
density at the sample and integrates it over the ball with EP.

Entropies are in nats.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .epmgp import box_logmass_batch
from .knn import SampleSet, knn_all
from .numerics import SpdMatrix, digamma, spd_factorize

_LOG_2PI = math.log(2.0 * math.pi)


class DuplicateSampleError(ValueError):
    """Samples coincide so that a neighbour distance is exactly zero."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        shown = ", ".join(map(str, self.indices[:20]))
        more = "" if len(self.indices) <= 20 else f" (+{len(self.indices) - 20} more)"
        super().__init__(f"zero neighbour distance (duplicate samples) at rows {shown}{more}")


class CovarianceError(np.linalg.LinAlgError):
    """A local covariance stayed singular after the largest jitter."""

    def __init__(self, index, jitter):
        self.index = int(index)
        super().__init__(
            f"local covariance of sample {index} not positive definite "
            f"even with jitter {jitter:g} * trace / d"
        )


@dataclass(frozen=True)
class EstimatorConfig:
    k: int = 4
    p: int = 200
    jitter_start: float = 1e-12
    jitter_max: float = 1e-4
    include_self: bool = True

    def validate(self, n: int) -> None:
        if not 1 <= self.k <= self.p <= n - 1:
            raise ValueError(f"need 1 <= k <= p <= N-1, got k={self.k}, p={self.p}, N={n}")
        if self.p < 2:
            raise ValueError("a local covariance needs p >= 2")
        if not 0 < self.jitter_start <= self.jitter_max:
            raise ValueError("need 0 < jitter_start <= jitter_max")

    @property
    def query_size(self) -> int:
        """Neighbours to request so both the ball and the local fit are covered."""
        return max(self.k, self.p - 1 if self.include_self else self.p)

    def local_set(self, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Rows forming each sample's local Gaussian fit, ``p`` per sample."""
        if self.include_self:
            return np.hstack([np.asarray(rows)[:, None], idx[:, : self.p - 1]])
        return idx[:, : self.p]


@dataclass
class NeighborhoodSummary:
    eps: float
    neighbor_indices: np.ndarray
    local_mean: np.ndarray
    local_cov: SpdMatrix
    log_g_at_xi: float
    log_G: float
    ep_converged: bool


@dataclass
class EntropyReport:
    """An entropy estimate together with the terms that add up to it.

    ``estimate`` is ``term_psi`` plus the entries of ``term_geom`` added in
    insertion order.
    """

    estimate: float
    method: str
    term_psi: float
    term_geom: dict[str, float]
    n: int
    d: int
    k: int
    p: int | None = None
    ep_nonconverged_count: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _sum_terms(term_psi: float, term_geom: dict[str, float]) -> float:
    total = term_psi
    for v in term_geom.values():
        total += v
    return total


def _mean(values) -> float:
    # exactly rounded, so independent of sample order
    return math.fsum(values) / len(values)


def _check_duplicates(eps: np.ndarray) -> None:
    bad = np.flatnonzero(eps <= 0.0)
    if bad.size:
        raise DuplicateSampleError(bad)


def _as_samples(s) -> SampleSet:
    return s if isinstance(s, SampleSet) else SampleSet(s)


def estimate_kl(s, k: int = 4) -> EntropyReport:
    """Classical KL estimate with the maximum norm (unit-ball volume ``2^d``)."""
    s = _as_samples(s)
    _, dist = knn_all(s, k)
    return _kl_from_eps(s, k, dist[:, k - 1])


def _kl_from_eps(s: SampleSet, k: int, eps: np.ndarray) -> EntropyReport:
    _check_duplicates(eps)
    term_psi = digamma(s.n) - digamma(k)
    term_geom = {
        "log_unit_ball_volume": s.d * math.log(2.0),
        "d_mean_log_eps": s.d * _mean(np.log(eps)),
    }
    return EntropyReport(
        estimate=_sum_terms(term_psi, term_geom),
        method="KL",
        term_psi=term_psi,
        term_geom=term_geom,
        n=s.n,
        d=s.d,
        k=k,
        config={"k": k},
    )


def estimate_kpn(s, cfg: EstimatorConfig | None = None) -> EntropyReport:
    """kpN estimate: KL's constant density replaced by a local Gaussian.

    For every sample a local set of ``cfg.p`` points (by default the sample
    and its ``p - 1`` nearest neighbours, see ``EstimatorConfig.include_self``)
    gives a mean and covariance; the Gaussian with that shape and unit peak
    is integrated over the ``cfg.k``-neighbour box with EP.

    Raises
    ------
    DuplicateSampleError
        If any k-th neighbour distance is zero.
    CovarianceError
        If a local covariance cannot be made positive definite by jitter.
    """
    s = _as_samples(s)
    cfg = cfg or EstimatorConfig()
    cfg.validate(s.n)
    idx, dist = knn_all(s, cfg.query_size)
    return _kpn_from_neighbors(s, cfg, idx, dist)


def estimate_both(s, cfg: EstimatorConfig) -> tuple[EntropyReport, EntropyReport]:
    """KL and kpN estimates sharing one neighbour search."""
    s = _as_samples(s)
    cfg.validate(s.n)
    idx, dist = knn_all(s, cfg.query_size)
    kl = _kl_from_eps(s, cfg.k, dist[:, cfg.k - 1])
    return kl, _kpn_from_neighbors(s, cfg, idx, dist)


def _kpn_from_neighbors(s, cfg, idx, dist) -> EntropyReport:
    eps = dist[:, cfg.k - 1]
    _check_duplicates(eps)
    if cfg.p <= s.d:
        warnings.warn(
            f"p={cfg.p} <= d={s.d}: local covariances are rank deficient, "
            "relying on jitter",
            RuntimeWarning,
            stacklevel=3,
        )
    nb = cfg.local_set(idx, np.arange(s.n))
    log_g, log_big_g, conv = _local_terms(s.data, nb, eps, cfg)
    term_psi = digamma(s.n) - digamma(cfg.k)
    term_geom = {
        "neg_mean_log_g": -_mean(log_g),
        "mean_log_G": _mean(log_big_g),
    }
    return EntropyReport(
        estimate=_sum_terms(term_psi, term_geom),
        method="kpN",
        term_psi=term_psi,
        term_geom=term_geom,
        n=s.n,
        d=s.d,
        k=cfg.k,
        p=cfg.p,
        ep_nonconverged_count=int(np.count_nonzero(~conv)),
        config=asdict(cfg),
    )


def _local_fit(x, nb_idx, cfg, rows):
    """Means, jittered covariances, Cholesky factors and log-dets.

    ``nb_idx`` holds one local set per row; ``rows`` names the samples in
    error messages.
    """
    p = nb_idx.shape[1]
    nb = x[nb_idx]
    mu = nb.mean(axis=1)
    centred = nb - mu[:, None, :]
    cov = np.swapaxes(centred, 1, 2) @ centred / (p - 1)
    chol = _batched_cholesky(cov, rows, cfg)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return mu, cov, chol, logdet


def _pd_ok(chol, cov) -> np.ndarray:
    """Cholesky pivots must clear the numerical-rank threshold."""
    d = cov.shape[-1]
    piv = np.diagonal(chol, axis1=-2, axis2=-1) ** 2
    scale = np.max(np.diagonal(cov, axis1=-2, axis2=-1), axis=-1)
    return np.all(np.isfinite(piv), axis=-1) & (
        np.min(piv, axis=-1) > d * np.finfo(float).eps * scale
    )


def _batched_cholesky(cov, rows, cfg):
    try:
        chol = np.linalg.cholesky(cov)
        good = _pd_ok(chol, cov)
    except np.linalg.LinAlgError:
        chol = np.zeros_like(cov)
        good = np.zeros(len(cov), dtype=bool)
    for b in np.flatnonzero(~good):
        chol[b] = _jittered_cholesky(cov[b], rows[b], cfg)
    return chol


def _jittered_cholesky(cov, row, cfg):
    """Add ``delta * trace/d`` to the diagonal, delta growing 10x per failure.

    ``cov`` is modified in place so callers see the matrix actually used.
    """
    d = cov.shape[0]
    base = np.trace(cov) / d
    delta = cfg.jitter_start
    original = cov.copy()
    while delta <= cfg.jitter_max * (1 + 1e-9):
        cov[...] = original + delta * base * np.eye(d)
        try:
            chol = np.linalg.cholesky(cov)
            if _pd_ok(chol, cov):
                return chol
        except np.linalg.LinAlgError:
            pass
        delta *= 10.0
    raise CovarianceError(row, cfg.jitter_max)


def _chunk_rows(n, p, d):
    step = max(1, 4_000_000 // max(1, p * d))
    for start in range(0, n, step):
        yield np.arange(start, min(n, start + step))


def _local_terms(x, nb_idx, eps, cfg):
    """Per-sample ``log g(x_i)``, unnormalised ``log G_i`` and EP flags."""
    n, d = x.shape
    log_g = np.empty(n)
    log_big_g = np.empty(n)
    conv = np.empty(n, dtype=bool)
    for rows in _chunk_rows(n, nb_idx.shape[1], d):
        mu, cov, chol, logdet = _local_fit(x, nb_idx[rows], cfg, rows)
        resid = x[rows] - mu
        white = np.linalg.solve(chol, resid[:, :, None])[:, :, 0]
        log_g[rows] = -0.5 * np.einsum("ij,ij->i", white, white)
        e = eps[rows][:, None]
        logmass, cv, _ = box_logmass_batch(mu, cov, x[rows] - e, x[rows] + e)
        # g has unit peak, so its integral is the normal mass times sqrt|2 pi S|
        log_big_g[rows] = logmass + 0.5 * (d * _LOG_2PI + logdet)
        conv[rows] = cv
    return log_g, log_big_g, conv


def neighborhood_summary(s, cfg: EstimatorConfig, i: int) -> NeighborhoodSummary:
    """Everything kpN computes for sample ``i``, for inspection."""
    s = _as_samples(s)
    cfg.validate(s.n)
    rows = np.array([i])
    idx, dist = knn_all(s, cfg.query_size, rows=rows)
    eps = dist[:, cfg.k - 1]
    _check_duplicates(eps)
    nb = cfg.local_set(idx, rows)
    x_i = s.data[i : i + 1]
    mu, cov, chol, logdet = _local_fit(s.data, nb, cfg, rows)
    white = np.linalg.solve(chol[0], x_i[0] - mu[0])
    logmass, cv, _ = box_logmass_batch(mu, cov, x_i - eps[0], x_i + eps[0])
    local_cov = SpdMatrix(cov[0])
    spd_factorize(local_cov)
    return NeighborhoodSummary(
        eps=float(eps[0]),
        neighbor_indices=nb[0],
        local_mean=mu[0],
        local_cov=local_cov,
        log_g_at_xi=float(-0.5 * white @ white),
        log_G=float(logmass[0] + 0.5 * (s.d * _LOG_2PI + logdet[0])),
        ep_converged=bool(cv[0]),
    )


# ---------------------------------------------------------------------------
# probability-mass diagnostics

_GL_NODES = 64


def probability_mass_quadrature(pdf, box) -> float:
    """Integral of ``pdf`` over an axis-aligned box, d <= 3.

    Tensor Gauss-Legendre rule with 64 nodes per axis.  ``pdf`` maps an
    ``(m, d)`` array of points to ``m`` density values.
    """
    center = np.atleast_1d(np.asarray(box.center, dtype=float))
    d = center.shape[0]
    if d > 3:
        raise NotImplementedError("tensor quadrature is limited to d <= 3")
    t, w = np.polynomial.legendre.leggauss(_GL_NODES)
    h = box.half_width
    grids = np.meshgrid(*([t] * d), indexing="ij")
    pts = center + h * np.stack([g.ravel() for g in grids], axis=1)
    wgrid = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    vals = np.asarray(pdf(pts), dtype=float).reshape(-1)
    return float(h**d * math.fsum(weights * vals))


def kl_mass_bounds(lambda_min: float, lambda_max: float, eps: float, d: int):
    """Bracket on ``|P - P_KL|`` from Hessian eigenvalue extremes.

    ``(|lam|/3) d 2^(d-1) eps^(d+2)`` with the smaller and larger eigenvalue
    magnitude.  Only meaningful for a sign-definite Hessian; if the extremes
    straddle zero the lower bound is 0.
    """
    scale = d * 2.0 ** (d - 1) * eps ** (d + 2) / 3.0
    lo_mag, hi_mag = sorted((abs(lambda_min), abs(lambda_max)))
    if lambda_min < 0.0 < lambda_max:
        lo_mag = 0.0
    return lo_mag * scale, hi_mag * scale


def log_mass_identity_check(n: int, k: int, replicates: int, seed: int = 0):
    """Ensemble mean of exact ``log P_i`` for 1-D standard normal samples.

    ``P_i`` is the true normal mass of the ball reaching the k-th neighbour.
    Its expectation is ``psi(k) - psi(n)`` for any density.

    Returns
    -------
    mean, standard_error, target
    """
    from scipy.special import log_ndtr, ndtr

    from .distributions import DistributionSpec, sample

    spec = DistributionSpec.gaussian([0.0], [1.0])
    per_rep = np.empty(replicates)
    for r in range(replicates):
        s = sample(spec, n, seed + r)
        _, dist = knn_all(s, k)
        x = s.data[:, 0]
        eps = dist[:, k - 1]
        hi, lo = x + eps, x - eps
        # symmetric form keeps precision when the ball sits in a tail
        mass = np.where(
            x < 0,
            ndtr(hi) - ndtr(lo),
            ndtr(-lo) - ndtr(-hi),
        )
        log_p = np.log(mass)
        tiny = mass < 1e-300
        if tiny.any():
            log_p[tiny] = log_ndtr(hi[tiny]) + np.log(-np.expm1(log_ndtr(lo[tiny]) - log_ndtr(hi[tiny])))
        per_rep[r] = _mean(log_p)
    target = digamma(k) - digamma(n)
    se = float(per_rep.std(ddof=1) / math.sqrt(replicates))
    return float(per_rep.mean()), se, target
