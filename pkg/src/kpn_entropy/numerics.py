"""Special functions and dense SPD linear algebra.

Everything here is pure and reentrant.  ``truncated_normal_moments`` is written
once as a scalar kernel over ``math`` and compiled both for plain Python and
(when available) for numba; ``truncated_normal_moments_array`` is the
vectorised numpy twin used by the batched EP fallback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx as _erfcx_scipy

from . import _backend

EULER_GAMMA = 0.57721566490153286060651209008240243

# Bernoulli-number coefficients B_2n / (2n) for the asymptotic digamma series.
_PSI_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_PSI_SHIFT = 10.0

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
# log(1e-300): below this the interval mass is flagged tail-degenerate.
LOG_TINY_MASS = math.log(1e-300)
# Intervals narrower than this (in sd units), and not too steep across their
# width, get their moments by Gauss-Legendre quadrature in centred
# coordinates; the closed forms lose all digits of the variance there.
_NARROW_WIDTH = 0.1
_NARROW_TILT = 8.0
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix is not numerically positive definite."""


def digamma(x):
    """Digamma function for positive real arguments.

    Upward recurrence ``psi(x) = psi(x + 1) - 1/x`` until ``x >= 10``, then the
    seven-term asymptotic series.  Accepts scalars or arrays.

    Raises
    ------
    ValueError
        If any argument is not strictly positive.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    if arr.ndim == 0:
        return _digamma_scalar(float(arr))
    return np.vectorize(_digamma_scalar, otypes=[float])(arr)


def _digamma_scalar(x: float) -> float:
    acc = 0.0
    while x < _PSI_SHIFT:
        acc -= 1.0 / x
        x += 1.0
    z = 1.0 / (x * x)
    series = 0.0
    for c in reversed(_PSI_SERIES):
        series = series * z + c
    return acc + math.log(x) - 0.5 / x - z * series


def std_normal_logcdf(z: float) -> float:
    """log of the standard normal CDF, accurate deep into the left tail."""
    return _logcdf_core(float(z))


def _make_scalar_kernels(erfcx, jit=None):
    """Build the scalar kernels around a given ``erfcx`` implementation."""
    jit = jit or (lambda f: f)

    @jit
    def logcdf(z):
        if z < 0.0:
            w = -z / _SQRT2
            return math.log(0.5 * erfcx(w)) - w * w
        return math.log1p(-0.5 * math.erfc(z / _SQRT2))

    @jit
    def truncnorm(mu, var, lo, hi, lo_inf, hi_inf):
        # Returns (logZ, mean, variance) of N(mu, var) restricted to [lo, hi].
        sd = math.sqrt(var)
        a = (lo - mu) / sd
        b = (hi - mu) / sd
        sign = 1.0
        if not lo_inf and a > 0.0:
            a, b = -b, -a
            lo_inf, hi_inf = hi_inf, lo_inf
            sign = -1.0

        if lo_inf and hi_inf:
            return 0.0, mu, var

        if lo_inf:
            # upper tail cut only: mass Phi(b)
            log_z = logcdf(b)
            if b < 0.0:
                lam = _SQRT_2_OVER_PI / erfcx(-b / _SQRT2)
            else:
                lam = _INV_SQRT_2PI * math.exp(-0.5 * b * b) / math.exp(log_z)
            m_std = -lam
            v_std = 1.0 - lam * (b + lam)
        elif hi_inf:
            # a <= 0 here, so the mass Phi(-a) >= 1/2
            log_z = logcdf(-a)
            lam = _INV_SQRT_2PI * math.exp(-0.5 * a * a) / math.exp(log_z)
            m_std = lam
            v_std = 1.0 + a * lam - lam * lam
        elif b - a < _NARROW_WIDTH and abs(a + b) * (b - a) < 2.0 * _NARROW_TILT:
            # density exp(-c u - u^2 / 2) on u in [-h, h] around the midpoint c
            c = 0.5 * (a + b)
            h = 0.5 * (b - a)
            shift = abs(c) * h
            s0 = 0.0
            s1 = 0.0
            for i in range(_GL_X.shape[0]):
                u = h * _GL_X[i]
                f = _GL_W[i] * math.exp(-c * u - 0.5 * u * u - shift)
                s0 += f
                s1 += f * u
            m_u = s1 / s0
            s2 = 0.0
            for i in range(_GL_X.shape[0]):
                u = h * _GL_X[i]
                f = _GL_W[i] * math.exp(-c * u - 0.5 * u * u - shift)
                s2 += f * (u - m_u) * (u - m_u)
            log_z = math.log(h * s0) + shift - 0.5 * c * c - _LOG_SQRT_2PI
            m_std = c + m_u
            v_std = s2 / s0
        elif b >= 0.0:
            tail_a = 0.5 * math.erfc(-a / _SQRT2)
            tail_b = 0.5 * math.erfc(b / _SQRT2)
            if tail_a + tail_b < 0.5:
                log_z = math.log1p(-(tail_a + tail_b))
                z_mass = math.exp(log_z)
            else:
                z_mass = 0.5 * (math.erf(b / _SQRT2) - math.erf(a / _SQRT2))
                log_z = math.log(z_mass)
            pa = _INV_SQRT_2PI * math.exp(-0.5 * a * a)
            pb = _INV_SQRT_2PI * math.exp(-0.5 * b * b)
            m_std = (pa - pb) / z_mass
            v_std = 1.0 + (a * pa - b * pb) / z_mass - m_std * m_std
        else:
            # a < b < 0: both ends in the left tail, work relative to Phi(b)
            u = -a / _SQRT2
            w = -b / _SQRT2
            ex_w = erfcx(w)
            log_ratio = math.log(erfcx(u) / ex_w) - (u - w) * (u + w)
            one_minus_r = -math.expm1(log_ratio)
            log_z = math.log(0.5 * ex_w) - w * w + math.log(one_minus_r)
            lam_b = _SQRT_2_OVER_PI / ex_w / one_minus_r
            lam_a = lam_b * math.exp(-(u - w) * (u + w))
            m_std = lam_a - lam_b
            v_std = 1.0 + a * lam_a - b * lam_b - m_std * m_std
            if not (0.0 < v_std <= 1.0):
                # cancellation in the far tail: use the locally exponential
                # density exp(-b (x - b)) restricted to [a, b]
                rate = -0.5 * (a + b)
                half = 0.5 * rate * (b - a)
                sh = math.sinh(half)
                v_std = 1.0 / (rate * rate) - (b - a) * (b - a) / (4.0 * sh * sh)
                if not (0.0 < v_std <= 1.0):
                    v_std = (b - a) * (b - a) / 12.0

        # keep the moments inside their feasible sets
        if v_std > 1.0:
            v_std = 1.0
        if v_std <= 0.0:
            v_std = 1e-300
        if not lo_inf and m_std < a:
            m_std = a
        if not hi_inf and m_std > b:
            m_std = b
        return log_z, mu + sign * sd * m_std, var * v_std

    return logcdf, truncnorm


_logcdf_core, _truncnorm_core = _make_scalar_kernels(_erfcx_scipy)

if _backend.HAS_NUMBA:
    logcdf_nb, truncnorm_nb = _make_scalar_kernels(_backend.erfcx_nb, _backend.njit)
else:  # pragma: no cover
    logcdf_nb = truncnorm_nb = None


@dataclass(frozen=True)
class TruncatedMoments:
    logZ: float
    mean: float
    variance: float
    tail_degenerate: bool = False


def truncated_normal_moments(
    mu: float, var: float, lo: float | None, hi: float | None
) -> TruncatedMoments:
    """Mass, mean and variance of ``N(mu, var)`` truncated to ``[lo, hi]``.

    ``None`` (or an infinite value) for a bound means that side is open.  The
    mass is evaluated in log space; when it falls below ``1e-300`` the result
    carries ``tail_degenerate=True`` and callers decide what to do with it.
    """
    if not var > 0:
        raise ValueError("var must be positive")
    lo_inf = lo is None or (math.isinf(lo) and lo < 0)
    hi_inf = hi is None or (math.isinf(hi) and hi > 0)
    lo_v = 0.0 if lo_inf else float(lo)
    hi_v = 0.0 if hi_inf else float(hi)
    if not lo_inf and not hi_inf and not lo_v < hi_v:
        raise ValueError("need lo < hi")
    log_z, mean, variance = _truncnorm_core(
        float(mu), float(var), lo_v, hi_v, lo_inf, hi_inf
    )
    return TruncatedMoments(log_z, mean, variance, log_z < LOG_TINY_MASS)


def truncated_normal_moments_array(mu, var, lo, hi):
    """Vectorised truncated moments for finite intervals.

    Same case analysis as :func:`truncated_normal_moments`; returns arrays
    ``(logZ, mean, variance)``.
    """
    from scipy.special import erf, erfc

    mu, var, lo, hi = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu, var, lo, hi))
    )
    sd = np.sqrt(var)
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    flip = a > 0.0
    sign = np.where(flip, -1.0, 1.0)
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)

    log_z = np.empty_like(a)
    m_std = np.empty_like(a)
    v_std = np.empty_like(a)

    narrow = (b - a < _NARROW_WIDTH) & (np.abs(a + b) * (b - a) < 2.0 * _NARROW_TILT)
    if narrow.any():
        c = 0.5 * (a[narrow] + b[narrow])[:, None]
        h = 0.5 * (b[narrow] - a[narrow])[:, None]
        shift = np.abs(c) * h
        u = h * _GL_X
        f = _GL_W * np.exp(-c * u - 0.5 * u * u - shift)
        s0 = f.sum(axis=1)
        m_u = (f * u).sum(axis=1) / s0
        log_z[narrow] = np.log(h[:, 0] * s0) + shift[:, 0] - 0.5 * c[:, 0] ** 2 - _LOG_SQRT_2PI
        m_std[narrow] = c[:, 0] + m_u
        v_std[narrow] = (f * (u - m_u[:, None]) ** 2).sum(axis=1) / s0

    body = (b >= 0.0) & ~narrow
    if body.any():
        ab, bb = a[body], b[body]
        tail_a = 0.5 * erfc(-ab / _SQRT2)
        tail_b = 0.5 * erfc(bb / _SQRT2)
        small = tail_a + tail_b < 0.5
        lz = np.where(
            small,
            np.log1p(-np.where(small, tail_a + tail_b, 0.0)),
            0.0,
        )
        zm = np.where(small, np.exp(lz), 0.5 * (erf(bb / _SQRT2) - erf(ab / _SQRT2)))
        lz = np.where(small, lz, np.log(np.where(small, 1.0, zm)))
        pa = _INV_SQRT_2PI * np.exp(-0.5 * ab * ab)
        pb = _INV_SQRT_2PI * np.exp(-0.5 * bb * bb)
        m = (pa - pb) / zm
        log_z[body] = lz
        m_std[body] = m
        v_std[body] = 1.0 + (ab * pa - bb * pb) / zm - m * m

    tail = ~body & ~narrow
    if tail.any():
        at, bt = a[tail], b[tail]
        u = -at / _SQRT2
        w = -bt / _SQRT2
        ex_w = _erfcx_scipy(w)
        log_ratio = np.log(_erfcx_scipy(u) / ex_w) - (u - w) * (u + w)
        omr = -np.expm1(log_ratio)
        lz = np.log(0.5 * ex_w) - w * w + np.log(omr)
        lam_b = _SQRT_2_OVER_PI / ex_w / omr
        lam_a = lam_b * np.exp(-(u - w) * (u + w))
        m = lam_a - lam_b
        v = 1.0 + at * lam_a - bt * lam_b - m * m
        bad = ~((v > 0.0) & (v <= 1.0))
        if bad.any():
            rate = -0.5 * (at[bad] + bt[bad])
            width = bt[bad] - at[bad]
            sh = np.sinh(0.5 * rate * width)
            vb = 1.0 / (rate * rate) - width * width / (4.0 * sh * sh)
            vb = np.where((vb > 0.0) & (vb <= 1.0), vb, width * width / 12.0)
            v[bad] = vb
        log_z[tail] = lz
        m_std[tail] = m
        v_std[tail] = v

    v_std = np.clip(v_std, 1e-300, 1.0)
    m_std = np.clip(m_std, a, b)
    return log_z, mu + sign * sd * m_std, var * v_std


@dataclass
class SpdMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor."""

    entries: np.ndarray
    factor: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=float, copy=True)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError("SpdMatrix needs a square matrix")
        scale = max(np.max(np.abs(self.entries)), np.finfo(float).tiny)
        if np.max(np.abs(self.entries - self.entries.T)) > 1e-12 * scale:
            raise ValueError("matrix is not symmetric")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def spd_factorize(m: SpdMatrix) -> SpdMatrix:
    """Compute and cache the lower Cholesky factor.

    Raises
    ------
    FactorizationError
        If the matrix is not numerically positive definite.
    """
    try:
        m.factor = np.linalg.cholesky(m.entries)
    except np.linalg.LinAlgError as exc:
        m.factor = None
        raise FactorizationError(str(exc)) from None
    if not np.all(np.isfinite(m.factor)):
        m.factor = None
        raise FactorizationError("non-finite Cholesky factor")
    return m


def _require_factor(m: SpdMatrix) -> np.ndarray:
    if m.factor is None:
        raise RuntimeError("call spd_factorize first")
    return m.factor


def spd_logdet(m: SpdMatrix) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(_require_factor(m)))))


def spd_solve(m: SpdMatrix, v) -> np.ndarray:
    from scipy.linalg import cho_solve

    return cho_solve((_require_factor(m), True), np.asarray(v, dtype=float))
