"""Test distributions: seeded samplers and closed-form entropy oracles.

Four families are supported: a multivariate Gaussian, products of
independent Gamma or Beta marginals, and a Gaussian on a noisy linear
manifold ``[x, t_1 x + nu_1, ..., t_m x + nu_m]``.  Samplers draw uniforms
from :class:`numpy.random.Generator` and transform them with Box-Muller and
Marsaglia-Tsang, so a seed fully determines the sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, gammaln
from scipy.special import digamma as _psi

from .knn import SampleSet

FAMILIES = ("gaussian", "gamma", "beta", "manifold")
FD_STEP = 1e-5


class DomainError(ValueError):
    """Point outside (or on the boundary of) a density's support."""


@dataclass(frozen=True)
class EntropyOracle:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("analytic entropy is not finite")


@dataclass(frozen=True, eq=False)
class DistributionSpec:
    """A test distribution.

    ``params`` by family:

    - gaussian: ``mean`` (d,), ``cov`` (d, d)
    - gamma: ``shape`` (d,), ``scale`` (d,)
    - beta: ``alpha`` (d,), ``beta`` (d,)
    - manifold: ``times`` (m,), ``noise_var``; dimension m + 1
    """

    family: str
    params: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        clean = {}
        for key, val in self.params.items():
            clean[key] = np.array(val, dtype=float) if key != "noise_var" else float(val)
        object.__setattr__(self, "params", clean)
        self._validate()

    def _validate(self):
        p = self.params
        if self.family == "gaussian":
            mean, cov = p["mean"].reshape(-1), p["cov"]
            if cov.shape != (mean.size, mean.size):
                raise ValueError("covariance shape does not match mean")
            if not np.allclose(cov, cov.T, rtol=1e-12, atol=0):
                raise ValueError("covariance must be symmetric")
            if np.any(np.diag(cov) <= 0):
                raise ValueError("variances must be positive")
            sd = np.sqrt(np.diag(cov))
            corr = cov / np.outer(sd, sd)
            off = corr[~np.eye(mean.size, dtype=bool)]
            if off.size and np.max(np.abs(off)) >= 1.0:
                raise ValueError("|correlation| must be < 1")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance must be positive definite") from exc
        elif self.family in ("gamma", "beta"):
            a, b = (p["shape"], p["scale"]) if self.family == "gamma" else (p["alpha"], p["beta"])
            if a.ndim != 1 or a.shape != b.shape or a.size == 0:
                raise ValueError("parameter vectors must be 1-D of equal length")
            if np.any(a <= 0) or np.any(b <= 0) or not np.all(np.isfinite(a + b)):
                raise ValueError("shape/scale parameters must be positive")
        else:
            t = p["times"]
            if t.ndim != 1 or t.size == 0 or np.any(t <= 0):
                raise ValueError("observation times must be positive")
            if not p["noise_var"] > 0:
                raise ValueError("noise variance must be positive")

    @property
    def dim(self) -> int:
        p = self.params
        if self.family == "gaussian":
            return p["mean"].size
        if self.family == "gamma":
            return p["shape"].size
        if self.family == "beta":
            return p["alpha"].size
        return p["times"].size + 1

    # constructors -------------------------------------------------------

    @classmethod
    def gaussian(cls, mean, variances, correlation=None, label=""):
        """Gaussian from means, marginal variances and a correlation matrix.

        ``correlation`` may be a full matrix or, in 2-D, a scalar.
        """
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.atleast_1d(np.asarray(variances, dtype=float))
        if var.shape != mean.shape or not np.all(var > 0):
            raise ValueError("need one positive variance per mean component")
        sd = np.sqrt(var)
        if correlation is None:
            corr = np.eye(mean.size)
        elif np.ndim(correlation) == 0:
            if mean.size != 2:
                raise ValueError("scalar correlation needs d = 2")
            corr = np.array([[1.0, correlation], [correlation, 1.0]])
        else:
            corr = np.asarray(correlation, dtype=float)
        return cls("gaussian", {"mean": mean, "cov": corr * np.outer(sd, sd)}, label)

    @classmethod
    def gamma_product(cls, shapes, scales, label=""):
        return cls("gamma", {"shape": shapes, "scale": scales}, label)

    @classmethod
    def beta_product(cls, alphas, betas, label=""):
        return cls("beta", {"alpha": alphas, "beta": betas}, label)

    @classmethod
    def linear_manifold(cls, m, noise_var, times=None, label=""):
        times = np.arange(1.0, m + 1.0) if times is None else times
        return cls("manifold", {"times": times, "noise_var": noise_var}, label)

    # serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        params = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()
        }
        return {"family": self.family, "params": params, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> DistributionSpec:
        return cls(data["family"], dict(data["params"]), data.get("label", ""))


def dimension_ramp(family: str, d: int) -> DistributionSpec:
    """Uncorrelated d-dimensional test case with linearly ramped parameters.

    gaussian: zero mean, variances from 0.2 to 2.0.  gamma: shapes from 0.5
    to 5.0, scales from 1.0 to 2.0.  beta: alpha ascends from 0.5 to 5.0
    while beta descends from 5.0 to 0.5.
    """
    if family == "gaussian":
        var = np.linspace(0.2, 2.0, d)
        return DistributionSpec("gaussian", {"mean": np.zeros(d), "cov": np.diag(var)}, f"gaussian-ramp-{d}")
    if family == "gamma":
        return DistributionSpec.gamma_product(
            np.linspace(0.5, 5.0, d), np.linspace(1.0, 2.0, d), f"gamma-ramp-{d}"
        )
    if family == "beta":
        return DistributionSpec.beta_product(
            np.linspace(0.5, 5.0, d), np.linspace(5.0, 0.5, d), f"beta-ramp-{d}"
        )
    raise ValueError(f"no dimension ramp for family {family!r}")


def table_one() -> list[DistributionSpec]:
    """The three low-dimensional cases of the k, p, N parameter study."""
    return [
        DistributionSpec.gaussian([0.0, 0.0], [1.0, 1.0], 0.5, label="gaussian-2d-r0.5"),
        DistributionSpec.gamma_product([1.5, 3.0, 20.0], [2.0, 2.5, 1.0], label="gamma-3d"),
        DistributionSpec.beta_product(
            [2.0, 2.0, 0.5, 5.0], [2.0, 5.0, 0.5, 1.0], label="beta-4d"
        ),
    ]


# ---------------------------------------------------------------------------
# samplers


def _box_muller(rng: np.random.Generator, size: int) -> np.ndarray:
    half = (size + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    # 1 - u lies in (0, 1], keeping the log finite
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * math.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]


def _standard_normal(rng, shape) -> np.ndarray:
    return _box_muller(rng, int(np.prod(shape))).reshape(shape)


def _gamma_unit(rng, shape: float, n: int) -> np.ndarray:
    """Marsaglia-Tsang draws of Gamma(shape, 1)."""
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    dd = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * dd)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        batch = need + need // 8 + 16
        z = _box_muller(rng, batch)
        u = rng.random(batch)
        v = (1.0 + c * z) ** 3
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * z * z + dd - dd * v + dd * np.log(v))
        acc = dd * v[ok][:need]
        out[filled : filled + acc.size] = acc
        filled += acc.size
    if boost:
        # Gamma(a) = Gamma(a+1) * U^(1/a)
        out *= rng.random(n) ** (1.0 / shape)
    return out


def sample(spec: DistributionSpec, n: int, seed) -> SampleSet:
    """``n`` independent draws from ``spec``; identical for identical seeds."""
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    p = spec.params
    if spec.family == "gaussian":
        chol = np.linalg.cholesky(p["cov"])
        x = p["mean"] + _standard_normal(rng, (n, spec.dim)) @ chol.T
    elif spec.family == "gamma":
        x = np.column_stack(
            [_gamma_unit(rng, k, n) * th for k, th in zip(p["shape"], p["scale"])]
        )
    elif spec.family == "beta":
        cols = []
        for a, b in zip(p["alpha"], p["beta"]):
            ga = _gamma_unit(rng, a, n)
            gb = _gamma_unit(rng, b, n)
            cols.append(ga / (ga + gb))
        x = np.column_stack(cols)
    else:
        t = p["times"]
        z = _standard_normal(rng, (n, t.size + 1))
        base = z[:, :1]
        x = np.hstack([base, base * t + math.sqrt(p["noise_var"]) * z[:, 1:]])
    return SampleSet(x)


# ---------------------------------------------------------------------------
# oracles


def analytic_entropy(spec: DistributionSpec) -> EntropyOracle:
    """Closed-form differential entropy in nats."""
    p = spec.params
    if spec.family == "gaussian":
        _, logdet = np.linalg.slogdet(p["cov"])
        h = 0.5 * (spec.dim * math.log(2.0 * math.pi * math.e) + logdet)
    elif spec.family == "gamma":
        k, th = p["shape"], p["scale"]
        h = math.fsum(k + np.log(th) + gammaln(k) + (1.0 - k) * _psi(k))
    elif spec.family == "beta":
        a, b = p["alpha"], p["beta"]
        s = _psi(a + b)
        h = math.fsum(betaln(a, b) - (a - 1.0) * (_psi(a) - s) - (b - 1.0) * (_psi(b) - s))
    else:
        # det [[1, t^T], [t, t t^T + s I]] = s^m by the Schur complement
        m = p["times"].size
        h = 0.5 * ((m + 1) * math.log(2.0 * math.pi * math.e) + m * math.log(p["noise_var"]))
    return EntropyOracle(float(h))


def logpdf(spec: DistributionSpec, x) -> np.ndarray:
    """Log density at the rows of ``x``; ``-inf`` outside the support."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = spec.params
    if spec.family in ("gaussian", "manifold"):
        mean, cov = _gaussian_moments(spec)
        chol = np.linalg.cholesky(cov)
        white = np.linalg.solve(chol, (x - mean).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        return -0.5 * (np.sum(white**2, axis=0) + spec.dim * math.log(2.0 * math.pi) + logdet)
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.family == "gamma":
            k, th = p["shape"], p["scale"]
            terms = (k - 1.0) * np.log(x) - x / th - gammaln(k) - k * np.log(th)
            inside = x > 0
        else:
            a, b = p["alpha"], p["beta"]
            terms = (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)
            inside = (x > 0) & (x < 1)
    out = np.where(inside, terms, -np.inf).sum(axis=1)
    return np.where(np.all(inside, axis=1), out, -np.inf)


def _gaussian_moments(spec):
    if spec.family == "gaussian":
        return spec.params["mean"], spec.params["cov"]
    t = np.concatenate([[1.0], spec.params["times"]])
    cov = np.outer(t, t)
    cov[1:, 1:] += spec.params["noise_var"] * np.eye(t.size - 1)
    return np.zeros(t.size), cov


def _grad_log(spec, x):
    p = spec.params
    if spec.family == "gaussian":
        return -np.linalg.solve(p["cov"], x - p["mean"])
    if spec.family == "gamma":
        return (p["shape"] - 1.0) / x - 1.0 / p["scale"]
    return (p["alpha"] - 1.0) / x - (p["beta"] - 1.0) / (1.0 - x)


def _check_interior(spec, x, margin):
    if spec.family == "gamma" and np.any(x <= margin):
        raise DomainError("gamma density needs every coordinate > 0")
    if spec.family == "beta" and np.any((x <= margin) | (x >= 1.0 - margin)):
        raise DomainError("beta density needs every coordinate inside (0, 1)")


def density_gradient(spec: DistributionSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_interior(spec, x, 0.0)
    return math.exp(logpdf(spec, x)[0]) * _grad_log(spec, x)


def fd_hessian(spec: DistributionSpec, x, h: float = FD_STEP) -> np.ndarray:
    """Density Hessian by central differences of the analytic gradient.

    One Richardson step combines steps ``h`` and ``h/2`` (error O(h^4)).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_interior(spec, x, h)
    d = x.size

    def central(step):
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            cols.append((density_gradient(spec, x + e) - density_gradient(spec, x - e)) / (2 * step))
        hess = np.column_stack(cols)
        return 0.5 * (hess + hess.T)

    return (4.0 * central(h / 2) - central(h)) / 3.0


def analytic_pdf_and_hessian(spec: DistributionSpec, x):
    """Density at ``x`` and the extreme eigenvalues of its Hessian there.

    Gaussian Hessians are exact; Gamma and Beta use :func:`fd_hessian`.

    Returns
    -------
    density, (lambda_min, lambda_max)
    """
    if spec.family == "manifold":
        raise ValueError("manifold family is not supported here")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != spec.dim:
        raise ValueError("point dimension does not match the distribution")
    if spec.dim > 3:
        raise ValueError("Hessian oracle is limited to d <= 3")
    if spec.family == "gaussian":
        dens = math.exp(logpdf(spec, x)[0])
        g = _grad_log(spec, x)
        hess = dens * (np.outer(g, g) - np.linalg.inv(spec.params["cov"]))
    else:
        _check_interior(spec, x, FD_STEP)
        dens = math.exp(logpdf(spec, x)[0])
        hess = fd_hessian(spec, x)
    eig = np.linalg.eigvalsh(hess)
    return dens, (float(eig[0]), float(eig[-1]))
