"""Samplers, entropy oracles and density curvature."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpn_entropy.distributions import (
    DistributionSpec,
    DomainError,
    analytic_entropy,
    analytic_pdf_and_hessian,
    dimension_ramp,
    fd_hessian,
    logpdf,
    sample,
    table_one,
)

ALL_SPECS = table_one() + [
    DistributionSpec.linear_manifold(3, 1e-2),
    dimension_ramp("gamma", 5),
    dimension_ramp("beta", 5),
]


def test_gaussian_sample_moments():
    n = 100_000
    x = sample(DistributionSpec.gaussian([0.0], [1.0]), n, 0).data[:, 0]
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert x.var() == pytest.approx(1.0, rel=0.05)


def test_correlated_gaussian_moments():
    spec = DistributionSpec.gaussian([1.0, -2.0], [1.0, 4.0], 0.5)
    x = sample(spec, 200_000, 1).data
    np.testing.assert_allclose(x.mean(axis=0), [1.0, -2.0], atol=0.02)
    np.testing.assert_allclose(np.cov(x.T), spec.params["cov"], rtol=0.03, atol=0.02)


@pytest.mark.parametrize("k, theta", [(3.0, 2.0), (0.5, 1.0), (20.0, 0.3)])
def test_gamma_moments(k, theta):
    n = 100_000
    x = sample(DistributionSpec.gamma_product([k], [theta]), n, 2).data[:, 0]
    se = math.sqrt(k) * theta / math.sqrt(n)
    assert abs(x.mean() - k * theta) < 3 * se
    assert x.var() == pytest.approx(k * theta**2, rel=0.05)
    assert np.all(x > 0)


@pytest.mark.parametrize("a, b", [(2.0, 5.0), (0.5, 0.5), (5.0, 1.0)])
def test_beta_moments(a, b):
    n = 100_000
    x = sample(DistributionSpec.beta_product([a], [b]), n, 3).data[:, 0]
    var = a * b / ((a + b) ** 2 * (a + b + 1))
    assert abs(x.mean() - a / (a + b)) < 4 * math.sqrt(var / n)
    assert x.var() == pytest.approx(var, rel=0.05)
    assert np.all((x > 0) & (x < 1))


def test_manifold_structure():
    spec = DistributionSpec.linear_manifold(4, 1e-3)
    x = sample(spec, 50_000, 4).data
    assert x.shape == (50_000, 5)
    resid = x[:, 1:] - x[:, :1] * np.arange(1.0, 5.0)
    assert resid.var(axis=0) == pytest.approx(np.full(4, 1e-3), rel=0.05)


def test_same_seed_same_sample():
    for spec in ALL_SPECS:
        a, b = sample(spec, 500, 9), sample(spec, 500, 9)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, sample(spec, 500, 10).data)


def test_entropy_examples():
    assert analytic_entropy(DistributionSpec.gaussian([0.0], [1.0])).value == pytest.approx(
        0.5 * math.log(2 * math.pi * math.e), abs=1e-14
    )
    assert analytic_entropy(DistributionSpec.beta_product([1.0], [1.0])).value == pytest.approx(0.0, abs=1e-15)
    two_d = DistributionSpec.gaussian([0.0, 0.0], [1.0, 1.0], 0.5)
    assert analytic_entropy(two_d).value == pytest.approx(
        math.log(2 * math.pi * math.e) + 0.5 * math.log(0.75), abs=1e-13
    )
    man = DistributionSpec.linear_manifold(2, 1e-3)
    assert analytic_entropy(man).value == pytest.approx(
        1.5 * math.log(2 * math.pi * math.e) + 2 * math.log(math.sqrt(1e-3)), abs=1e-12
    )
    # exponential(scale 2): 1 + ln 2
    assert analytic_entropy(DistributionSpec.gamma_product([1.0], [2.0])).value == pytest.approx(
        1 + math.log(2), abs=1e-14
    )


def test_manifold_entropy_matches_log_determinant():
    spec = DistributionSpec.linear_manifold(5, 0.02)
    t = np.arange(0.0, 6.0)
    t[0] = 1.0
    cov = np.outer(t, t) + 0.02 * np.diag([0.0] + [1.0] * 5)
    want = 0.5 * (6 * math.log(2 * math.pi * math.e) + np.linalg.slogdet(cov)[1])
    assert analytic_entropy(spec).value == pytest.approx(want, abs=1e-10)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.label or s.family)
def test_entropy_matches_monte_carlo_plugin(spec):
    n = 200_000
    lp = logpdf(spec, sample(spec, n, 5).data)
    est, se = -lp.mean(), lp.std() / math.sqrt(n)
    assert abs(est - analytic_entropy(spec).value) < 4 * se


def test_logpdf_integrates_to_one_in_1d():
    from scipy.integrate import quad

    for spec in (DistributionSpec.gamma_product([2.5], [1.5]), DistributionSpec.beta_product([2.0], [3.0])):
        hi = 60.0 if spec.family == "gamma" else 1.0
        val, _ = quad(lambda v: math.exp(logpdf(spec, [[v]])[0]), 0.0, hi, limit=200)
        assert val == pytest.approx(1.0, abs=1e-9)
    assert logpdf(DistributionSpec.beta_product([2.0], [3.0]), [[1.5]])[0] == -math.inf


def _product_hessian(grad_log, dgrad_log, dens):
    return dens * (np.outer(grad_log, grad_log) + np.diag(dgrad_log))


@pytest.mark.parametrize(
    "spec, x",
    [
        (DistributionSpec.gamma_product([1.5, 3.0, 20.0], [2.0, 2.5, 1.0]), [1.0, 6.0, 19.0]),
        (DistributionSpec.gamma_product([2.5], [1.0]), [0.7]),
        (DistributionSpec.beta_product([2.0, 2.0, 5.0], [2.0, 5.0, 1.0]), [0.3, 0.2, 0.8]),
    ],
)
def test_fd_hessian_matches_closed_form(spec, x):
    x = np.array(x)
    p = spec.params
    dens = math.exp(logpdf(spec, x)[0])
    if spec.family == "gamma":
        gl = (p["shape"] - 1) / x - 1 / p["scale"]
        dgl = -(p["shape"] - 1) / x**2
    else:
        gl = (p["alpha"] - 1) / x - (p["beta"] - 1) / (1 - x)
        dgl = -(p["alpha"] - 1) / x**2 - (p["beta"] - 1) / (1 - x) ** 2
    exact = _product_hessian(gl, dgl, dens)
    fd = fd_hessian(spec, x)
    scale = np.max(np.abs(exact))
    assert np.max(np.abs(fd - exact)) <= 1e-6 * scale
    _, (lo, hi) = analytic_pdf_and_hessian(spec, x)
    eig = np.linalg.eigvalsh(exact)
    assert lo == pytest.approx(eig[0], abs=1e-6 * scale)
    assert hi == pytest.approx(eig[-1], abs=1e-6 * scale)


def test_hessian_examples():
    std = DistributionSpec.gaussian([0.0], [1.0])
    dens, (lo, hi) = analytic_pdf_and_hessian(std, [0.0])
    assert dens == pytest.approx(0.3989422804014327, abs=1e-15)
    assert lo == hi == pytest.approx(-dens, abs=1e-15)
    dens2, (lo2, _) = analytic_pdf_and_hessian(std, [2.0])
    assert lo2 == pytest.approx(3 * dens2, rel=1e-12) and lo2 > 0
    _, (ul, uh) = analytic_pdf_and_hessian(DistributionSpec.beta_product([1.0], [1.0]), [0.4])
    assert abs(ul) < 1e-8 and abs(uh) < 1e-8


def test_hessian_domain_errors():
    with pytest.raises(DomainError):
        analytic_pdf_and_hessian(DistributionSpec.beta_product([2.0], [2.0]), [1.0])
    with pytest.raises(DomainError):
        analytic_pdf_and_hessian(DistributionSpec.gamma_product([2.0], [1.0]), [-0.5])
    with pytest.raises(ValueError):
        analytic_pdf_and_hessian(DistributionSpec.linear_manifold(1, 0.1), [0.0, 0.0])
    with pytest.raises(ValueError):
        analytic_pdf_and_hessian(dimension_ramp("gaussian", 4), np.zeros(4))


@pytest.mark.parametrize(
    "make",
    [
        lambda: DistributionSpec("cauchy", {}),
        lambda: DistributionSpec.gaussian([0.0, 0.0], [1.0, 1.0], 1.0),
        lambda: DistributionSpec.gaussian([0.0], [-1.0]),
        lambda: DistributionSpec.gaussian([0.0], [1.0], 0.5),
        lambda: DistributionSpec.gamma_product([1.0, 2.0], [1.0]),
        lambda: DistributionSpec.gamma_product([0.0], [1.0]),
        lambda: DistributionSpec.beta_product([1.0], [-2.0]),
        lambda: DistributionSpec.linear_manifold(2, 0.0),
        lambda: dimension_ramp("manifold", 3),
    ],
)
def test_invalid_specs(make):
    with pytest.raises(ValueError):
        make()


def test_sample_rejects_tiny_n():
    with pytest.raises(ValueError):
        sample(table_one()[0], 1, 0)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(ALL_SPECS), st.text(max_size=10))
def test_spec_roundtrip(spec, label):
    spec = DistributionSpec(spec.family, spec.params, label)
    back = DistributionSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back.family == spec.family and back.label == label and back.dim == spec.dim
    for key, val in spec.params.items():
        np.testing.assert_array_equal(back.params[key], val)
    assert analytic_entropy(back).value == analytic_entropy(spec).value


def test_ramps_and_table():
    for fam in ("gaussian", "gamma", "beta"):
        for d in (1, 4, 80):
            spec = dimension_ramp(fam, d)
            assert spec.dim == d and math.isfinite(analytic_entropy(spec).value)
    fams = [s.family for s in table_one()]
    assert fams == ["gaussian", "gamma", "beta"]
    assert [s.dim for s in table_one()] == [2, 3, 4]
