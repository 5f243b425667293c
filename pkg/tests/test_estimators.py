"""KL and kpN estimators, their error paths and the mass diagnostics."""
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kpn_entropy.distributions import DistributionSpec, analytic_entropy, sample
from kpn_entropy.epmgp import AxisAlignedBox
from kpn_entropy.estimators import (
    CovarianceError,
    DuplicateSampleError,
    EstimatorConfig,
    _jittered_cholesky,
    estimate_both,
    estimate_kl,
    estimate_kpn,
    kl_mass_bounds,
    log_mass_identity_check,
    neighborhood_summary,
    probability_mass_quadrature,
)
from kpn_entropy.numerics import digamma

NORMAL_1D = 0.5 * math.log(2 * math.pi * math.e)


def test_kl_two_points():
    r = estimate_kl(np.array([0.0, 1.0]), k=1)
    assert r.estimate == pytest.approx(1 + math.log(2), abs=1e-14)
    assert r.method == "KL" and r.n == 2 and r.d == 1 and r.p is None


def test_duplicates_are_reported():
    with pytest.raises(DuplicateSampleError) as info:
        estimate_kl(np.array([0.0, 0.0, 1.0]), k=1)
    assert info.value.indices == [0, 1]
    with pytest.raises(DuplicateSampleError):
        estimate_kpn(np.array([0.0, 0.0, 1.0, 2.0]), EstimatorConfig(k=1, p=2))


def test_kl_normal_over_seeds():
    spec = DistributionSpec.gaussian([0.0], [1.0])
    vals = [estimate_kl(sample(spec, 10_000, seed), 4).estimate for seed in range(10)]
    assert abs(np.mean(vals) - NORMAL_1D) < 0.05


def test_kpn_normal_1d():
    spec = DistributionSpec.gaussian([0.0], [1.0])
    r = estimate_kpn(sample(spec, 10_000, 3), EstimatorConfig(k=4, p=200))
    assert abs(r.estimate - NORMAL_1D) < 0.1
    assert r.ep_nonconverged_count == 0


@pytest.mark.parametrize("k", [3, 5])
def test_kpn_correlated_gaussian_2d(k):
    spec = DistributionSpec.gaussian([0.0, 0.0], [1.0, 1.0], 0.5)
    truth = analytic_entropy(spec).value
    r = estimate_kpn(sample(spec, 10_000, 20 + k), EstimatorConfig(k=k, p=200))
    assert abs(r.estimate - truth) / abs(truth) < 0.10


def test_uniform_kl_and_kpn_agree():
    # flat density: the local Gaussian is nearly constant over each ball
    x = np.random.default_rng(0).uniform(size=(5000, 1))
    kl, kp = estimate_both(x, EstimatorConfig(k=4, p=100))
    assert abs(kl.estimate - kp.estimate) < 0.05
    assert abs(kl.estimate) < 0.05


def test_reports_sum_their_terms(rng):
    x = rng.normal(size=(400, 3))
    kl, kp = estimate_both(x, EstimatorConfig(k=4, p=30))
    for r in (kl, kp):
        total = r.term_psi
        for v in r.term_geom.values():
            total += v
        assert r.estimate == total
        assert r.term_psi == digamma(400) - digamma(4)
    assert list(kl.term_geom) == ["log_unit_ball_volume", "d_mean_log_eps"]
    assert list(kp.term_geom) == ["neg_mean_log_g", "mean_log_G"]
    assert kl.term_geom["log_unit_ball_volume"] == 3 * math.log(2)
    d = kp.to_dict()
    assert d["config"]["p"] == 30 and d["estimate"] == kp.estimate


def test_estimate_both_matches_separate_calls(rng):
    x = rng.normal(size=(300, 2))
    cfg = EstimatorConfig(k=3, p=25)
    kl, kp = estimate_both(x, cfg)
    assert kl.estimate == estimate_kl(x, 3).estimate
    assert kp.estimate == estimate_kpn(x, cfg).estimate


def test_translation_and_scaling(rng):
    x = rng.normal(size=(500, 2)) @ np.array([[1.0, 0.4], [0.0, 0.7]])
    cfg = EstimatorConfig(k=4, p=40)
    base_kl, base_kp = estimate_both(x, cfg)
    moved_kl, moved_kp = estimate_both(x + np.array([5.0, -3.0]), cfg)
    assert moved_kl.estimate == pytest.approx(base_kl.estimate, abs=1e-9)
    assert moved_kp.estimate == pytest.approx(base_kp.estimate, abs=1e-9)
    for a in (2.0, 0.37):
        s_kl, s_kp = estimate_both(a * x, cfg)
        assert s_kl.estimate == pytest.approx(base_kl.estimate + 2 * math.log(a), abs=1e-9)
        assert s_kp.estimate == pytest.approx(base_kp.estimate + 2 * math.log(a), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(6, 30), st.integers(1, 3)),
               elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False)),
    st.randoms(use_true_random=False),
)
def test_kl_row_order_invariance(x, random):
    if np.any(np.max(np.abs(x[:, None] - x[None]), axis=-1)[~np.eye(len(x), dtype=bool)] == 0):
        return  # duplicates are an error, covered elsewhere
    perm = list(range(len(x)))
    random.shuffle(perm)
    assert estimate_kl(x[perm], 2).estimate == estimate_kl(x, 2).estimate


def test_rank_deficient_local_fit_warns(rng):
    x = rng.normal(size=(60, 3))
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        r = estimate_kpn(x, EstimatorConfig(k=2, p=3))
    assert math.isfinite(r.estimate)


def test_jitter_gives_up_on_zero_covariance():
    with pytest.raises(CovarianceError) as info:
        _jittered_cholesky(np.zeros((2, 2)), 17, EstimatorConfig())
    assert info.value.index == 17
    assert isinstance(info.value, np.linalg.LinAlgError)


def test_jitter_rescues_rank_deficient_covariance():
    original = np.array([[1.0, 1.0], [1.0, 1.0]])
    cov = original.copy()
    chol = _jittered_cholesky(cov, 0, EstimatorConfig())
    assert np.all(np.isfinite(chol)) and np.all(np.diag(chol) > 0)
    # the jittered matrix is written back and factorised exactly
    np.testing.assert_allclose(chol @ chol.T, cov, rtol=1e-12)
    jitter = cov - original
    assert jitter[0, 1] == 0.0 and 0.0 < jitter[0, 0] <= 1e-4


@pytest.mark.parametrize(
    "cfg, n",
    [
        (EstimatorConfig(k=0, p=5), 10),
        (EstimatorConfig(k=6, p=5), 10),
        (EstimatorConfig(k=2, p=10), 10),
        (EstimatorConfig(k=1, p=1), 10),
        (EstimatorConfig(k=2, p=5, jitter_start=1e-3, jitter_max=1e-4), 10),
    ],
)
def test_invalid_config(cfg, n):
    with pytest.raises(ValueError):
        estimate_kpn(np.random.default_rng(0).normal(size=(n, 1)), cfg)


def test_kl_rejects_bad_k():
    with pytest.raises(ValueError):
        estimate_kl(np.arange(5.0), 5)


def test_neighborhood_summary_matches_estimate(rng):
    x = rng.normal(size=(80, 2))
    cfg = EstimatorConfig(k=3, p=12)
    rep = estimate_kpn(x, cfg)
    sums = [neighborhood_summary(x, cfg, i) for i in range(80)]
    assert math.fsum(s.log_G for s in sums) / 80 == pytest.approx(rep.term_geom["mean_log_G"], abs=1e-12)
    assert -math.fsum(s.log_g_at_xi for s in sums) / 80 == pytest.approx(
        rep.term_geom["neg_mean_log_g"], abs=1e-12
    )
    s = sums[5]
    assert s.neighbor_indices[0] == 5 and len(s.neighbor_indices) == 12
    pts = x[s.neighbor_indices]
    np.testing.assert_allclose(s.local_mean, pts.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(s.local_cov.entries, np.cov(pts.T), rtol=1e-9, atol=1e-11)
    assert s.ep_converged and s.log_G <= 0.0 and s.log_g_at_xi <= 0.0


def test_exclude_self_uses_neighbours_only(rng):
    x = rng.normal(size=(50, 2))
    s = neighborhood_summary(x, EstimatorConfig(k=3, p=10, include_self=False), 4)
    assert 4 not in s.neighbor_indices and len(s.neighbor_indices) == 10


def test_quadrature_examples():
    box = AxisAlignedBox(np.array([0.5]), 0.25)
    uniform = lambda p: np.where((p[:, 0] >= 0) & (p[:, 0] <= 1), 1.0, 0.0)
    assert probability_mass_quadrature(uniform, box) == pytest.approx(0.5, abs=1e-14)
    normal = lambda p: np.exp(-0.5 * p[:, 0] ** 2) / math.sqrt(2 * math.pi)
    got = probability_mass_quadrature(normal, AxisAlignedBox(np.zeros(1), 1.0))
    assert got == pytest.approx(0.6826894921370859, abs=1e-13)
    with pytest.raises(NotImplementedError):
        probability_mass_quadrature(normal, AxisAlignedBox(np.zeros(4), 1.0))


def test_kl_mass_bounds_examples():
    assert kl_mass_bounds(0.0, 0.0, 0.1, 3) == (0.0, 0.0)
    lo, hi = kl_mass_bounds(0.5, 1.0, 0.1, 1)
    assert hi == pytest.approx(1e-3 / 3, rel=1e-14)
    assert lo == pytest.approx(0.5e-3 / 3, rel=1e-14)
    # negative curvature: ordered by magnitude
    assert kl_mass_bounds(-2.0, -1.0, 0.1, 1) == pytest.approx((1e-3 / 3, 2e-3 / 3))
    # indefinite: no positive lower bound
    assert kl_mass_bounds(-1.0, 2.0, 0.1, 2)[0] == 0.0


def test_log_mass_identity_small():
    mean, se, target = log_mass_identity_check(200, 3, 100, seed=5)
    assert target == pytest.approx(digamma(3) - digamma(200), abs=1e-14)
    assert abs(mean - target) <= 3 * se
