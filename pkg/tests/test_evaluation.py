import math

import numpy as np
import pytest
import scipy.special as sp
import scipy.stats as st
from hypothesis import given, settings
from hypothesis import strategies as hs
from hypothesis.extra.numpy import arrays

from cutcopula.copulas import CopulaSpec
from cutcopula.evaluation import (
    MetricsReport,
    QuadratureError,
    gaussian_limit_diagnostic,
    interval_coverage,
    point_metrics,
    predictive_kl_copula,
    predictive_kl_marginal,
)
from cutcopula.marginals import MarginalSpec


def test_point_metrics_examples():
    truth = np.array([1.0, 2.0])
    b, r = point_metrics(np.tile(truth, (5, 1)), truth)
    np.testing.assert_array_equal(b, 0.0)
    np.testing.assert_array_equal(r, 0.0)
    est = truth + np.array([[-1.0], [1.0], [-1.0], [1.0]])
    b, r = point_metrics(est, truth)
    np.testing.assert_allclose(b, 0.0, atol=1e-15)
    np.testing.assert_allclose(r, 1.0)


def test_point_metrics_needs_two():
    with pytest.raises(ValueError):
        point_metrics([[1.0]], [1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(float, (7, 3), elements=hs.floats(-100, 100)), arrays(float, 3, elements=hs.floats(-100, 100)))
def test_rmse_bias_variance_identity(est, truth):
    b, r = point_metrics(est, truth)
    np.testing.assert_allclose(r**2, b**2 + est.var(axis=0), rtol=1e-9, atol=1e-9)
    assert np.all(r >= np.abs(b) - 1e-9)


def test_coverage_degenerate_and_calibrated(rng):
    truth = np.array([0.5, -1.0])
    assert np.all(interval_coverage([np.tile(truth, (10, 1))] * 4, truth) == 1.0)
    # posterior N(x, 1) with x ~ N(truth, 1): 95% intervals cover at the nominal rate
    S = 1000
    sets = [truth + rng.standard_normal(2) + rng.standard_normal((2000, 2)) for _ in range(S)]
    cov = interval_coverage(sets, truth)
    assert np.all(np.abs(cov - 0.95) < 3 * math.sqrt(0.95 * 0.05 / S))


def test_marginal_kl_examples():
    n01 = MarginalSpec("normal", (0.0, 1.0))
    assert predictive_kl_marginal(n01, n01) == pytest.approx(0.0, abs=1e-6)
    assert predictive_kl_marginal(n01, MarginalSpec("normal", (0.1, 1.0))) == pytest.approx(0.005, abs=1e-6)
    assert predictive_kl_marginal(n01, st.norm(0.1, 1.0).pdf) == pytest.approx(0.005, abs=1e-6)


def test_marginal_kl_gamma_closed_form():
    a1, b1, a2, b2 = 7.0, 3.0, 5.0, 2.0
    ref = ((a1 - a2) * sp.digamma(a1) - sp.gammaln(a1) + sp.gammaln(a2)
           + a2 * (math.log(b1) - math.log(b2)) + a1 * (b2 - b1) / b1)
    got = predictive_kl_marginal(MarginalSpec("gamma", (a1, b1)), MarginalSpec("gamma", (a2, b2)))
    assert got == pytest.approx(ref, abs=1e-6)


def test_copula_kl_identical_is_zero():
    for spec in (CopulaSpec("gumbel", tau=0.7), CopulaSpec("student_t", tau=0.7, df=1.0)):
        assert predictive_kl_copula(spec, spec) == pytest.approx(0.0, abs=1e-4)


def test_copula_kl_gaussian_closed_form():
    # KL between Gaussian copulas equals KL between standardized bivariate normals
    a, b = CopulaSpec("gaussian", tau=0.3), CopulaSpec("gaussian", tau=0.5)
    r1, r2 = a.rho, b.rho
    ref = 0.5 * (2 * (1 - r1 * r2) / (1 - r2**2) - 2 + math.log((1 - r2**2) / (1 - r1**2)))
    # the trimmed domain drops a negligible tail mass
    assert predictive_kl_copula(a, b) == pytest.approx(ref, abs=2e-3)


def test_copula_kl_positive_and_requires_bivariate():
    assert predictive_kl_copula(CopulaSpec("gumbel", tau=0.72), CopulaSpec("gumbel", tau=0.7)) > 0
    with pytest.raises(ValueError):
        predictive_kl_copula(CopulaSpec("gaussian_m", corr=np.eye(3)), CopulaSpec("gaussian_m", corr=np.eye(3)))


def test_copula_kl_non_convergence():
    with pytest.raises(QuadratureError):
        predictive_kl_copula(CopulaSpec("gumbel", tau=0.6), CopulaSpec("student_t", tau=0.7, df=1.0),
                             tol=1e-14, max_nodes=64)


def test_gaussian_limit_self_consistency(rng):
    cov = np.array([[1.0, 0.4, 0.1], [0.4, 2.0, 0.3], [0.1, 0.3, 0.5]])
    center = np.array([1.0, 0.0, -1.0])
    X = rng.multivariate_normal(center, cov, 10_000)
    d = gaussian_limit_diagnostic(X, center, cov)
    assert np.all(d.projected_tv < 0.05)
    assert np.all((d.covariance_ratio_eigenvalues > 0.8) & (d.covariance_ratio_eigenvalues < 1.25))
    assert d.standardized_mean_discrepancy < 0.1


def test_gaussian_limit_detects_shift(rng):
    X = rng.standard_normal((5000, 2)) + 1.0
    d = gaussian_limit_diagnostic(X, np.zeros(2), np.eye(2))
    assert d.standardized_mean_discrepancy > 1.2
    assert d.projected_tv.max() > 0.1  # directions orthogonal to the shift see nothing


def test_gaussian_limit_singular_covariance(rng):
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_limit_diagnostic(rng.standard_normal((10, 2)), np.zeros(2), np.zeros((2, 2)))


def test_metrics_report_invariants():
    ok = MetricsReport("m", ("a",), np.array([0.1]), np.array([0.2]), np.array([0.9]), {"c": 0.01}, 100, 5, 0)
    rows = ok.rows()
    assert {r["metric"] for r in rows} == {"bias", "rmse", "coverage", "kl"}
    assert set(rows[0]) == {"method", "parameter", "metric", "value", "n", "S", "seed"}
    with pytest.raises(ValueError):
        MetricsReport("m", ("a",), np.array([0.3]), np.array([0.2]), None, {}, 100, 5, 0)
    with pytest.raises(ValueError):
        MetricsReport("m", ("a",), np.array([0.0]), np.array([0.2]), np.array([1.2]), {}, 100, 5, 0)
    with pytest.raises(ValueError):
        MetricsReport("m", ("a",), np.array([0.0]), np.array([0.2]), None, {"c": -0.1}, 100, 5, 0)
