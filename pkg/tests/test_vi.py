import math

import jax.numpy as jnp
import numpy as np
import pytest
import scipy.stats as st

from cutcopula.copulas import compute_ranks
from cutcopula.harness import sim2_config, simulate_dgp
from cutcopula.mcmc import OptimizationError
from cutcopula.model import (
    CopulaModel,
    Dataset,
    LogTarget,
    PriorSpec,
    PriorTerm,
    cut1_stage1_target,
    joint_target,
)
from cutcopula.vi import (
    AdadeltaState,
    AuxiliaryVariationalFamily,
    GaussianVariationalFamily,
    VISettings,
    adadelta_init,
    adadelta_step,
    elbo_estimate,
    elbo_grad,
    fit_augmented_type2_vi,
    fit_cut_vi,
    fit_gaussian_vi,
    fit_vi,
    reparam_sample,
)

ACCURATE = VISettings(steps=6000, samples_per_step=16, average_tail=0.5, init_scale=0.5)


def _gauss_target(mean, cov, shift=0.0):
    mean = jnp.asarray(mean, dtype=float)
    prec = jnp.linalg.inv(jnp.asarray(cov, dtype=float))
    return LogTarget.from_callable(lambda z: shift - 0.5 * (z - mean) @ prec @ (z - mean), len(mean))


def _conjugate(n=20, seed=0):
    y = np.random.default_rng(seed).normal(0.7, 1.0, n)
    yj = jnp.asarray(y)
    target = LogTarget.from_callable(
        lambda z: jnp.sum(-0.5 * math.log(2 * math.pi) - 0.5 * (yj - z[0]) ** 2)
        - 0.5 * math.log(2 * math.pi) - 0.5 * z[0] ** 2, 1)
    log_z = st.multivariate_normal(np.zeros(n), np.eye(n) + np.ones((n, n))).logpdf(y)
    return target, y.sum() / (n + 1), 1.0 / (n + 1), log_z


def test_reparam_examples(rng):
    q = GaussianVariationalFamily(np.array([1.0, -1.0]), np.array([[0.5, 0.0], [0.2, 1.5]]))
    eta, z = reparam_sample(q, z=np.zeros(2))
    np.testing.assert_array_equal(eta, q.mu)
    eta, _ = reparam_sample(GaussianVariationalFamily(np.zeros(1), np.array([[2.0]])), z=np.ones(1))
    assert eta[0] == 2.0
    draws = q.sample(rng, 100_000)
    err = np.linalg.norm(np.cov(draws, rowvar=False) - q.covariance) / np.linalg.norm(q.covariance)
    assert err < 0.02


def test_family_validation():
    with pytest.raises(ValueError):
        GaussianVariationalFamily(np.zeros(2), np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianVariationalFamily(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_family_blocks_marginal_and_conditional(rng):
    L = np.tril(rng.standard_normal((4, 4)), -1) + np.diag(rng.uniform(0.5, 1.5, 4))
    q = GaussianVariationalFamily(rng.standard_normal(4), L, (2, 2))
    m1, c1 = q.marginal_eta1()
    np.testing.assert_allclose(c1, q.covariance[:2, :2], rtol=1e-12)
    eta1 = rng.standard_normal(2)
    m2, c2 = q.conditional_eta2(eta1)
    S = q.covariance
    ref_m = q.mu[2:] + S[2:, :2] @ np.linalg.solve(S[:2, :2], eta1 - q.mu[:2])
    ref_c = S[2:, 2:] - S[2:, :2] @ np.linalg.solve(S[:2, :2], S[:2, 2:])
    np.testing.assert_allclose(m2, ref_m, rtol=1e-10)
    np.testing.assert_allclose(c2, ref_c, rtol=1e-10, atol=1e-12)


def test_entropy_increases_with_diag(rng):
    q = GaussianVariationalFamily.default(3, 0.5)
    for k in range(3):
        L = q.L.copy()
        L[k, k] *= 1.1
        assert GaussianVariationalFamily(q.mu, L).entropy() > q.entropy()
    np.testing.assert_allclose(q.entropy(), st.multivariate_normal(q.mu, q.covariance).entropy(), rtol=1e-12)


def test_elbo_of_own_density_is_zero(rng):
    q = GaussianVariationalFamily(np.array([0.3, -0.2]), np.array([[1.0, 0.0], [0.4, 0.7]]))
    prec = np.linalg.inv(q.covariance)
    ld = -np.log(2 * np.pi) - np.log(np.prod(np.diag(q.L)))
    t = LogTarget.from_callable(lambda z: ld - 0.5 * (z - q.mu) @ prec @ (z - q.mu), 2)
    assert elbo_estimate(q, t, rng, 100) == pytest.approx(0.0, abs=1e-10)


def test_elbo_conjugate_log_evidence(rng):
    target, m, v, log_z = _conjugate()
    exact = GaussianVariationalFamily(np.array([m]), np.array([[math.sqrt(v)]]))
    assert elbo_estimate(exact, target, rng, 10) == pytest.approx(log_z, abs=1e-9)
    fit = fit_gaussian_vi(target, settings=ACCURATE, rng=rng)
    assert elbo_estimate(fit.family, target, rng, 20_000) == pytest.approx(log_z, abs=1e-3)
    assert fit.family.mu[0] == pytest.approx(m, abs=1e-2)
    assert fit.family.covariance[0, 0] == pytest.approx(v, abs=1e-2)


def test_elbo_below_log_evidence_for_non_gaussian(rng):
    # Gamma(3, 1) on the log scale: log h(z) = 3 z - exp(z) - log Gamma(3), evidence 1
    t = LogTarget.from_callable(lambda z: 3 * z[0] - jnp.exp(z[0]) - math.lgamma(3.0), 1)
    fit = fit_gaussian_vi(t, settings=ACCURATE, rng=rng)
    assert elbo_estimate(fit.family, t, rng, 50_000) < -1e-3


def test_elbo_resample_then_error(rng):
    t = LogTarget.from_callable(lambda z: jnp.where(z[0] > 50.0, 0.0, -jnp.inf), 1)
    with pytest.raises(OptimizationError):
        elbo_estimate(GaussianVariationalFamily.default(1), t, rng, 5)


def test_elbo_grad_stationary_at_exact_posterior(rng):
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, -0.4], [0.0, -0.4, 0.5]])
    mean = np.array([1.0, -1.0, 0.5])
    q = GaussianVariationalFamily(mean, np.linalg.cholesky(cov))
    g = elbo_grad(q, _gauss_target(mean, cov), rng, 4000)
    assert np.max(np.abs(g["mu"])) < 0.15
    assert np.max(np.abs(g["Lr"])) < 0.15


def test_elbo_grad_matches_finite_differences(rng):
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, -0.4], [0.0, -0.4, 0.5]])
    t = _gauss_target([1.0, -1.0, 0.5], cov)
    L = np.array([[0.8, 0, 0], [0.1, 1.2, 0], [-0.3, 0.2, 0.6]])
    q = GaussianVariationalFamily(np.array([0.2, 0.1, -0.3]), L)
    Z = rng.standard_normal((8, 3))
    g = elbo_grad(q, t, z=Z)
    raw = q.raw()
    for key in ("mu", "Lr"):
        base = np.asarray(raw[key])
        for idx in np.ndindex(base.shape):
            if key == "Lr" and idx[1] > idx[0]:
                continue
            h = 1e-5
            vals = []
            for sgn in (1, -1):
                p = {k: np.asarray(v).copy() for k, v in raw.items()}
                p[key][idx] += sgn * h
                vals.append(elbo_estimate(GaussianVariationalFamily.from_raw(p), t, z=Z))
            fd = (vals[0] - vals[1]) / (2 * h)
            assert g[key][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_elbo_grad_invariant_to_constant(rng):
    cov = np.eye(2)
    q = GaussianVariationalFamily.default(2, 0.7)
    Z = rng.standard_normal((5, 2))
    a = elbo_grad(q, _gauss_target([1.0, 2.0], cov), z=Z)
    b = elbo_grad(q, _gauss_target([1.0, 2.0], cov, shift=123.4), z=Z)
    np.testing.assert_allclose(a["mu"], b["mu"], rtol=1e-12)
    np.testing.assert_allclose(a["Lr"], b["Lr"], rtol=1e-12)


def test_adadelta_recursion():
    params = {"x": jnp.zeros(3)}
    s = adadelta_init(params)
    assert isinstance(s, AdadeltaState) and (s.rho, s.eps) == (0.85, 1e-6)
    upd, _ = adadelta_step(s, {"x": jnp.zeros(3)})
    np.testing.assert_array_equal(upd["x"], 0.0)
    upd, s1 = adadelta_step(s, {"x": jnp.ones(3)})
    expected = math.sqrt(1e-6) / math.sqrt(1e-6 + 0.15)
    np.testing.assert_allclose(upd["x"], expected, rtol=1e-14)
    assert np.all(np.asarray(s1.sq_grad["x"]) >= 0) and np.all(np.asarray(s1.sq_update["x"]) >= 0)
    state = s
    for _ in range(50):
        upd, state = adadelta_step(state, {"x": jnp.array([1.0, -2.0, 0.5])})
        np.testing.assert_array_equal(np.sign(upd["x"]), [1, -1, 1])


def test_fit_gaussian_in_family_2d(rng):
    mean, cov = np.array([1.0, -2.0]), np.array([[1.0, 0.6], [0.6, 2.0]])
    fit = fit_gaussian_vi(_gauss_target(mean, cov), settings=ACCURATE, rng=rng)
    assert np.max(np.abs(fit.family.mu - mean)) < 1e-2
    assert np.linalg.norm(fit.family.covariance - cov) / np.linalg.norm(cov) < 0.05


def test_fit_gaussian_elbo_ascends(rng):
    fit = fit_gaussian_vi(_gauss_target([3.0, -3.0], np.diag([0.5, 4.0])), settings=VISettings(steps=4000), rng=rng)
    q = len(fit.elbo_trace) // 4
    assert fit.elbo_trace[-q:].mean() >= fit.elbo_trace[:q].mean()
    assert fit.steps == 4000


def test_fit_is_deterministic_given_rng():
    t = _gauss_target([1.0], [[2.0]])
    a = fit_gaussian_vi(t, settings=VISettings(steps=500), rng=np.random.default_rng(3))
    b = fit_gaussian_vi(t, settings=VISettings(steps=500), rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.family.mu, b.family.mu)
    np.testing.assert_array_equal(a.family.L, b.family.L)


def test_settings_validation():
    with pytest.raises(ValueError):
        VISettings(steps=0)
    with pytest.raises(ValueError):
        VISettings(average_tail=1.0)
    s = VISettings()
    assert (s.steps, s.samples_per_step, s.rho, s.eps) == (10000, 1, 0.85, 1e-6)


def _normal_model(copula):
    terms = {"mu_1": PriorTerm("normal", 0.0, 10.0), "sigma2_1": PriorTerm("log_normal", 0.0, 1.0),
             "mu_2": PriorTerm("normal", 0.0, 10.0), "sigma2_2": PriorTerm("log_normal", 0.0, 1.0)}
    if copula != "independence":
        terms["tau"] = PriorTerm("logit_tau_normal", 0.0, 1.5)
    return CopulaModel(("normal", "normal"), copula, PriorSpec(terms))


@pytest.fixture(scope="module")
def indep_data():
    rng = np.random.default_rng(8)
    return Dataset(rng.normal([1.0, -1.0], [1.5, 0.7], size=(300, 2)))


def test_cut_vi_freezes_stage1(indep_data):
    model = _normal_model("gaussian")
    res = fit_cut_vi(model, indep_data, "type1", VISettings(steps=1500, average_tail=0.3), seed=0)
    np.testing.assert_array_equal(res.family.mu[:4], res.stage1.mu)
    np.testing.assert_array_equal(res.family.L[:4, :4], res.stage1.L)
    assert res.family.blocks == (4, 1)
    assert res.elbo_trace_stage1.size == 1500 and res.elbo_trace_stage2.size == 1500


def test_cut_vi_equals_uncut_under_independence(indep_data):
    model = _normal_model("gaussian")
    s = VISettings(steps=4000, samples_per_step=8, average_tail=0.5, init="mode")
    cut = fit_cut_vi(model, indep_data, "type1", s, seed=1)
    unc = fit_vi(model, indep_data, s, seed=1)
    np.testing.assert_allclose(model.to_constrained(cut.mean()), model.to_constrained(unc.mean()), atol=0.02)


def test_stage1_decomposes_over_margins(indep_data):
    model = _normal_model("gaussian")
    s = VISettings(steps=6000, samples_per_step=16, average_tail=0.5, init="mode")
    joint = fit_gaussian_vi(cut1_stage1_target(model, indep_data), settings=s, rng=np.random.default_rng(0),
                            init=GaussianVariationalFamily(np.array([1.0, 0.8, -1.0, -0.7]), 0.1 * np.eye(4)))
    y = indep_data.values
    for j in range(2):
        col = jnp.asarray(y[:, j])
        t = LogTarget.from_callable(
            lambda z: jnp.sum(-0.5 * math.log(2 * math.pi) - 0.5 * z[1] - 0.5 * (col - z[0]) ** 2 / jnp.exp(z[1]))
            + st_norm_logpdf(z[0], 10.0) + (-0.5 * math.log(2 * math.pi) - 0.5 * z[1] ** 2), 2)
        single = fit_gaussian_vi(t, settings=s, rng=np.random.default_rng(j + 1),
                                 init=GaussianVariationalFamily(np.asarray(joint.family.mu[2 * j: 2 * j + 2]), 0.1 * np.eye(2)))
        np.testing.assert_allclose(joint.family.mu[2 * j: 2 * j + 2], single.family.mu, atol=1e-3)


def st_norm_logpdf(x, sd):
    return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * (x / sd) ** 2


def test_augmented_cells_and_agreement_with_exact():
    cfg = sim2_config(n=200)
    data = simulate_dgp(cfg, 0)
    s = VISettings(steps=3000, average_tail=0.3)
    aug = fit_augmented_type2_vi(cfg.model, data, s, seed=1)
    exact = fit_cut_vi(cfg.model, data, "type2", s, seed=1)
    u = aug.auxiliary.sample(np.random.default_rng(0), 50)
    r = aug.auxiliary.ranks
    assert np.all((u > r.lower) & (u <= r.upper))
    assert abs(cfg.model.to_constrained(aug.mean())[-1] - cfg.model.to_constrained(exact.mean())[-1]) < 0.05
    assert aug.cut == "type2_augmented" and aug.names[0] == "tau"


def test_auxiliary_density_normalized():
    r = compute_ranks(np.array([[0.1, 0.5], [0.7, 0.2], [0.3, 0.9]]))
    aux = AuxiliaryVariationalFamily(np.full((3, 2), 0.4), np.full((3, 2), -0.5), r)
    u = aux.sample(np.random.default_rng(0), 100_000)
    # E_q[-log q] estimates the analytic entropy
    assert -np.mean(aux.log_density(u)) == pytest.approx(aux.entropy(), abs=0.02)


def test_cut_vi_rejects_unknown_type(indep_data):
    with pytest.raises(ValueError):
        fit_cut_vi(_normal_model("gaussian"), indep_data, "type3")


def test_uncut_vi_runs_on_joint(indep_data):
    model = _normal_model("gaussian")
    res = fit_vi(model, indep_data, VISettings(steps=300), seed=0)
    assert res.cut is None and res.names == model.param_names
    assert np.all(np.isfinite(joint_target(model, indep_data).batch(res.sample(np.random.default_rng(0), 10))))
