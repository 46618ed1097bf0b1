import math

import jax.numpy as jnp
import numpy as np
import pytest
import scipy.stats as st

from cutcopula.copulas import CopulaSpec, compute_ranks, copula_sample, rank_log_likelihood
from cutcopula.marginals import MarginalSpec, marginal_quantile
from cutcopula.model import (
    CopulaModel,
    Dataset,
    PriorSpec,
    PriorTerm,
    core_joint,
    cut1_stage1_target,
    cut1_stage2_target,
    cut2_stage1_target,
    cut2_stage2_target,
    ifm_copula_target,
    initial_point,
    joint_target,
    log_cut1_stage1_target,
    log_cut2_stage1_target,
    log_g1_marginals,
    log_g2_copula,
    log_joint_posterior_unnorm,
    log_prior,
)

SIM1_PRIORS = PriorSpec({
    "mu_1": PriorTerm("normal", 0.0, 100.0),
    "sigma2_1": PriorTerm("half_normal", 0.0, 100.0),
    "alpha_2": PriorTerm("log_normal", 0.0, 3.0),
    "beta_2": PriorTerm("log_normal", 0.0, 3.0),
    "tau": PriorTerm.uniform_tau(0.0, 1.0),
})
SIM1 = CopulaModel(("lognormal", "gamma"), "gumbel", SIM1_PRIORS)
TRUTH = (MarginalSpec("lognormal", (1.0, 1.0)), MarginalSpec("gamma", (7.0, 3.0)))


def _normal_model(copula="gaussian"):
    priors = {k: PriorTerm("normal", 0.0, 10.0) for k in ("mu_1", "mu_2")}
    priors.update({k: PriorTerm("log_normal", 0.0, 1.0) for k in ("sigma2_1", "sigma2_2")})
    if copula != "independence":
        priors["tau"] = PriorTerm("logit_tau_normal", 0.0, 1.5)
    return CopulaModel(("normal", "normal"), copula, PriorSpec(priors))


@pytest.fixture(scope="module")
def sim1_data():
    rng = np.random.default_rng(42)
    u = copula_sample(CopulaSpec("student_t", tau=0.7, df=1.0), 300, rng)
    return Dataset(np.column_stack([marginal_quantile(s, u[:, j]) for j, s in enumerate(TRUTH)]))


def _gumbel_log_c(u, v, theta):
    x, y = -np.log(u), -np.log(v)
    A = (x**theta + y**theta) ** (1 / theta)
    return -A - np.log(u * v) + (theta - 1) * np.log(x * y) + (1 - 2 * theta) * np.log(A) + np.log(A + theta - 1)


def _sim1_oracle(y, mu, s2, a, b, tau):
    """End-to-end unnormalized log posterior on the unconstrained scale, coded with scipy."""
    f1 = st.lognorm(s=math.sqrt(s2), scale=math.exp(mu))
    f2 = st.gamma(a, scale=1 / b)
    lik = f1.logpdf(y[:, 0]).sum() + f2.logpdf(y[:, 1]).sum()
    u = np.clip(f1.cdf(y[:, 0]), 1e-12, 1 - 1e-12)
    v = np.clip(f2.cdf(y[:, 1]), 1e-12, 1 - 1e-12)
    lik += _gumbel_log_c(u, v, 1 / (1 - tau)).sum()
    prior = (
        st.norm(0, 100).logpdf(mu)
        + st.halfnorm(scale=100).logpdf(s2) + math.log(s2)
        + st.lognorm(s=3).logpdf(a) + math.log(a)
        + st.lognorm(s=3).logpdf(b) + math.log(b)
        + 0.0 + math.log(tau * (1 - tau))  # uniform on (0, 1) through the logistic map
    )
    return lik + prior


def test_g1_trivial():
    model = _normal_model("independence")
    data = Dataset(np.array([[0.0, 0.0], [0.0, 0.0]]))
    assert log_g1_marginals(model, data, np.zeros(4)) == pytest.approx(4 * -0.5 * math.log(2 * math.pi), abs=1e-13)


def test_g1_separable_and_matches_summation(sim1_data):
    z = SIM1.pack(TRUTH, CopulaSpec("gumbel", tau=0.5))[:4]
    y = sim1_data.values
    direct = st.lognorm(s=1.0, scale=math.e).logpdf(y[:, 0]).sum() + st.gamma(7.0, scale=1 / 3).logpdf(y[:, 1]).sum()
    assert log_g1_marginals(SIM1, sim1_data, z) == pytest.approx(direct, rel=1e-12, abs=1e-10)
    m1 = CopulaModel(("lognormal", "lognormal"), "independence", {
        "mu_1": PriorTerm("normal"), "sigma2_1": PriorTerm("log_normal"),
        "mu_2": PriorTerm("normal"), "sigma2_2": PriorTerm("log_normal")})
    half = Dataset(np.column_stack([y[:, 0], y[:, 0]]))
    assert log_g1_marginals(m1, half, np.r_[z[:2], z[:2]]) == pytest.approx(
        2 * st.lognorm(s=1.0, scale=math.e).logpdf(y[:, 0]).sum(), rel=1e-12)


def test_g2_independence_is_zero(rng):
    model = _normal_model("independence")
    data = Dataset(rng.standard_normal((20, 2)))
    assert log_g2_copula(model, data, rng.standard_normal(4), []) == 0.0


def test_g1_plus_g2_is_joint_density(sim1_data):
    z = SIM1.pack(TRUTH, CopulaSpec("gumbel", tau=0.6))
    y = sim1_data.values
    g = log_g1_marginals(SIM1, sim1_data, z[:4]) + log_g2_copula(SIM1, sim1_data, z[:4], z[4:])
    f1, f2 = st.lognorm(s=1.0, scale=math.e), st.gamma(7.0, scale=1 / 3)
    ref = (f1.logpdf(y[:, 0]) + f2.logpdf(y[:, 1]) + _gumbel_log_c(f1.cdf(y[:, 0]), f2.cdf(y[:, 1]), 2.5)).sum()
    assert g == pytest.approx(ref, rel=1e-11)


def test_gaussian_copula_normal_margins_is_mvn(rng):
    model = _normal_model()
    y = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.9], [0.9, 1.5]], size=50)
    data = Dataset(y)
    spec = CopulaSpec("gaussian", tau=0.3)
    z = model.pack([MarginalSpec("normal", (1.0, 2.0)), MarginalSpec("normal", (-2.0, 1.5))], spec)
    r = spec.rho * math.sqrt(2.0 * 1.5)
    ref = st.multivariate_normal([1.0, -2.0], [[2.0, r], [r, 1.5]]).logpdf(y).sum()
    got = log_g1_marginals(model, data, z[:4]) + log_g2_copula(model, data, z[:4], z[4:])
    assert got == pytest.approx(ref, rel=1e-8)


def test_joint_matches_second_evaluation_path(sim1_data):
    for tau in (0.3, 0.7):
        vals = (0.9, 1.2, 6.5, 2.8, tau)
        z = SIM1.from_constrained(vals)
        ref = _sim1_oracle(sim1_data.values, *vals)
        assert log_joint_posterior_unnorm(SIM1, sim1_data, z) == pytest.approx(ref, rel=1e-12, abs=1e-10)


def test_joint_flat_prior_difference_is_likelihood_ratio(sim1_data):
    flat = PriorSpec({k: PriorTerm("normal", 0.0, 1e12) for k in ("mu_1", "sigma2_1", "alpha_2", "beta_2")}
                     | {"tau": PriorTerm.uniform_tau(0.0, 1.0)})
    model = CopulaModel(("lognormal", "gamma"), "gumbel", flat)
    z1 = model.from_constrained((1.0, 1.0, 7.0, 3.0, 0.5))
    z2 = model.from_constrained((1.1, 0.9, 6.0, 2.5, 0.5))
    lik = lambda z: log_g1_marginals(model, sim1_data, z[:4]) + log_g2_copula(model, sim1_data, z[:4], z[4:])
    jac = lambda z: float(np.sum(z[1:4]))  # log-Jacobian of the exp maps
    d_joint = log_joint_posterior_unnorm(model, sim1_data, z1) - log_joint_posterior_unnorm(model, sim1_data, z2)
    assert d_joint - (jac(z1) - jac(z2)) == pytest.approx(lik(z1) - lik(z2), rel=1e-9)


def test_joint_with_no_rows_is_prior():
    z = SIM1.from_constrained((1.0, 1.0, 7.0, 3.0, 0.7))
    val = float(core_joint(SIM1, jnp.asarray(z), jnp.zeros((0, 2))))
    assert val == pytest.approx(log_prior(SIM1, z), rel=1e-14)


def test_cut1_stage1_is_sum_of_margin_posteriors(sim1_data):
    z = SIM1.from_constrained((0.8, 1.3, 6.0, 2.0, 0.5))[:4]
    y = sim1_data.values
    p1 = (st.lognorm(s=math.sqrt(1.3), scale=math.exp(0.8)).logpdf(y[:, 0]).sum()
          + st.norm(0, 100).logpdf(0.8) + st.halfnorm(scale=100).logpdf(1.3) + math.log(1.3))
    p2 = (st.gamma(6.0, scale=0.5).logpdf(y[:, 1]).sum()
          + st.lognorm(s=3).logpdf(6.0) + math.log(6.0) + st.lognorm(s=3).logpdf(2.0) + math.log(2.0))
    assert log_cut1_stage1_target(SIM1, sim1_data, z) == pytest.approx(p1 + p2, rel=1e-12)


def test_cut2_stage1_independence_constant_in_data(rng):
    model = _normal_model("independence")
    a = cut2_stage1_target(model, compute_ranks(rng.standard_normal((8, 2))))
    b = cut2_stage1_target(model, compute_ranks(rng.standard_normal((8, 2))))
    assert a.dim == 0
    assert a(np.zeros(0)) == b(np.zeros(0)) == pytest.approx(16 * math.log(1 / 9))


def test_cut2_stage1_difference_is_rank_lik_difference(rng):
    model = _normal_model("gaussian")
    ranks = compute_ranks(rng.multivariate_normal([0, 0], [[1, 0.5], [0.5, 1]], size=40))
    for z in (0.3, 1.1):
        d = log_cut2_stage1_target(model, ranks, [z]) - log_cut2_stage1_target(model, ranks, [-z])
        tau = 2 / (1 + math.exp(-z)) - 1
        ref = rank_log_likelihood(CopulaSpec("gaussian", tau=tau), ranks) - rank_log_likelihood(
            CopulaSpec("gaussian", tau=-tau), ranks)
        assert d == pytest.approx(ref, rel=1e-10)


def test_factorization_identity(sim1_data, rng):
    for _ in range(5):
        z = SIM1.from_constrained((1.0, 1.0, 7.0, 3.0, 0.5)) + 0.1 * rng.standard_normal(5)
        lhs = log_joint_posterior_unnorm(SIM1, sim1_data, z)
        prior_psi = log_prior(SIM1, z) - log_prior(SIM1, np.r_[z[:4], 0.0]) + math.log(0.25)
        rhs = log_cut1_stage1_target(SIM1, sim1_data, z[:4]) + log_g2_copula(SIM1, sim1_data, z[:4], z[4:]) + prior_psi
        assert lhs == pytest.approx(rhs, rel=1e-12)


def _targets(data):
    z0 = initial_point(SIM1, data)
    return [
        ("joint", joint_target(SIM1, data), z0),
        ("cut1_stage1", cut1_stage1_target(SIM1, data), z0[:4]),
        ("cut1_stage2", cut1_stage2_target(SIM1, data, z0[:4]), z0[4:]),
        ("cut2_stage1", cut2_stage1_target(SIM1, data.ranks()), z0[4:]),
        ("cut2_stage2", cut2_stage2_target(SIM1, data, z0[4:]), z0[:4]),
        ("ifm_copula", ifm_copula_target(SIM1, data, z0[:4]), z0[4:]),
    ]


def test_target_gradients_match_finite_differences(sim1_data):
    rng = np.random.default_rng(0)
    for name, target, z0 in _targets(sim1_data):
        for _ in range(20 if target.dim > 1 else 5):
            z = z0 + 0.2 * rng.standard_normal(z0.shape)
            _, g = target.value_and_grad(z)
            fd = np.empty_like(z)
            for k in range(z.size):
                h = 1e-5 * (1 + abs(z[k]))
                e = np.zeros_like(z)
                e[k] = h
                fd[k] = (target(z + e) - target(z - e)) / (2 * h)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-4, err_msg=name)


def test_targets_finite_on_grid(sim1_data):
    for name, target, z0 in _targets(sim1_data):
        grid = z0 + np.linspace(-1.5, 1.5, 25)[:, None] * np.ones_like(z0)
        assert np.all(np.isfinite(target.batch(grid))), name


def test_batch_matches_scalar(sim1_data, rng):
    t = joint_target(SIM1, sim1_data)
    Z = initial_point(SIM1, sim1_data) + 0.1 * rng.standard_normal((7, 5))
    np.testing.assert_allclose(t.batch(Z, chunk=3), [t(z) for z in Z], rtol=1e-12)


def test_prior_coverage_validated():
    with pytest.raises(ValueError, match="missing"):
        CopulaModel(("normal", "normal"), "gumbel", {"mu_1": PriorTerm("normal")})


def test_packing_round_trip():
    vals = np.array([1.0, 1.0, 7.0, 3.0, 0.7])
    np.testing.assert_allclose(SIM1.to_constrained(SIM1.from_constrained(vals)), vals, rtol=1e-14)
    assert SIM1.param_names == ("mu_1", "sigma2_1", "alpha_2", "beta_2", "tau")
    margs, cop = SIM1.unpack(SIM1.from_constrained(vals))
    assert margs[1].params == pytest.approx((7.0, 3.0)) and cop.tau == pytest.approx(0.7)


def test_model_dict_round_trip():
    assert CopulaModel.from_dict(SIM1.to_dict()) == SIM1


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0, np.nan], [1.0, 2.0]]))
    data = Dataset(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert not data.values.flags.writeable
    with pytest.raises(ValueError):
        SIM1.check_data(Dataset(np.array([[-1.0, 2.0], [3.0, 4.0]])))
