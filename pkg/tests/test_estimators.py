import numpy as np
import pytest
from sklearn.base import clone

from cutcopula.estimators import BayesCopulaEstimator, IFMEstimator, default_priors
from cutcopula.mcmc import MCMCSettings
from cutcopula.vi import VISettings

FAST_MCMC = MCMCSettings(400, 200, 3)


@pytest.fixture(scope="module")
def X():
    rng = np.random.default_rng(8)
    z = rng.multivariate_normal([0, 0], [[1, 0.6], [0.6, 1]], size=150)
    return np.column_stack([1.0 + z[:, 0], 2.0 + 0.5 * z[:, 1]])


def test_default_priors_cover_all_parameters():
    pri = default_priors(("normal", "gamma"), "gaussian")
    assert set(pri.names) == {"mu_1", "sigma2_1", "alpha_2", "beta_2", "tau"}
    pri3 = default_priors(("normal",) * 3, "gaussian_m")
    assert pri3.names[-3:] == ("cpc_1_2", "cpc_1_3", "cpc_2_3")


@pytest.mark.parametrize("cut", [None, "type1", "type2"])
def test_bayes_mcmc_fit(X, cut):
    est = BayesCopulaEstimator(copula="gaussian", cut=cut, mcmc_settings=FAST_MCMC, random_state=0)
    est.fit(X)
    assert est.draws_.shape == (400, 5) and est.n_features_in_ == 2
    if cut != "type2":
        np.testing.assert_allclose(est.posterior_mean_[[0, 2]], [1.0, 2.0], atol=0.2)
    U = est.transform(X)
    assert U.shape == X.shape and np.all((U > 0) & (U < 1))
    assert np.isfinite(est.score(X))
    S = est.sample(5000, random_state=1)
    assert abs(np.corrcoef(S.T)[0, 1] - np.corrcoef(X.T)[0, 1]) < 0.15


def test_bayes_vi_and_augmented(X):
    vi = VISettings(steps=400)
    for cut in (None, "type1", "type2_augmented"):
        est = BayesCopulaEstimator(copula="gaussian", method="vi", cut=cut, vi_settings=vi,
                                   n_vi_draws=300, random_state=np.random.RandomState(2)).fit(X)
        assert est.draws_.shape == (300, 5) and np.all(np.isfinite(est.draws_))


def test_bayes_is_deterministic(X):
    a = BayesCopulaEstimator(copula="gaussian", mcmc_settings=FAST_MCMC, random_state=4).fit(X)
    b = clone(a).fit(X)
    np.testing.assert_array_equal(a.draws_, b.draws_)


def test_invalid_options(X):
    with pytest.raises(ValueError):
        BayesCopulaEstimator(cut="type3").fit(X)
    with pytest.raises(ValueError):
        BayesCopulaEstimator(method="nuts").fit(X)
    with pytest.raises(ValueError):
        BayesCopulaEstimator(cut="type2_augmented").fit(X)
    with pytest.raises(ValueError):
        BayesCopulaEstimator(marginals=("normal",) * 3).fit(X)


def test_unfitted_and_wrong_width(X):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        IFMEstimator().transform(X)
    est = IFMEstimator(copula="gaussian").fit(X)
    with pytest.raises(ValueError):
        est.score_samples(X[:, :1])


def test_ifm_estimates(X):
    est = IFMEstimator(copula="gaussian").fit(X)
    names = list(est.feature_names_out_)
    mu1 = est.estimate_[names.index("mu_1")]
    assert mu1 == pytest.approx(X[:, 0].mean(), abs=1e-6)
    assert est.copula_.family.value == "gaussian"
    # Gaussian copula at normal margins is the bivariate normal
    tau = est.estimate_[names.index("tau")]
    r = np.sin(np.pi * tau / 2)
    assert r == pytest.approx(np.corrcoef(X.T)[0, 1], abs=0.02)
    assert clone(est).get_params() == est.get_params()
