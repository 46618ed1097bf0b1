"""Scikit-learn style estimators for Bayesian and two-stage copula models.

Examples
--------
>>> from cutcopula.estimators import BayesCopulaEstimator
>>> est = BayesCopulaEstimator(
...     marginals=("lognormal", "gamma"), copula="gumbel", cut="type1", random_state=0,
... )
>>> est.fit(X)                                       # doctest: +SKIP
>>> est.posterior_mean_                              # doctest: +SKIP
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from cutcopula import copulas as _cop
from cutcopula import marginals as _mar
from cutcopula import mcmc as _mcmc
from cutcopula import vi as _vi
from cutcopula.copulas import CopulaFamily
from cutcopula.marginals import MarginalFamily, MarginalSpec
from cutcopula.mcmc import MCMCSettings
from cutcopula.model import CopulaModel, Dataset, PriorSpec, PriorTerm
from cutcopula.vi import VISettings

__all__ = ["BayesCopulaEstimator", "IFMEstimator", "default_priors"]

_CUTS = (None, "type1", "type2", "type2_augmented")


def _generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, np.random.RandomState):
        return np.random.default_rng(random_state.randint(2**32))
    return np.random.default_rng(random_state)


def default_priors(marginals: Sequence, copula, dim: int | None = None) -> PriorSpec:
    """Weakly informative priors for every parameter of a model.

    Locations get ``N(0, 100^2)``, positive parameters ``LogNormal(0, 3^2)``,
    Kendall's tau a uniform prior on its range and correlation CPCs a
    ``N(0, 1.5^2)`` prior on the logit scale.
    """
    fams = [m.family if isinstance(m, MarginalSpec) else MarginalFamily(m) for m in marginals]
    cop = CopulaFamily(copula)
    terms = {}
    for j, fam in enumerate(fams, start=1):
        for name, pos in zip(fam.param_names, fam.positive_params):
            terms[f"{name}_{j}"] = (
                PriorTerm("log_normal", 0.0, 3.0) if pos else PriorTerm("normal", 0.0, 100.0)
            )
    for name in _cop.free_param_names(cop, dim or len(fams)):
        if name == "tau":
            terms[name] = PriorTerm.uniform_tau(*cop.tau_range)
        else:
            terms[name] = PriorTerm("logit_tau_normal", 0.0, 1.5)
    return PriorSpec(terms)


class _CopulaEstimatorMixin:
    """Fitted-model methods shared by the estimators."""

    def _build_model(self, m: int) -> CopulaModel:
        margs = tuple(self.marginals)
        if len(margs) != m:
            raise ValueError(f"{len(margs)} marginal families given for {m} columns")
        priors = self.priors if self.priors is not None else default_priors(margs, self.copula, m)
        return CopulaModel(margs, self.copula, priors, df=self.df)

    def _set_fitted(self, model: CopulaModel, estimate_z: np.ndarray):
        self.model_ = model
        self.n_features_in_ = model.m
        margs, cop = model.unpack(estimate_z)
        self.marginals_ = margs
        self.copula_ = cop
        self.feature_names_out_ = np.array(model.param_names, dtype=object)

    def transform(self, X) -> np.ndarray:
        """Probability integral transform of each column under the fitted margins."""
        check_is_fitted(self, "marginals_")
        X = check_array(X, dtype=float)
        self._check_width(X)
        return np.column_stack([
            np.asarray(_mar.marginal_cdf(s, X[:, j])) for j, s in enumerate(self.marginals_)
        ])

    def score_samples(self, X) -> np.ndarray:
        """Log density of each row under the fitted joint model."""
        check_is_fitted(self, "marginals_")
        X = check_array(X, dtype=float)
        self._check_width(X)
        lm = sum(np.asarray(_mar.marginal_log_pdf(s, X[:, j])) for j, s in enumerate(self.marginals_))
        u = np.clip(self.transform(X), 1e-12, 1.0 - 1e-12)
        return lm + np.asarray(_cop.copula_log_density(self.copula_, u))

    def score(self, X, y=None) -> float:
        """Mean log density per row."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples: int = 1, random_state=None) -> np.ndarray:
        """Draw from the fitted joint model."""
        check_is_fitted(self, "marginals_")
        rng = _generator(random_state)
        u = _cop.copula_sample(self.copula_, n_samples, rng)
        return np.column_stack([
            np.asarray(_mar.marginal_quantile(s, u[:, j])) for j, s in enumerate(self.marginals_)
        ])

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; the model was fitted on {self.n_features_in_}")


class BayesCopulaEstimator(_CopulaEstimatorMixin, BaseEstimator):
    """Posterior inference for a copula model, optionally cut.

    Parameters
    ----------
    marginals : sequence of str or MarginalFamily
        One family per column of ``X``.
    copula : str or CopulaFamily, default="gumbel"
    df : float, optional
        Degrees of freedom for a Student-t copula.
    priors : PriorSpec or mapping, optional
        Defaults to ``default_priors``.
    method : {"mcmc", "vi"}, default="mcmc"
    cut : {None, "type1", "type2", "type2_augmented"}, default=None
        ``type1`` shields the margins from the copula; ``type2`` shields the
        copula from the margins through the rank likelihood.
        ``type2_augmented`` is only available with ``method="vi"``.
    mcmc_settings : MCMCSettings, optional
    vi_settings : VISettings, optional
    n_vi_draws : int, default=10000
        Draws taken from the fitted variational family to form
        ``draws_``.
    random_state : int, Generator or None

    Attributes
    ----------
    draws_ : ndarray of shape (n_draws, d)
        Posterior draws on the constrained scale.
    posterior_mean_ : ndarray of shape (d,)
    marginals_ : list of MarginalSpec
        Margins at the posterior mean of the unconstrained draws.
    copula_ : CopulaSpec
    result_ : SampleSet or CutVIResult
    """

    def __init__(
        self,
        marginals=("normal", "normal"),
        copula="gumbel",
        df=None,
        priors=None,
        method="mcmc",
        cut=None,
        mcmc_settings=None,
        vi_settings=None,
        n_vi_draws=10000,
        random_state=None,
    ):
        self.marginals = marginals
        self.copula = copula
        self.df = df
        self.priors = priors
        self.method = method
        self.cut = cut
        self.mcmc_settings = mcmc_settings
        self.vi_settings = vi_settings
        self.n_vi_draws = n_vi_draws
        self.random_state = random_state

    def fit(self, X, y=None):
        """Draw from the (cut) posterior given data ``X`` of shape (n, m)."""
        X = check_array(X, dtype=float)
        if self.cut not in _CUTS:
            raise ValueError(f"cut must be one of {_CUTS}; got {self.cut!r}")
        if self.method not in ("mcmc", "vi"):
            raise ValueError(f"method must be 'mcmc' or 'vi'; got {self.method!r}")
        if self.method == "mcmc" and self.cut == "type2_augmented":
            raise ValueError("the augmented type-2 cut is a VI method")
        model = self._build_model(X.shape[1])
        data = Dataset(X)
        rng = _generator(self.random_state)
        if self.method == "mcmc":
            res = _mcmc.fit_mcmc(model, data, self.cut, self.mcmc_settings or MCMCSettings(), rng)
            draws_z = res.draws
        else:
            settings = self.vi_settings or VISettings()
            if self.cut is None:
                res = _vi.fit_vi(model, data, settings, rng)
            elif self.cut == "type2_augmented":
                res = _vi.fit_augmented_type2_vi(model, data, settings, rng)
            else:
                res = _vi.fit_cut_vi(model, data, self.cut, settings, rng)
            draws_z = res.sample(rng, self.n_vi_draws)
        self.result_ = res
        self.draws_ = model.to_constrained(draws_z)
        self.posterior_mean_ = self.draws_.mean(axis=0)
        self._set_fitted(model, draws_z.mean(axis=0))
        return self


class IFMEstimator(_CopulaEstimatorMixin, BaseEstimator):
    """Two-stage maximum likelihood (inference functions for margins).

    Parameters
    ----------
    marginals : sequence of str or MarginalFamily
    copula : str or CopulaFamily, default="gumbel"
    df : float, optional

    Attributes
    ----------
    estimate_ : ndarray of shape (d,)
        Constrained estimates in ``model_.param_names`` order.
    marginals_ : list of MarginalSpec
    copula_ : CopulaSpec
    """

    def __init__(self, marginals=("normal", "normal"), copula="gumbel", df=None):
        self.marginals = marginals
        self.copula = copula
        self.df = df

    @property
    def priors(self):
        # IFM ignores priors; the model container still needs a complete set.
        return None

    def fit(self, X, y=None):
        """Per-margin MLE, then the copula MLE at the fitted margins."""
        X = check_array(X, dtype=float)
        model = self._build_model(X.shape[1])
        res = _mcmc.ifm_fit(model, Dataset(X))
        self.result_ = res
        self.estimate_ = res.constrained
        self._set_fitted(model, res.z)
        return self
