"""Univariate parametric marginal families.

Each family carries two parameters and a bijection to the real plane that the
samplers and the variational optimizer work on:

=========================  ===================  ======================
family                     constrained params   unconstrained params
=========================  ===================  ======================
normal                     (mu, sigma2)         (mu, log sigma2)
truncated_normal_positive  (mu, sigma2)         (mu, log sigma2)
lognormal                  (mu, sigma2)         (mu, log sigma2)
gamma                      (alpha, beta)        (log alpha, log beta)
=========================  ===================  ======================

For ``lognormal`` the pair is the mean and variance of ``log Y``. For
``gamma`` ``beta`` is a rate. ``truncated_normal_positive`` is a normal
restricted to ``(0, inf)`` and renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import jax.numpy as jnp
import numpy as np
import scipy.special as sp
from jax.scipy.special import gammaln, log_ndtr, ndtr

from cutcopula._special import LOG_2PI, gammainc

__all__ = [
    "MarginalFamily",
    "MarginalSpec",
    "ParameterDomainError",
    "marginal_log_pdf",
    "marginal_cdf",
    "marginal_quantile",
    "marginal_sample",
    "params_to_unconstrained",
    "params_from_unconstrained",
]


class ParameterDomainError(ValueError):
    """A distribution parameter lies outside its admissible domain."""


class MarginalFamily(str, Enum):
    NORMAL = "normal"
    TRUNCATED_NORMAL_POSITIVE = "truncated_normal_positive"
    LOGNORMAL = "lognormal"
    GAMMA = "gamma"

    @property
    def param_names(self) -> tuple[str, str]:
        if self is MarginalFamily.GAMMA:
            return ("alpha", "beta")
        return ("mu", "sigma2")

    @property
    def positive_params(self) -> tuple[bool, bool]:
        if self is MarginalFamily.GAMMA:
            return (True, True)
        return (False, True)

    @property
    def support(self) -> tuple[float, float]:
        if self is MarginalFamily.NORMAL:
            return (-math.inf, math.inf)
        return (0.0, math.inf)


@dataclass(frozen=True)
class MarginalSpec:
    """A marginal family together with its constrained parameter values.

    Parameters
    ----------
    family : MarginalFamily or str
        One of ``normal``, ``truncated_normal_positive``, ``lognormal`` or
        ``gamma``.
    params : tuple of float
        ``(mu, sigma2)`` for the normal-type families, ``(alpha, beta)`` for
        the gamma family.
    """

    family: MarginalFamily
    params: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "family", MarginalFamily(self.family))
        params = tuple(float(p) for p in self.params)
        if len(params) != 2:
            raise ParameterDomainError(
                f"{self.family.value} takes 2 parameters, got {len(params)}"
            )
        for name, value, positive in zip(
            self.family.param_names, params, self.family.positive_params
        ):
            if not math.isfinite(value):
                raise ParameterDomainError(f"{name} must be finite, got {value}")
            if positive and value <= 0:
                raise ParameterDomainError(f"{name} must be positive, got {value}")
        object.__setattr__(self, "params", params)

    @property
    def support(self) -> tuple[float, float]:
        return self.family.support

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family.value, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MarginalSpec":
        return cls(d["family"], tuple(d["params"]))


# ---------------------------------------------------------------------------
# Traceable cores. ``params`` is a length-2 array on the constrained scale.
# ---------------------------------------------------------------------------


def _log_pdf(family: MarginalFamily, params, y):
    a, b = params[0], params[1]
    y = jnp.asarray(y, dtype=jnp.float64)
    if family is MarginalFamily.NORMAL:
        return -0.5 * (LOG_2PI + jnp.log(b)) - 0.5 * (y - a) ** 2 / b
    positive = y > 0
    ys = jnp.where(positive, y, 1.0)
    if family is MarginalFamily.TRUNCATED_NORMAL_POSITIVE:
        sd = jnp.sqrt(b)
        val = -0.5 * (LOG_2PI + jnp.log(b)) - 0.5 * (ys - a) ** 2 / b - log_ndtr(a / sd)
    elif family is MarginalFamily.LOGNORMAL:
        ly = jnp.log(ys)
        val = -ly - 0.5 * (LOG_2PI + jnp.log(b)) - 0.5 * (ly - a) ** 2 / b
    else:
        val = a * jnp.log(b) - gammaln(a) + (a - 1.0) * jnp.log(ys) - b * ys
    return jnp.where(positive, val, -jnp.inf)


def _cdf(family: MarginalFamily, params, y):
    a, b = params[0], params[1]
    y = jnp.asarray(y, dtype=jnp.float64)
    if family is MarginalFamily.NORMAL:
        return ndtr((y - a) / jnp.sqrt(b))
    positive = y > 0
    ys = jnp.where(positive, y, 1.0)
    if family is MarginalFamily.TRUNCATED_NORMAL_POSITIVE:
        sd = jnp.sqrt(b)
        z = (ys - a) / sd
        mass = ndtr(a / sd)
        # Work with the survival function in the upper half for accuracy.
        val = jnp.where(
            z > 0,
            1.0 - ndtr(-z) / mass,
            (ndtr(z) - ndtr(-a / sd)) / mass,
        )
    elif family is MarginalFamily.LOGNORMAL:
        val = ndtr((jnp.log(ys) - a) / jnp.sqrt(b))
    else:
        val = gammainc(a, b * ys)
    return jnp.clip(jnp.where(positive, val, 0.0), 0.0, 1.0)


def _constrain(family: MarginalFamily, z):
    """Map unconstrained ``z`` to constrained params; also return log|d params/dz|."""
    z = jnp.asarray(z, dtype=jnp.float64)
    if family is MarginalFamily.GAMMA:
        return jnp.exp(z), z[0] + z[1]
    return jnp.stack([z[0], jnp.exp(z[1])]), z[1]


def _unconstrain(family: MarginalFamily, params) -> np.ndarray:
    p = np.asarray(params, dtype=float)
    if family is MarginalFamily.GAMMA:
        return np.log(p)
    return np.array([p[0], math.log(p[1])])


# ---------------------------------------------------------------------------
# Public API (NumPy in, NumPy out)
# ---------------------------------------------------------------------------


def _as_output(x, like):
    out = np.asarray(x, dtype=float)
    return float(out) if np.ndim(like) == 0 else out


def marginal_log_pdf(spec: MarginalSpec, y):
    """Log density of ``spec`` at ``y``; ``-inf`` outside the support."""
    y = np.asarray(y, dtype=float)
    return _as_output(_log_pdf(spec.family, jnp.asarray(spec.params), y), y)


def marginal_cdf(spec: MarginalSpec, y):
    """Distribution function of ``spec`` at ``y``, clamped to [0, 1]."""
    y = np.asarray(y, dtype=float)
    return _as_output(_cdf(spec.family, jnp.asarray(spec.params), y), y)


def _initial_quantile(spec: MarginalSpec, p: np.ndarray) -> np.ndarray:
    a, b = spec.params
    fam = spec.family
    if fam is MarginalFamily.NORMAL:
        return a + math.sqrt(b) * sp.ndtri(p)
    if fam is MarginalFamily.LOGNORMAL:
        return np.exp(a + math.sqrt(b) * sp.ndtri(p))
    if fam is MarginalFamily.GAMMA:
        return sp.gammaincinv(a, p) / b
    sd = math.sqrt(b)
    lo = sp.ndtr(-a / sd)
    return np.maximum(a + sd * sp.ndtri(lo + p * (1.0 - lo)), 0.0)


def marginal_quantile(spec: MarginalSpec, p, tol: float = 1e-12, max_iter: int = 200):
    """Inverse distribution function.

    A closed-form or special-function starting point is polished by a
    safeguarded Newton iteration on the CDF: Newton steps that leave the
    current bracket are replaced by bisection.

    Raises
    ------
    ValueError
        If any ``p`` lies outside the open interval (0, 1).
    """
    p_in = p
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("quantile levels must lie in the open interval (0, 1)")
    cdf = lambda x: np.atleast_1d(marginal_cdf(spec, x))  # noqa: E731
    logpdf = lambda x: np.atleast_1d(marginal_log_pdf(spec, x))  # noqa: E731

    x = _initial_quantile(spec, p)
    lower_support = spec.support[0]
    scale = math.sqrt(spec.params[1]) if spec.family is not MarginalFamily.GAMMA else (
        math.sqrt(spec.params[0]) / spec.params[1]
    )
    if spec.family is MarginalFamily.LOGNORMAL:
        scale = max(scale, 1.0) * np.maximum(np.abs(x), 1.0)
    # Bracket [lo, hi] with cdf(lo) <= p <= cdf(hi).
    lo = np.where(np.isfinite(x), x, 0.0) - scale
    hi = np.where(np.isfinite(x), x, 0.0) + scale
    if math.isfinite(lower_support):
        lo = np.maximum(lo, lower_support)
    for _ in range(200):
        bad = cdf(lo) > p
        if not np.any(bad):
            break
        step = hi - lo
        lo = np.where(bad, lo - 2 * step, lo)
        if math.isfinite(lower_support):
            lo = np.maximum(lo, lower_support)
    for _ in range(200):
        bad = cdf(hi) < p
        if not np.any(bad):
            break
        hi = np.where(bad, hi + 2 * (hi - lo), hi)
    x = np.where(np.isfinite(x) & (x >= lo) & (x <= hi), x, 0.5 * (lo + hi))
    for _ in range(max_iter):
        f = cdf(x) - p
        if np.all(np.abs(f) <= tol):
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        dens = np.exp(logpdf(x))
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - f / dens
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        x_new = np.where(inside, newton, 0.5 * (lo + hi))
        done = np.abs(f) <= tol
        x = np.where(done, x, x_new)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(np.abs(x), 1e-300)):
            break
    return float(x[0]) if np.ndim(p_in) == 0 else x


def marginal_sample(spec: MarginalSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b = spec.params
    fam = spec.family
    if fam is MarginalFamily.NORMAL:
        return rng.normal(a, math.sqrt(b), size=n)
    if fam is MarginalFamily.LOGNORMAL:
        return rng.lognormal(a, math.sqrt(b), size=n)
    if fam is MarginalFamily.GAMMA:
        return rng.gamma(a, 1.0 / b, size=n)
    u = rng.uniform(size=n)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return marginal_quantile(spec, u)


def params_to_unconstrained(spec: MarginalSpec) -> tuple[np.ndarray, float]:
    """Unconstrained coordinates of ``spec`` and the log-Jacobian of the inverse map."""
    z = _unconstrain(spec.family, spec.params)
    _, log_jac = _constrain(spec.family, z)
    return z, float(log_jac)


def params_from_unconstrained(family, z) -> tuple[MarginalSpec, float]:
    family = MarginalFamily(family)
    params, log_jac = _constrain(family, np.asarray(z, dtype=float))
    return MarginalSpec(family, tuple(np.asarray(params))), float(log_jac)
