"""Copula families, ranks and the exact rank likelihood.

Bivariate families are parameterized by Kendall's tau. The internal parameter
is derived on demand (Gumbel ``theta = 1 / (1 - tau)``, elliptical
``rho = sin(pi * tau / 2)``). The m-dimensional Gaussian copula is
parameterized by its correlation matrix; its free coordinates are the
canonical partial correlations (CPCs).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np
import scipy.stats as st
from jax.scipy.special import gammaln, ndtri

from cutcopula._special import (
    bvn_cdf,
    mvn_cdf_np,
    t_copula_cdf_np,
    t_logpdf,
    t_ppf,
)
from cutcopula.marginals import ParameterDomainError

__all__ = [
    "CopulaFamily",
    "CopulaSpec",
    "RankData",
    "CopulaDomainError",
    "RankLikelihoodError",
    "TieWarning",
    "MAX_RANK_DIM",
    "tau_to_dependence",
    "dependence_to_tau",
    "copula_log_density",
    "copula_cdf",
    "copula_sample",
    "compute_ranks",
    "rank_rectangle_probabilities",
    "rank_log_likelihood",
]

MAX_RANK_DIM = 10


class CopulaDomainError(ValueError):
    """Copula evaluated outside the open unit cube."""


class RankLikelihoodError(ArithmeticError):
    """A rank rectangle received non-positive probability."""

    def __init__(self, row: int, value: float):
        super().__init__(f"rank rectangle of row {row} has probability {value!r} <= 0")
        self.row = row
        self.value = value


class TieWarning(UserWarning):
    pass


class CopulaFamily(str, Enum):
    INDEPENDENCE = "independence"
    GAUSSIAN = "gaussian"
    GUMBEL = "gumbel"
    STUDENT_T = "student_t"
    GAUSSIAN_M = "gaussian_m"

    @property
    def is_elliptical(self) -> bool:
        return self in (CopulaFamily.GAUSSIAN, CopulaFamily.STUDENT_T, CopulaFamily.GAUSSIAN_M)

    @property
    def tau_range(self) -> tuple[float, float]:
        if self is CopulaFamily.GUMBEL:
            return (0.0, 1.0)
        return (-1.0, 1.0)


def tau_to_dependence(family, tau: float) -> float:
    """Internal dependence parameter implied by Kendall's tau.

    Gumbel returns ``theta = 1 / (1 - tau)``; the elliptical families return
    ``rho = sin(pi * tau / 2)``; independence returns 0.
    """
    family = CopulaFamily(family)
    tau = float(tau)
    lo, hi = family.tau_range
    if family is CopulaFamily.INDEPENDENCE:
        if tau != 0.0:
            raise ParameterDomainError("independence copula has tau = 0")
        return 0.0
    if family is CopulaFamily.GUMBEL:
        if not (lo <= tau < hi):
            raise ParameterDomainError(f"Gumbel tau must lie in [0, 1), got {tau}")
        return 1.0 / (1.0 - tau)
    if not (lo < tau < hi):
        raise ParameterDomainError(f"elliptical tau must lie in (-1, 1), got {tau}")
    return math.sin(math.pi * tau / 2.0)


def dependence_to_tau(family, param: float) -> float:
    family = CopulaFamily(family)
    param = float(param)
    if family is CopulaFamily.INDEPENDENCE:
        return 0.0
    if family is CopulaFamily.GUMBEL:
        if param < 1.0:
            raise ParameterDomainError(f"Gumbel theta must be >= 1, got {param}")
        return 1.0 - 1.0 / param
    if not (-1.0 < param < 1.0):
        raise ParameterDomainError(f"correlation must lie in (-1, 1), got {param}")
    return 2.0 * math.asin(param) / math.pi


def _corr_to_cpc(corr: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(corr)
    m = corr.shape[0]
    out = []
    for i in range(1, m):
        acc = 0.0
        for j in range(i):
            out.append(L[i, j] / math.sqrt(1.0 - acc))
            acc += L[i, j] ** 2
    return np.array(out)


def _cpc_to_chol(cpc, m: int):
    """Cholesky factor of a correlation matrix from its CPCs (traceable)."""
    cpc = jnp.asarray(cpc)
    rows = [jnp.zeros(m).at[0].set(1.0)]
    k = 0
    for i in range(1, m):
        row = jnp.zeros(m)
        acc = 0.0
        for j in range(i):
            w = cpc[k] * jnp.sqrt(1.0 - acc)
            row = row.at[j].set(w)
            acc = acc + w * w
            k += 1
        row = row.at[i].set(jnp.sqrt(1.0 - acc))
        rows.append(row)
    return jnp.stack(rows)


@dataclass(frozen=True)
class CopulaSpec:
    """A copula family with its dependence parameter.

    Parameters
    ----------
    family : CopulaFamily or str
    tau : float, default=0.0
        Kendall's tau for the bivariate families.
    df : float, optional
        Degrees of freedom of the Student-t copula; fixed, never estimated.
    corr : tuple of tuple of float, optional
        Correlation matrix of the ``gaussian_m`` family.
    """

    family: CopulaFamily
    tau: float = 0.0
    df: float | None = None
    corr: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        fam = CopulaFamily(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "tau", float(self.tau))
        if fam is CopulaFamily.GAUSSIAN_M:
            if self.corr is None:
                raise ParameterDomainError("gaussian_m requires a correlation matrix")
            R = np.asarray(self.corr, dtype=float)
            if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] < 2:
                raise ParameterDomainError("correlation matrix must be square with m >= 2")
            if not np.allclose(R, R.T, atol=1e-12) or not np.allclose(np.diag(R), 1.0):
                raise ParameterDomainError("correlation matrix must be symmetric with unit diagonal")
            if np.linalg.eigvalsh(R).min() <= 0:
                raise ParameterDomainError("correlation matrix must be positive definite")
            object.__setattr__(self, "corr", tuple(tuple(float(x) for x in r) for r in R))
            return
        if fam is CopulaFamily.STUDENT_T:
            if self.df is None or not (float(self.df) > 0):
                raise ParameterDomainError("student_t copula requires df > 0")
            object.__setattr__(self, "df", float(self.df))
        tau_to_dependence(fam, self.tau)

    @property
    def dim(self) -> int:
        return len(self.corr) if self.family is CopulaFamily.GAUSSIAN_M else 2

    @property
    def theta(self) -> float:
        return tau_to_dependence(CopulaFamily.GUMBEL, self.tau)

    @property
    def rho(self) -> float:
        return tau_to_dependence(CopulaFamily.GAUSSIAN, self.tau)

    @property
    def corr_matrix(self) -> np.ndarray:
        if self.family is CopulaFamily.GAUSSIAN_M:
            return np.array(self.corr)
        r = self.rho if self.family.is_elliptical else 0.0
        return np.array([[1.0, r], [r, 1.0]])

    def free_params(self) -> np.ndarray:
        """Constrained free parameters: ``[tau]``, CPCs, or nothing."""
        if self.family is CopulaFamily.INDEPENDENCE:
            return np.zeros(0)
        if self.family is CopulaFamily.GAUSSIAN_M:
            return _corr_to_cpc(self.corr_matrix)
        return np.array([self.tau])

    @classmethod
    def from_free_params(cls, family, values, df=None, dim: int = 2) -> "CopulaSpec":
        family = CopulaFamily(family)
        values = np.asarray(values, dtype=float)
        if family is CopulaFamily.INDEPENDENCE:
            return cls(family)
        if family is CopulaFamily.GAUSSIAN_M:
            W = np.asarray(_cpc_to_chol(values, dim))
            R = W @ W.T
            R = 0.5 * (R + R.T)
            np.fill_diagonal(R, 1.0)
            return cls(family, corr=tuple(map(tuple, R)))
        return cls(family, tau=float(values[0]), df=df)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"family": self.family.value}
        if self.family is CopulaFamily.GAUSSIAN_M:
            d["corr"] = [list(r) for r in self.corr]
        elif self.family is not CopulaFamily.INDEPENDENCE:
            d["tau"] = self.tau
        if self.df is not None:
            d["df"] = self.df
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CopulaSpec":
        corr = d.get("corr")
        return cls(
            d["family"],
            tau=d.get("tau", 0.0),
            df=d.get("df"),
            corr=tuple(map(tuple, corr)) if corr is not None else None,
        )


def n_free_params(family, dim: int = 2) -> int:
    family = CopulaFamily(family)
    if family is CopulaFamily.INDEPENDENCE:
        return 0
    if family is CopulaFamily.GAUSSIAN_M:
        return dim * (dim - 1) // 2
    return 1


def free_param_names(family, dim: int = 2) -> tuple[str, ...]:
    family = CopulaFamily(family)
    if family is CopulaFamily.INDEPENDENCE:
        return ()
    if family is CopulaFamily.GAUSSIAN_M:
        return tuple(f"cpc_{j + 1}_{i + 1}" for i in range(1, dim) for j in range(i))
    return ("tau",)


# ---------------------------------------------------------------------------
# Free-parameter transforms (traceable)
# ---------------------------------------------------------------------------


def _constrain(family: CopulaFamily, z):
    """Constrained free params from unconstrained ``z`` and log|d psi / dz|."""
    z = jnp.asarray(z, dtype=jnp.float64)
    if family is CopulaFamily.INDEPENDENCE:
        return z, jnp.float64(0.0)
    s = jax.nn.sigmoid(z)
    log_s = jax.nn.log_sigmoid(z)
    log_1ms = jax.nn.log_sigmoid(-z)
    if family is CopulaFamily.GUMBEL:
        return s, jnp.sum(log_s + log_1ms)
    return 2.0 * s - 1.0, jnp.sum(math.log(2.0) + log_s + log_1ms)


def _unconstrain(family: CopulaFamily, values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if family is CopulaFamily.INDEPENDENCE:
        return v
    if family is CopulaFamily.GUMBEL:
        return np.log(v) - np.log1p(-v)
    return 2.0 * np.arctanh(v)


# ---------------------------------------------------------------------------
# Densities and distribution functions (traceable cores)
# ``psi`` is the constrained free-parameter vector; ``u`` has shape (..., m).
# ---------------------------------------------------------------------------


def _gumbel_log_density(u, theta):
    x = -jnp.log(u[..., 0])
    y = -jnp.log(u[..., 1])
    lx = jnp.log(x)
    ly = jnp.log(y)
    # x**theta + y**theta evaluated in log space to avoid overflow.
    log_s = jnp.logaddexp(theta * lx, theta * ly)
    A = jnp.exp(log_s / theta)
    return (
        -A
        + (theta - 1.0) * (lx + ly)
        + x
        + y
        + (1.0 / theta - 2.0) * log_s
        + jnp.log(A + theta - 1.0)
    )


def _gaussian2_log_density(u, rho):
    x = ndtri(u[..., 0])
    y = ndtri(u[..., 1])
    one_m = (1.0 - rho) * (1.0 + rho)
    return -0.5 * jnp.log(one_m) - (rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * one_m)


def _t2_log_density(u, rho, df):
    x = t_ppf(u[..., 0], df)
    y = t_ppf(u[..., 1], df)
    one_m = (1.0 - rho) * (1.0 + rho)
    q = (x * x - 2.0 * rho * x * y + y * y) / one_m
    log_joint = (
        gammaln((df + 2.0) / 2.0)
        - gammaln(df / 2.0)
        - jnp.log(df * jnp.pi)
        - 0.5 * jnp.log(one_m)
        - (df + 2.0) / 2.0 * jnp.log1p(q / df)
    )
    return log_joint - t_logpdf(x, df) - t_logpdf(y, df)


def _gaussian_m_log_density(u, cpc, m):
    W = _cpc_to_chol(cpc, m)
    x = ndtri(u)
    # z = W^{-1} x, so x' R^{-1} x = |z|^2.
    z = jax.scipy.linalg.solve_triangular(W, jnp.moveaxis(x, -1, 0), lower=True)
    quad = jnp.sum(z * z, axis=0) - jnp.sum(x * x, axis=-1)
    return -jnp.sum(jnp.log(jnp.diag(W))) - 0.5 * quad


def _log_density(family: CopulaFamily, psi, u, df=None):
    u = jnp.asarray(u, dtype=jnp.float64)
    if family is CopulaFamily.INDEPENDENCE:
        return jnp.zeros(u.shape[:-1])
    if family is CopulaFamily.GAUSSIAN_M:
        return _gaussian_m_log_density(u, psi, u.shape[-1])
    tau = psi[0]
    if family is CopulaFamily.GUMBEL:
        return _gumbel_log_density(u, 1.0 / (1.0 - tau))
    rho = jnp.sin(jnp.pi * tau / 2.0)
    if family is CopulaFamily.GAUSSIAN:
        return _gaussian2_log_density(u, rho)
    return _t2_log_density(u, rho, df)


def _gumbel_cdf(u, theta):
    u1, u2 = u[..., 0], u[..., 1]
    zero = (u1 <= 0) | (u2 <= 0)
    x = -jnp.log(jnp.where(zero, 0.5, u1))
    y = -jnp.log(jnp.where(zero, 0.5, u2))
    # 0**theta has an undefined derivative in theta; route x = 0 around it.
    xt = jnp.where(x > 0, jnp.exp(theta * jnp.log(jnp.where(x > 0, x, 1.0))), 0.0)
    yt = jnp.where(y > 0, jnp.exp(theta * jnp.log(jnp.where(y > 0, y, 1.0))), 0.0)
    s = xt + yt
    A = jnp.where(s > 0, jnp.exp(jnp.log(jnp.where(s > 0, s, 1.0)) / theta), 0.0)
    return jnp.where(zero, 0.0, jnp.exp(-A))


def _cdf(family: CopulaFamily, psi, u, df=None):
    u = jnp.clip(jnp.asarray(u, dtype=jnp.float64), 0.0, 1.0)
    if family is CopulaFamily.INDEPENDENCE:
        return jnp.prod(u, axis=-1)
    if family is CopulaFamily.GUMBEL:
        return _gumbel_cdf(u, 1.0 / (1.0 - psi[0]))
    if family is CopulaFamily.GAUSSIAN:
        rho = jnp.sin(jnp.pi * psi[0] / 2.0)
        return bvn_cdf(ndtri(u[..., 0]), ndtri(u[..., 1]), rho)
    if family is CopulaFamily.STUDENT_T:
        rho = jnp.sin(jnp.pi * psi[0] / 2.0)
        uu, vv, rr = jnp.broadcast_arrays(u[..., 0], u[..., 1], rho)
        out = jax.ShapeDtypeStruct(uu.shape, jnp.float64)
        return jax.pure_callback(
            lambda a, b, r: np.asarray(t_copula_cdf_np(a, b, float(np.ravel(r)[0]), df)),
            out,
            uu,
            vv,
            rr,
            vmap_method="sequential",
        )
    m = u.shape[-1]
    W = _cpc_to_chol(psi, m)
    R = W @ W.T

    def host(uv, R):
        flat = np.asarray(uv).reshape(-1, m)
        with np.errstate(divide="ignore"):
            vals = mvn_cdf_np(st.norm.ppf(flat), np.asarray(R))
        return vals.reshape(np.shape(uv)[:-1])

    out = jax.ShapeDtypeStruct(u.shape[:-1], jnp.float64)
    return jax.pure_callback(host, out, u, R, vmap_method="sequential")


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _check_dim(spec: CopulaSpec, u: np.ndarray):
    if u.shape[-1] != spec.dim:
        raise ValueError(f"expected {spec.dim} columns, got {u.shape[-1]}")


def copula_log_density(spec: CopulaSpec, u):
    """Log copula density; rows of ``u`` must lie strictly inside (0, 1)^m."""
    u_arr = np.asarray(u, dtype=float)
    _check_dim(spec, u_arr)
    if np.any(~((u_arr > 0) & (u_arr < 1))):
        raise CopulaDomainError("copula density requires u in the open unit cube; clamp first")
    out = np.asarray(
        _log_density(spec.family, jnp.asarray(spec.free_params()), u_arr, spec.df)
    )
    return float(out) if u_arr.ndim == 1 else out


def copula_cdf(spec: CopulaSpec, u):
    u_arr = np.asarray(u, dtype=float)
    _check_dim(spec, u_arr)
    out = np.asarray(_cdf(spec.family, jnp.asarray(spec.free_params()), u_arr, spec.df))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if u_arr.ndim == 1 else out


def _positive_stable(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    # Kanter's representation; Laplace transform exp(-s**alpha).
    U = rng.uniform(0.0, math.pi, size=n)
    E = rng.exponential(size=n)
    return (np.sin(alpha * U) / np.sin(U) ** (1.0 / alpha)) * (
        np.sin((1.0 - alpha) * U) / E
    ) ** ((1.0 - alpha) / alpha)


def copula_sample(spec: CopulaSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from the copula; every entry lies in the open interval (0, 1)."""
    m = spec.dim
    fam = spec.family
    if fam is CopulaFamily.INDEPENDENCE or (fam is not CopulaFamily.GAUSSIAN_M and spec.tau == 0.0
                                            and fam is not CopulaFamily.STUDENT_T):
        u = rng.uniform(size=(n, m))
    elif fam is CopulaFamily.GUMBEL:
        theta = spec.theta
        V = _positive_stable(1.0 / theta, n, rng)
        E = rng.exponential(size=(n, m))
        u = np.exp(-((E / V[:, None]) ** (1.0 / theta)))
    else:
        R = spec.corr_matrix
        z = rng.standard_normal(size=(n, m)) @ np.linalg.cholesky(R).T
        if fam is CopulaFamily.STUDENT_T:
            w = rng.chisquare(spec.df, size=n) / spec.df
            x = z / np.sqrt(w)[:, None]
            u = np.where(x > 0, st.t.sf(-x, spec.df), st.t.cdf(x, spec.df))
        else:
            u = st.norm.cdf(z)
    tiny = np.nextafter(0.0, 1.0)
    return np.clip(u, tiny, np.nextafter(1.0, 0.0))


@dataclass(frozen=True, eq=False)
class RankData:
    """Column-wise ranks with their rank-rectangle bounds.

    ``lower = (rank - 1) / (n + 1)`` and ``upper = rank / (n + 1)``.
    """

    ranks: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ties: bool = False

    @property
    def n(self) -> int:
        return self.ranks.shape[0]

    @property
    def m(self) -> int:
        return self.ranks.shape[1]

    def __eq__(self, other):
        return isinstance(other, RankData) and np.array_equal(self.ranks, other.ranks)

    @classmethod
    def from_ranks(cls, ranks, ties: bool = False) -> "RankData":
        ranks = np.asarray(ranks, dtype=np.int64)
        n = ranks.shape[0]
        for j in range(ranks.shape[1]):
            if not np.array_equal(np.sort(ranks[:, j]), np.arange(1, n + 1)):
                raise ValueError(f"column {j} is not a permutation of 1..{n}")
        lower = (ranks - 1) / (n + 1.0)
        upper = ranks / (n + 1.0)
        for arr in (ranks, lower, upper):
            arr.setflags(write=False)
        return cls(ranks, lower, upper, ties)


def compute_ranks(data) -> RankData:
    """Column-wise ranks of an (n, m) data matrix.

    Exact ties are broken by order of first occurrence and flagged with a
    ``TieWarning`` and ``RankData.ties``.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be a 2-D array")
    if x.shape[0] < 2:
        raise ValueError("ranks need at least 2 observations")
    ties = any(np.unique(x[:, j]).size < x.shape[0] for j in range(x.shape[1]))
    if ties:
        warnings.warn("ties in data broken by first occurrence", TieWarning, stacklevel=2)
    ranks = st.rankdata(x, method="ordinal", axis=0).astype(np.int64)
    return RankData.from_ranks(ranks, ties=ties)


def _corner_signs(m: int) -> tuple[np.ndarray, np.ndarray]:
    corners = np.array(list(itertools.product((0, 1), repeat=m)), dtype=bool)
    # corner[j] True means the upper bound b_j; sign is (-1)^(number of lower bounds).
    signs = np.where((m - corners.sum(axis=1)) % 2 == 0, 1.0, -1.0)
    return corners, signs


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
# Delta sums below this fraction of their largest corner lose more than ~1e-10
# relative accuracy to cancellation; such cells are integrated directly.
_CANCELLATION_RATIO = 1e-6


def _cell_quadrature(family: CopulaFamily, psi, lower, upper, df=None):
    """Tensor Gauss-Legendre integral of a bivariate density over each cell."""
    half = 0.5 * (upper - lower)
    mid = 0.5 * (upper + lower)
    x = mid[:, None, :] + half[:, None, :] * _GL_NODES[None, :, None]  # (n, k, 2)
    k = _GL_NODES.size
    pts = jnp.stack(
        [jnp.repeat(x[:, :, 0], k, axis=1), jnp.tile(x[:, :, 1], (1, k))], axis=-1
    )
    w = np.outer(_GL_WEIGHTS, _GL_WEIGHTS).ravel()
    dens = jnp.exp(_log_density(family, psi, pts, df))
    return jnp.sum(dens * w, axis=-1) * half[:, 0] * half[:, 1]


def _rect_probs(family: CopulaFamily, psi, lower, upper, df=None):
    """Copula probability of each rank rectangle.

    Inclusion-exclusion over the 2^m corners with Neumaier-compensated sums.
    For bivariate families, cells whose Delta sum is swamped by cancellation
    fall back to a 4x4 Gauss-Legendre integral of the density.
    """
    lower = jnp.asarray(lower)
    upper = jnp.asarray(upper)
    if family is CopulaFamily.INDEPENDENCE:
        return jnp.prod(upper - lower, axis=-1)
    m = lower.shape[-1]
    corners, signs = _corner_signs(m)
    pts = jnp.where(corners[None, :, :], upper[:, None, :], lower[:, None, :])
    cvals = _cdf(family, psi, pts, df)
    vals = cvals * signs[None, :]
    total = jnp.zeros(lower.shape[0])
    comp = jnp.zeros(lower.shape[0])
    for k in range(vals.shape[1]):
        v = vals[:, k]
        t = total + v
        comp = comp + jnp.where(jnp.abs(total) >= jnp.abs(v), (total - t) + v, (v - t) + total)
        total = t
    delta = total + comp
    if m != 2:
        return delta
    unreliable = delta <= _CANCELLATION_RATIO * jnp.max(cvals, axis=-1)
    return jnp.where(unreliable, _cell_quadrature(family, psi, lower, upper, df), delta)


def _rank_log_lik(family: CopulaFamily, psi, lower, upper, df=None):
    probs = _rect_probs(family, psi, lower, upper, df)
    safe = jnp.where(probs > 0, probs, 1.0)
    return jnp.where(jnp.all(probs > 0), jnp.sum(jnp.log(safe)), -jnp.inf)


def rank_rectangle_probabilities(spec: CopulaSpec, ranks: RankData) -> np.ndarray:
    if ranks.m != spec.dim:
        raise ValueError(f"rank data has {ranks.m} columns, copula has dimension {spec.dim}")
    if ranks.m > MAX_RANK_DIM:
        raise ValueError(
            f"exact rank likelihood needs 2^m corner evaluations; m={ranks.m} exceeds {MAX_RANK_DIM}"
        )
    return np.asarray(
        _rect_probs(
            spec.family, jnp.asarray(spec.free_params()), ranks.lower, ranks.upper, spec.df
        )
    )


def rank_log_likelihood(spec: CopulaSpec, ranks: RankData) -> float:
    """Log probability of the observed ranks under ``spec``.

    Raises
    ------
    RankLikelihoodError
        If numerical cancellation leaves a rectangle with non-positive mass;
        the offending row index is carried on the exception.
    """
    probs = rank_rectangle_probabilities(spec, ranks)
    bad = np.nonzero(~(probs > 0))[0]
    if bad.size:
        raise RankLikelihoodError(int(bad[0]), float(probs[bad[0]]))
    return float(np.sum(np.log(probs)))
