"""Copula model assembly: priors, parameter packing and log-target callables.

The joint density of one observation factors as

    f(y; theta, psi) = prod_j f_j(y_j; theta_j) * c(F_1(y_1), ..., F_m(y_m); psi)

so the log-likelihood splits into a marginal part ``log_g1(theta)`` and a
copula part ``log_g2(theta, psi)``. Every target in this module is a pure JAX
function of the packed unconstrained parameter vector

    eta = (theta_1, ..., theta_m, psi)

where ``theta_j`` holds the two unconstrained coordinates of margin ``j`` and
``psi`` the unconstrained copula coordinates. Priors are evaluated on the
constrained scale and the log-Jacobian of the transform is added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import partial
from typing import Any, Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.stats as st

from cutcopula import copulas as _cop
from cutcopula import marginals as _mar
from cutcopula._special import LOG_2PI
from cutcopula.copulas import CopulaDomainError, CopulaFamily, CopulaSpec, RankData
from cutcopula.marginals import MarginalFamily, MarginalSpec, ParameterDomainError

__all__ = [
    "PIT_CLAMP",
    "PriorFamily",
    "PriorTerm",
    "PriorSpec",
    "CopulaModel",
    "Dataset",
    "LogTarget",
    "log_g1_marginals",
    "log_g2_copula",
    "log_prior",
    "log_joint_posterior_unnorm",
    "log_cut1_stage1_target",
    "log_cut2_stage1_target",
    "joint_target",
    "cut1_stage1_target",
    "cut1_stage2_target",
    "cut2_stage1_target",
    "cut2_stage2_target",
    "ifm_copula_target",
    "initial_point",
]

PIT_CLAMP = 1e-12


class PriorFamily(str, Enum):
    NORMAL = "normal"
    HALF_NORMAL = "half_normal"
    LOG_NORMAL = "log_normal"
    UNIFORM_TAU = "uniform_tau"
    LOGIT_TAU_NORMAL = "logit_tau_normal"


@dataclass(frozen=True)
class PriorTerm:
    """One independent prior factor on a constrained parameter.

    Parameters
    ----------
    family : PriorFamily or str
    loc : float, default=0.0
        ``a`` in Normal(a, b^2) and LogNormal(a, b^2), the normal mean of
        ``logit((tau + 1) / 2)`` for ``logit_tau_normal``. Ignored otherwise.
    scale : float, default=1.0
        Standard deviation ``b``. For ``uniform_tau`` the support is
        ``(loc, scale)``.
    """

    family: PriorFamily
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        fam = PriorFamily(self.family)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "loc", float(self.loc))
        object.__setattr__(self, "scale", float(self.scale))
        if fam is PriorFamily.UNIFORM_TAU:
            if not self.loc < self.scale:
                raise ParameterDomainError("uniform_tau needs lower < upper")
        elif not self.scale > 0:
            raise ParameterDomainError(f"prior scale must be positive, got {self.scale}")
        if fam is PriorFamily.HALF_NORMAL and self.loc != 0.0:
            raise ParameterDomainError("half_normal is centred at 0")

    @classmethod
    def uniform_tau(cls, lower: float = 0.0, upper: float = 1.0) -> "PriorTerm":
        return cls(PriorFamily.UNIFORM_TAU, lower, upper)

    def log_density(self, x):
        """Log prior density at constrained value ``x`` (traceable)."""
        a, b = self.loc, self.scale
        fam = self.family
        if fam is PriorFamily.NORMAL:
            return -0.5 * LOG_2PI - math.log(b) - 0.5 * ((x - a) / b) ** 2
        if fam is PriorFamily.HALF_NORMAL:
            val = math.log(2.0) - 0.5 * LOG_2PI - math.log(b) - 0.5 * (x / b) ** 2
            return jnp.where(x > 0, val, -jnp.inf)
        if fam is PriorFamily.LOG_NORMAL:
            xs = jnp.where(x > 0, x, 1.0)
            lx = jnp.log(xs)
            val = -lx - 0.5 * LOG_2PI - math.log(b) - 0.5 * ((lx - a) / b) ** 2
            return jnp.where(x > 0, val, -jnp.inf)
        if fam is PriorFamily.UNIFORM_TAU:
            inside = (x > a) & (x < b)
            return jnp.where(inside, -math.log(b - a), -jnp.inf)
        # logit((tau + 1) / 2) = log(1 + tau) - log(1 - tau) ~ N(a, b^2)
        inside = (x > -1.0) & (x < 1.0)
        xs = jnp.where(inside, x, 0.0)
        s = jnp.log1p(xs) - jnp.log1p(-xs)
        val = (
            -0.5 * LOG_2PI
            - math.log(b)
            - 0.5 * ((s - a) / b) ** 2
            + math.log(2.0)
            - jnp.log1p(-xs * xs)
        )
        return jnp.where(inside, val, -jnp.inf)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family.value, "loc": self.loc, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PriorTerm":
        return cls(d["family"], d.get("loc", 0.0), d.get("scale", 1.0))


@dataclass(frozen=True)
class PriorSpec:
    """Independent prior terms keyed by parameter name."""

    terms: tuple[tuple[str, PriorTerm], ...]

    def __post_init__(self):
        terms = self.terms.items() if isinstance(self.terms, Mapping) else self.terms
        terms = tuple((str(k), v if isinstance(v, PriorTerm) else PriorTerm.from_dict(v))
                      for k, v in terms)
        names = [k for k, _ in terms]
        if len(set(names)) != len(names):
            raise ValueError("duplicate prior terms")
        object.__setattr__(self, "terms", terms)

    def __getitem__(self, name: str) -> PriorTerm:
        for k, v in self.terms:
            if k == name:
                return v
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.terms)

    def to_dict(self) -> dict[str, Any]:
        return {k: v.to_dict() for k, v in self.terms}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PriorSpec":
        return cls(tuple(d.items()))


@dataclass(frozen=True)
class CopulaModel:
    """Marginal families, a copula family and priors for every parameter.

    Parameters
    ----------
    marginals : sequence of MarginalFamily, str or MarginalSpec
        One family per data column; only the family of a ``MarginalSpec`` is
        used.
    copula : CopulaFamily or str
    priors : PriorSpec
        Must contain exactly one term per entry of ``param_names``.
    df : float, optional
        Degrees of freedom for the Student-t copula.

    Notes
    -----
    The packed unconstrained vector is ``(theta_1, ..., theta_m, psi)``; see
    ``param_names`` for the constrained name of every coordinate.
    """

    marginals: tuple[MarginalFamily, ...]
    copula: CopulaFamily
    priors: PriorSpec
    df: float | None = None

    def __post_init__(self):
        fams = tuple(
            m.family if isinstance(m, MarginalSpec) else MarginalFamily(m) for m in self.marginals
        )
        if len(fams) < 2:
            raise ValueError("a copula model needs m >= 2 margins")
        object.__setattr__(self, "marginals", fams)
        cop = CopulaFamily(self.copula)
        object.__setattr__(self, "copula", cop)
        if cop not in (CopulaFamily.GAUSSIAN_M, CopulaFamily.INDEPENDENCE) and len(fams) != 2:
            raise ValueError(f"{cop.value} copula is bivariate; got m={len(fams)}")
        if cop is CopulaFamily.STUDENT_T and (self.df is None or self.df <= 0):
            raise ParameterDomainError("student_t copula requires df > 0")
        if not isinstance(self.priors, PriorSpec):
            object.__setattr__(self, "priors", PriorSpec(self.priors))
        expected = set(self.param_names)
        given = set(self.priors.names)
        if expected != given:
            raise ValueError(
                f"priors must cover exactly {sorted(expected)}; "
                f"missing {sorted(expected - given)}, extra {sorted(given - expected)}"
            )

    @property
    def m(self) -> int:
        return len(self.marginals)

    @property
    def n_theta(self) -> int:
        return 2 * self.m

    @property
    def n_psi(self) -> int:
        return _cop.n_free_params(self.copula, self.m)

    @property
    def dim(self) -> int:
        return self.n_theta + self.n_psi

    @property
    def theta_names(self) -> tuple[str, ...]:
        return tuple(
            f"{p}_{j + 1}" for j, fam in enumerate(self.marginals) for p in fam.param_names
        )

    @property
    def psi_names(self) -> tuple[str, ...]:
        return _cop.free_param_names(self.copula, self.m)

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.theta_names + self.psi_names

    # -- packing --------------------------------------------------------
    def pack(self, marginals: Sequence[MarginalSpec], copula: CopulaSpec | None = None) -> np.ndarray:
        """Unconstrained vector from parameter objects."""
        if len(marginals) != self.m:
            raise ValueError(f"expected {self.m} marginal specs, got {len(marginals)}")
        parts = []
        for fam, spec in zip(self.marginals, marginals):
            if spec.family is not fam:
                raise ValueError(f"margin family {spec.family.value} != model {fam.value}")
            parts.append(_mar._unconstrain(fam, spec.params))
        if self.n_psi:
            if copula is None or copula.family is not self.copula:
                raise ValueError("a copula spec of the model family is required")
            parts.append(_cop._unconstrain(self.copula, copula.free_params()))
        return np.concatenate(parts)

    def unpack(self, z) -> tuple[list[MarginalSpec], CopulaSpec]:
        z = self._check_length(z, self.dim)
        theta = np.asarray(self.constrain_theta(jnp.asarray(z[: self.n_theta]))[0])
        specs = [MarginalSpec(f, tuple(theta[2 * j: 2 * j + 2])) for j, f in enumerate(self.marginals)]
        psi = np.asarray(_cop._constrain(self.copula, jnp.asarray(z[self.n_theta:]))[0])
        cop = CopulaSpec.from_free_params(self.copula, psi, df=self.df, dim=self.m)
        return specs, cop

    def _check_length(self, z, d: int) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != d:
            raise ValueError(f"packed vector has length {z.shape[-1]}, expected {d}")
        return z

    def constrain_theta(self, theta_z):
        """Constrained marginal parameters (flat, length 2m) and total log-Jacobian."""
        vals, jac = [], 0.0
        for j, fam in enumerate(self.marginals):
            p, lj = _mar._constrain(fam, theta_z[2 * j: 2 * j + 2])
            vals.append(p)
            jac = jac + lj
        return jnp.concatenate(vals), jac

    def constrain_psi(self, psi_z):
        return _cop._constrain(self.copula, psi_z)

    def to_constrained(self, draws, part: str = "all") -> np.ndarray:
        """Map unconstrained draws (..., k) to the constrained scale.

        ``part`` is ``"all"`` (packed vectors), ``"theta"`` or ``"psi"``.
        """
        draws = np.asarray(draws, dtype=float)
        width = {"all": self.dim, "theta": self.n_theta, "psi": self.n_psi}[part]
        if draws.shape[-1] != width:
            raise ValueError(f"{part} draws must have width {width}, got {draws.shape[-1]}")
        flat = jnp.asarray(draws.reshape(-1, width))
        if part == "all":
            fn = lambda z: jnp.concatenate(  # noqa: E731
                [self.constrain_theta(z[: self.n_theta])[0], self.constrain_psi(z[self.n_theta:])[0]]
            )
        elif part == "theta":
            fn = lambda z: self.constrain_theta(z)[0]  # noqa: E731
        else:
            fn = lambda z: self.constrain_psi(z)[0]  # noqa: E731
        return np.asarray(jax.vmap(fn)(flat)).reshape(draws.shape)

    def from_constrained(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        parts = [
            _mar._unconstrain(fam, values[2 * j: 2 * j + 2]) for j, fam in enumerate(self.marginals)
        ]
        parts.append(_cop._unconstrain(self.copula, values[self.n_theta:]))
        return np.concatenate(parts)

    def check_data(self, data: "Dataset"):
        if data.m != self.m:
            raise ValueError(f"dataset has {data.m} columns, model has {self.m} margins")
        for j, fam in enumerate(self.marginals):
            lo, _ = fam.support
            col = data.values[:, j]
            if math.isfinite(lo) and np.any(col <= lo):
                raise ParameterDomainError(
                    f"column {data.columns[j]!r} has values outside the {fam.value} support"
                )

    def to_dict(self) -> dict[str, Any]:
        d = {
            "marginals": [f.value for f in self.marginals],
            "copula": self.copula.value,
            "priors": self.priors.to_dict(),
        }
        if self.df is not None:
            d["df"] = self.df
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CopulaModel":
        return cls(tuple(d["marginals"]), d["copula"], PriorSpec.from_dict(d["priors"]), d.get("df"))


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable n x m data matrix with column names."""

    values: np.ndarray
    columns: tuple[str, ...] = field(default=())

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("dataset values must be a 2-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("dataset contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        cols = tuple(self.columns) or tuple(f"y{j + 1}" for j in range(v.shape[1]))
        if len(cols) != v.shape[1]:
            raise ValueError("one column name per column is required")
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def ranks(self) -> RankData:
        return _cop.compute_ranks(self.values)


# ---------------------------------------------------------------------------
# Traceable cores: core(model, z, *args) -> scalar
# ---------------------------------------------------------------------------


def _prior_theta(model: CopulaModel, theta_z):
    vals, jac = model.constrain_theta(theta_z)
    total = jac
    for k, name in enumerate(model.theta_names):
        total = total + model.priors[name].log_density(vals[k])
    return total


def _prior_psi(model: CopulaModel, psi_z):
    if model.n_psi == 0:
        return jnp.float64(0.0)
    vals, jac = model.constrain_psi(psi_z)
    total = jac
    for k, name in enumerate(model.psi_names):
        total = total + model.priors[name].log_density(vals[k])
    return total


def _g1_terms(model: CopulaModel, theta_z, y):
    vals, _ = model.constrain_theta(theta_z)
    cols = [
        _mar._log_pdf(fam, vals[2 * j: 2 * j + 2], y[:, j]) for j, fam in enumerate(model.marginals)
    ]
    return jnp.stack(cols, axis=-1)


def _pit(model: CopulaModel, theta_z, y):
    vals, _ = model.constrain_theta(theta_z)
    cols = [_mar._cdf(fam, vals[2 * j: 2 * j + 2], y[:, j]) for j, fam in enumerate(model.marginals)]
    return jnp.clip(jnp.stack(cols, axis=-1), PIT_CLAMP, 1.0 - PIT_CLAMP)


def _g2_terms(model: CopulaModel, theta_z, psi_z, y):
    u = _pit(model, theta_z, y)
    psi, _ = model.constrain_psi(psi_z)
    return _cop._log_density(model.copula, psi, u, model.df)


def _split(model: CopulaModel, z):
    return z[: model.n_theta], z[model.n_theta:]


def core_g1(model, theta_z, y):
    return jnp.sum(_g1_terms(model, theta_z, y))


def core_g2(model, z, y):
    theta_z, psi_z = _split(model, z)
    return jnp.sum(_g2_terms(model, theta_z, psi_z, y))


def core_joint(model, z, y):
    theta_z, psi_z = _split(model, z)
    return (
        jnp.sum(_g1_terms(model, theta_z, y))
        + jnp.sum(_g2_terms(model, theta_z, psi_z, y))
        + _prior_theta(model, theta_z)
        + _prior_psi(model, psi_z)
    )


def core_cut1_stage1(model, theta_z, y):
    return jnp.sum(_g1_terms(model, theta_z, y)) + _prior_theta(model, theta_z)


def core_cut1_stage2(model, psi_z, theta_z, y):
    """log p(psi | theta, D) up to a constant: log g2 + log p(psi)."""
    return jnp.sum(_g2_terms(model, theta_z, psi_z, y)) + _prior_psi(model, psi_z)


def core_cut2_stage1(model, psi_z, lower, upper):
    psi, _ = model.constrain_psi(psi_z)
    return _cop._rank_log_lik(model.copula, psi, lower, upper, model.df) + _prior_psi(model, psi_z)


def core_cut2_stage2(model, theta_z, psi_z, y):
    """log p(theta | psi, D) up to a constant: log g1 + log g2 + log p(theta)."""
    return (
        jnp.sum(_g1_terms(model, theta_z, y))
        + jnp.sum(_g2_terms(model, theta_z, psi_z, y))
        + _prior_theta(model, theta_z)
    )


def core_ifm_copula(model, psi_z, theta_z, y):
    """Copula log-likelihood in psi with the margins held fixed (no prior)."""
    return jnp.sum(_g2_terms(model, theta_z, psi_z, y))


# ---------------------------------------------------------------------------
# Jitted dispatch shared by every LogTarget. Compiled once per (core, model,
# argument shapes), so fresh datasets of the same size reuse the executable.
# ---------------------------------------------------------------------------


def _finite(x):
    return jnp.where(jnp.isnan(x), -jnp.inf, x)


@partial(jax.jit, static_argnums=(0, 1))
def _value(core, model, z, args):
    return _finite(core(model, z, *args))


@partial(jax.jit, static_argnums=(0, 1))
def _value_and_grad(core, model, z, args):
    v, g = jax.value_and_grad(lambda zz: core(model, zz, *args))(z)
    return v, g


@partial(jax.jit, static_argnums=(0, 1))
def _batch(core, model, Z, args):
    return jax.vmap(lambda zz: _finite(core(model, zz, *args)))(Z)


@partial(jax.jit, static_argnums=(0, 1))
def _batch_args(core, model, Z, args):
    """Vectorized over both ``Z`` and the leading axis of ``args[0]``."""
    head, rest = args[0], args[1:]
    return jax.vmap(lambda zz, h: _finite(core(model, zz, h, *rest)))(Z, head)


def _callable_core(fn):
    def core(_model, z, *args):
        return fn(z, *args)

    core.__name__ = getattr(fn, "__name__", "callable")
    return core


_CALLABLE_CORES: dict[Any, Callable] = {}


@dataclass(frozen=True, eq=False)
class LogTarget:
    """An unnormalized log density on an unconstrained space.

    Parameters
    ----------
    core : callable
        ``core(model, z, *args) -> scalar``, traceable by JAX.
    model : CopulaModel or None
        Static context passed to ``core``.
    args : tuple of arrays
        Dynamic extra arguments (data, fixed conditioning parameters).
    dim : int
        Length of ``z``.
    names : tuple of str, optional
        Coordinate names for reports.
    """

    core: Callable
    model: Any
    args: tuple
    dim: int
    names: tuple[str, ...] = ()

    @classmethod
    def from_callable(cls, fn: Callable, dim: int, names: Sequence[str] = ()) -> "LogTarget":
        """Wrap a plain traceable ``fn(z) -> scalar``."""
        core = _CALLABLE_CORES.get(fn)
        if core is None:
            core = _CALLABLE_CORES[fn] = _callable_core(fn)
        return cls(core, None, (), int(dim), tuple(names))

    def bind(self, *args) -> "LogTarget":
        """Same target with new dynamic arguments."""
        return replace(self, args=tuple(jnp.asarray(a) for a in args))

    def log_prob(self, z):
        """Traceable evaluation for use inside other JAX programs."""
        return self.core(self.model, z, *self.args)

    def __call__(self, z) -> float:
        return float(_value(self.core, self.model, jnp.asarray(z, dtype=jnp.float64), self.args))

    def value_and_grad(self, z) -> tuple[float, np.ndarray]:
        v, g = _value_and_grad(self.core, self.model, jnp.asarray(z, dtype=jnp.float64), self.args)
        return float(v), np.asarray(g)

    def grad(self, z) -> np.ndarray:
        return self.value_and_grad(z)[1]

    def batch(self, Z, chunk: int = 2048) -> np.ndarray:
        """Evaluate at every row of ``Z``; NaN is reported as ``-inf``."""
        Z = np.asarray(Z, dtype=float).reshape(-1, self.dim)
        out = np.empty(Z.shape[0])
        for start in range(0, Z.shape[0], chunk):
            block = Z[start: start + chunk]
            pad = chunk - block.shape[0] if Z.shape[0] > chunk else 0
            if pad:
                # keep one compiled shape for the trailing block
                block = np.concatenate([block, np.repeat(block[-1:], pad, axis=0)])
            vals = np.asarray(_batch(self.core, self.model, jnp.asarray(block), self.args))
            out[start: start + chunk] = vals[: vals.shape[0] - pad]
        return out

    def batch_with_first_arg(self, Z, heads) -> np.ndarray:
        """Evaluate row ``k`` of ``Z`` with ``args[0]`` replaced by ``heads[k]``."""
        return np.asarray(
            _batch_args(self.core, self.model, jnp.asarray(Z), (jnp.asarray(heads),) + self.args[1:])
        )


def _y(model: CopulaModel, data: Dataset):
    model.check_data(data)
    return jnp.asarray(data.values)


def joint_target(model: CopulaModel, data: Dataset) -> LogTarget:
    """Uncut posterior over the full packed vector ``eta``."""
    return LogTarget(core_joint, model, (_y(model, data),), model.dim, model.param_names)


def cut1_stage1_target(model: CopulaModel, data: Dataset) -> LogTarget:
    """Type-1 stage-1 target over ``theta``: log g1 + log p(theta)."""
    return LogTarget(core_cut1_stage1, model, (_y(model, data),), model.n_theta, model.theta_names)


def cut1_stage2_target(model: CopulaModel, data: Dataset, theta_z) -> LogTarget:
    """Type-1 conditional over ``psi`` with ``theta`` fixed."""
    return LogTarget(
        core_cut1_stage2,
        model,
        (jnp.asarray(theta_z, dtype=jnp.float64), _y(model, data)),
        model.n_psi,
        model.psi_names,
    )


def cut2_stage1_target(model: CopulaModel, ranks: RankData) -> LogTarget:
    """Type-2 stage-1 target over ``psi``: rank log-likelihood + log p(psi)."""
    if ranks.m != model.m:
        raise ValueError(f"rank data has {ranks.m} columns, model has {model.m}")
    if ranks.m > _cop.MAX_RANK_DIM:
        raise ValueError(f"exact rank likelihood is limited to m <= {_cop.MAX_RANK_DIM}")
    return LogTarget(
        core_cut2_stage1,
        model,
        (jnp.asarray(ranks.lower), jnp.asarray(ranks.upper)),
        model.n_psi,
        model.psi_names,
    )


def cut2_stage2_target(model: CopulaModel, data: Dataset, psi_z) -> LogTarget:
    """Type-2 conditional over ``theta`` with ``psi`` fixed."""
    return LogTarget(
        core_cut2_stage2,
        model,
        (jnp.asarray(psi_z, dtype=jnp.float64), _y(model, data)),
        model.n_theta,
        model.theta_names,
    )


def ifm_copula_target(model: CopulaModel, data: Dataset, theta_z) -> LogTarget:
    return LogTarget(
        core_ifm_copula,
        model,
        (jnp.asarray(theta_z, dtype=jnp.float64), _y(model, data)),
        model.n_psi,
        model.psi_names,
    )


# ---------------------------------------------------------------------------
# Eager scalar API
# ---------------------------------------------------------------------------


def log_g1_marginals(model: CopulaModel, data: Dataset, theta_z) -> float:
    """Marginal log-likelihood ``sum_ij log f_j(y_ij; theta_j)``."""
    theta_z = model._check_length(theta_z, model.n_theta)
    return float(core_g1(model, jnp.asarray(theta_z), _y(model, data)))


def log_g2_copula(model: CopulaModel, data: Dataset, theta_z, psi_z) -> float:
    """Copula log-likelihood of the clamped PIT values.

    Raises
    ------
    CopulaDomainError
        If a row gives a non-finite copula log density; the message names it.
    """
    theta_z = model._check_length(theta_z, model.n_theta)
    psi_z = model._check_length(psi_z, model.n_psi) if model.n_psi else np.zeros(0)
    terms = np.asarray(_g2_terms(model, jnp.asarray(theta_z), jnp.asarray(psi_z), _y(model, data)))
    bad = np.nonzero(~np.isfinite(terms))[0]
    if bad.size:
        err = CopulaDomainError(f"copula log density is not finite at row {bad[0]}")
        err.row = int(bad[0])
        raise err
    return float(np.sum(terms))


def log_prior(model: CopulaModel, z) -> float:
    """Log prior density on the unconstrained scale (with log-Jacobian)."""
    z = model._check_length(z, model.dim)
    theta_z, psi_z = _split(model, jnp.asarray(z))
    return float(_prior_theta(model, theta_z) + _prior_psi(model, psi_z))


def log_joint_posterior_unnorm(model: CopulaModel, data: Dataset, z) -> float:
    z = model._check_length(z, model.dim)
    return float(core_joint(model, jnp.asarray(z), _y(model, data)))


def log_cut1_stage1_target(model: CopulaModel, data: Dataset, theta_z) -> float:
    theta_z = model._check_length(theta_z, model.n_theta)
    return float(core_cut1_stage1(model, jnp.asarray(theta_z), _y(model, data)))


def log_cut2_stage1_target(model: CopulaModel, ranks: RankData, psi_z) -> float:
    psi_z = model._check_length(psi_z, model.n_psi)
    return cut2_stage1_target(model, ranks)(psi_z)


def initial_point(model: CopulaModel, data: Dataset) -> np.ndarray:
    """Moment-based unconstrained starting point for optimizers.

    Margins use moment matching (on ``log y`` for the lognormal); the copula
    starts at the empirical Kendall's tau pulled inside the family range.
    """
    model.check_data(data)
    specs = []
    for j, fam in enumerate(model.marginals):
        col = data.values[:, j]
        if fam is MarginalFamily.LOGNORMAL:
            col = np.log(col)
        mean, var = float(np.mean(col)), float(max(np.var(col), 1e-6))
        if fam is MarginalFamily.GAMMA:
            specs.append(MarginalSpec(fam, (mean * mean / var, mean / var)))
        else:
            specs.append(MarginalSpec(fam, (mean, var)))
    cop = None
    if model.copula is CopulaFamily.GAUSSIAN_M:
        # pairwise tau through the sine map, then projected to a valid correlation
        R = np.eye(model.m)
        for a in range(model.m):
            for b in range(a):
                t = st.kendalltau(data.values[:, a], data.values[:, b])[0]
                R[a, b] = R[b, a] = math.sin(math.pi * t / 2.0)
        w, V = np.linalg.eigh(R)
        R = (V * np.maximum(w, 1e-3)) @ V.T
        d = np.sqrt(np.diag(R))
        R = R / np.outer(d, d)
        cop = CopulaSpec(model.copula, corr=tuple(map(tuple, R)))
    elif model.copula is not CopulaFamily.INDEPENDENCE:
        t = st.kendalltau(data.values[:, 0], data.values[:, 1])[0]
        lo, hi = model.copula.tau_range
        t = float(np.clip(t, lo + 0.02, hi - 0.02))
        cop = CopulaSpec(model.copula, tau=t, df=model.df)
    return model.pack(specs, cop)
