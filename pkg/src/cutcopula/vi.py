"""Gaussian variational inference, ADADELTA, and two-stage cut VI.

The variational family is ``N(mu, L L^T)`` with ``L`` lower triangular. It is
stored as ``{"mu": mu, "Lr": Lr}`` where the strict lower triangle of ``Lr``
is that of ``L`` and ``diag(Lr) = log diag(L)``. Partitioning ``eta = (eta1,
eta2)`` gives the blocks

    L = [[L1, 0], [L21, L22]]

so that ``eta1 ~ N(mu1, L1 L1^T)`` and ``eta2 | eta1`` is Gaussian with mean
``mu2 + L21 L1^{-1} (eta1 - mu1)`` and covariance ``L22 L22^T``.

Two-stage cut VI first fits ``(mu1, L1)`` to the cut stage-1 target, then
fits ``(mu2, L21, L22)`` against the full joint posterior with the stage-1
block held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np
import scipy.stats as st
from jax.scipy.special import ndtr

from cutcopula import copulas as _cop
from cutcopula import model as _model
from cutcopula.copulas import CopulaSpec, RankData
from cutcopula.mcmc import OptimizationError
from cutcopula.model import PIT_CLAMP, CopulaModel, Dataset, LogTarget

__all__ = [
    "GaussianVariationalFamily",
    "AuxiliaryVariationalFamily",
    "AdadeltaState",
    "VISettings",
    "VIFit",
    "CutVIResult",
    "adadelta_init",
    "adadelta_step",
    "reparam_sample",
    "elbo_estimate",
    "elbo_grad",
    "fit_gaussian_vi",
    "fit_vi",
    "fit_cut_vi",
    "fit_augmented_type2_vi",
    "augmented_is_estimate",
]

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Variational families
# ---------------------------------------------------------------------------


def _chol_from_raw(Lr):
    Lr = jnp.asarray(Lr)
    return jnp.tril(Lr, -1) + jnp.diag(jnp.exp(jnp.diag(Lr)))


@dataclass(frozen=True, eq=False)
class GaussianVariationalFamily:
    """``N(mu, L L^T)`` with an optional ``(d1, d2)`` block partition.

    Parameters
    ----------
    mu : ndarray of shape (d,)
    L : ndarray of shape (d, d)
        Lower triangular with a strictly positive diagonal.
    blocks : tuple of int, optional
        ``(d1, d2)`` with ``d1 + d2 = d``; defaults to ``(d, 0)``.
    """

    mu: np.ndarray
    L: np.ndarray
    blocks: tuple[int, int] | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).copy()
        L = np.atleast_2d(np.asarray(self.L, dtype=float)).copy()
        d = mu.size
        if L.shape != (d, d):
            raise ValueError(f"L must be {d}x{d}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("L must be lower triangular")
        if np.any(~(np.diag(L) > 0)):
            raise ValueError("diag(L) must be strictly positive")
        blocks = self.blocks or (d, 0)
        if sum(blocks) != d or min(blocks) < 0:
            raise ValueError(f"blocks {blocks} do not partition dimension {d}")
        mu.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "blocks", tuple(int(b) for b in blocks))

    @classmethod
    def default(cls, dim: int, scale: float = 0.1, blocks=None) -> "GaussianVariationalFamily":
        return cls(np.zeros(dim), scale * np.eye(dim), blocks)

    @classmethod
    def from_raw(cls, params: dict, blocks=None) -> "GaussianVariationalFamily":
        return cls(np.asarray(params["mu"]), np.asarray(_chol_from_raw(params["Lr"])), blocks)

    def raw(self) -> dict:
        Lr = np.tril(self.L, -1) + np.diag(np.log(np.diag(self.L)))
        return {"mu": jnp.asarray(self.mu), "Lr": jnp.asarray(Lr)}

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def covariance(self) -> np.ndarray:
        return self.L @ self.L.T

    def entropy(self) -> float:
        return 0.5 * self.dim * (LOG_2PI + 1.0) + float(np.sum(np.log(np.diag(self.L))))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mu + rng.standard_normal((n, self.dim)) @ self.L.T

    def log_density(self, eta) -> np.ndarray:
        eta = np.atleast_2d(eta)
        z = np.linalg.solve(self.L, (eta - self.mu).T)
        return -0.5 * (self.dim * LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(self.L)))

    # -- blocks ------------------------------------------------------------
    @property
    def mu1(self) -> np.ndarray:
        return self.mu[: self.blocks[0]]

    @property
    def mu2(self) -> np.ndarray:
        return self.mu[self.blocks[0]:]

    @property
    def L1(self) -> np.ndarray:
        d1 = self.blocks[0]
        return self.L[:d1, :d1]

    @property
    def L21(self) -> np.ndarray:
        d1 = self.blocks[0]
        return self.L[d1:, :d1]

    @property
    def L22(self) -> np.ndarray:
        d1 = self.blocks[0]
        return self.L[d1:, d1:]

    def marginal_eta1(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu1, self.L1 @ self.L1.T

    def conditional_eta2(self, eta1) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of ``eta2 | eta1``."""
        shift = np.linalg.solve(self.L1, np.asarray(eta1, dtype=float) - self.mu1)
        return self.mu2 + self.L21 @ shift, self.L22 @ self.L22.T


@dataclass(frozen=True, eq=False)
class AuxiliaryVariationalFamily:
    """Independent transformed normals for latent uniforms in rank cells.

    ``u_ij = a_ij + (b_ij - a_ij) * Phi(delta_ij + sqrt(omega_ij) * z_ij)``
    with ``z_ij ~ N(0, 1)``, so ``u_ij`` always falls in its cell.
    """

    delta: np.ndarray
    log_omega: np.ndarray
    ranks: RankData

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float)
        log_omega = np.array(self.log_omega, dtype=float)
        shape = (self.ranks.n, self.ranks.m)
        if delta.shape != shape or log_omega.shape != shape:
            raise ValueError(f"delta and log_omega must have shape {shape}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "log_omega", log_omega)

    @property
    def omega(self) -> np.ndarray:
        return np.exp(self.log_omega)

    def sample(self, rng: np.random.Generator, n_draws: int | None = None) -> np.ndarray:
        shape = self.delta.shape if n_draws is None else (n_draws,) + self.delta.shape
        z = rng.standard_normal(shape)
        return np.asarray(_aux_transform(self.delta, self.log_omega, self.ranks.lower, self.ranks.upper, z))

    def log_density(self, u) -> np.ndarray:
        """Log density of ``q(u)`` summed over cells (leading axes kept)."""
        a, b = self.ranks.lower, self.ranks.upper
        p = (np.asarray(u) - a) / (b - a)
        zeta = st.norm.ppf(p)
        lw = self.log_omega
        log_n = -0.5 * (LOG_2PI + lw) - 0.5 * (zeta - self.delta) ** 2 / np.exp(lw)
        log_phi = -0.5 * LOG_2PI - 0.5 * zeta**2
        return np.sum(log_n - np.log(b - a) - log_phi, axis=(-2, -1))

    def entropy(self) -> float:
        return float(np.sum(_aux_entropy(self.delta, self.log_omega, self.ranks.lower, self.ranks.upper)))


def _aux_transform(delta, log_omega, lower, upper, z):
    p = ndtr(delta + jnp.exp(0.5 * log_omega) * z)
    return lower + (upper - lower) * p


def _aux_entropy(delta, log_omega, lower, upper):
    return 0.5 * log_omega + 0.5 - 0.5 * (delta**2 + jnp.exp(log_omega)) + jnp.log(upper - lower)


# ---------------------------------------------------------------------------
# ADADELTA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdadeltaState:
    """Running averages ``E[g^2]`` and ``E[dx^2]`` (pytrees matching the parameters)."""

    sq_grad: Any
    sq_update: Any
    rho: float = 0.85
    eps: float = 1e-6


jax.tree_util.register_pytree_node(
    AdadeltaState,
    lambda s: ((s.sq_grad, s.sq_update), (s.rho, s.eps)),
    lambda aux, ch: AdadeltaState(ch[0], ch[1], *aux),
)


def adadelta_init(params, rho: float = 0.85, eps: float = 1e-6) -> AdadeltaState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdadeltaState(zeros, zeros, rho, eps)


def adadelta_step(state: AdadeltaState, grad):
    """One ADADELTA recursion for gradient *ascent*; returns ``(update, new_state)``.

    ``E[g^2] <- rho E[g^2] + (1 - rho) g^2``,
    ``dx = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``,
    ``E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2``.
    """
    rho, eps = state.rho, state.eps
    sq_g = jax.tree_util.tree_map(lambda s, g: rho * s + (1.0 - rho) * g * g, state.sq_grad, grad)
    upd = jax.tree_util.tree_map(
        lambda sd, sg, g: jnp.sqrt(sd + eps) / jnp.sqrt(sg + eps) * g, state.sq_update, sq_g, grad
    )
    sq_d = jax.tree_util.tree_map(lambda s, d: rho * s + (1.0 - rho) * d * d, state.sq_update, upd)
    return upd, AdadeltaState(sq_g, sq_d, rho, eps)


# ---------------------------------------------------------------------------
# ELBO pieces
# ---------------------------------------------------------------------------


def reparam_sample(q: GaussianVariationalFamily, rng: np.random.Generator | None = None, z=None):
    """``eta = mu + L z``; returns ``(eta, z)``."""
    if z is None:
        z = rng.standard_normal(q.dim)
    z = np.asarray(z, dtype=float)
    return q.mu + z @ q.L.T, z


def _entropy_raw(params):
    d = params["mu"].shape[0]
    return 0.5 * d * (LOG_2PI + 1.0) + jnp.sum(jnp.diag(params["Lr"]))


def _elbo_single(core, model, params, z, args):
    L = _chol_from_raw(params["Lr"])
    eta = params["mu"] + L @ z
    return core(model, eta, *args)


def _elbo_mc(core, model, params, Z, args):
    """Pathwise ELBO estimate: mean log h over draws plus the analytic entropy."""
    vals = jax.vmap(lambda z: _elbo_single(core, model, params, z, args))(Z)
    return jnp.mean(vals) + _entropy_raw(params)


@partial(jax.jit, static_argnums=(0, 1))
def _elbo_value_and_grad(core, model, params, Z, args):
    return jax.value_and_grad(lambda p: _elbo_mc(core, model, p, Z, args))(params)


def elbo_estimate(
    q: GaussianVariationalFamily,
    target: LogTarget,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
    z=None,
    max_resample: int = 10,
) -> float:
    """Monte Carlo ``mean(log h(eta) - log q(eta))`` over ``eta = mu + L z``.

    A draw with non-finite ``log h`` is redrawn, up to ``max_resample`` times.
    Passing ``z`` (shape ``(n_samples, d)``) fixes the random numbers.
    """
    if z is None:
        z = rng.standard_normal((n_samples, q.dim))
    z = np.atleast_2d(np.asarray(z, dtype=float)).copy()
    eta = q.mu + z @ q.L.T
    lh = target.batch(eta)
    for _ in range(max_resample):
        bad = ~np.isfinite(lh)
        if not bad.any():
            break
        if rng is None:
            raise OptimizationError("log h is not finite at a fixed draw")
        z[bad] = rng.standard_normal((int(bad.sum()), q.dim))
        eta[bad] = q.mu + z[bad] @ q.L.T
        lh[bad] = target.batch(eta[bad])
    if not np.all(np.isfinite(lh)):
        raise OptimizationError(f"log h not finite after {max_resample} redraws")
    log_q = -0.5 * (q.dim * LOG_2PI + np.sum(z * z, axis=1)) - np.sum(np.log(np.diag(q.L)))
    return float(np.mean(lh - log_q))


def elbo_grad(
    q: GaussianVariationalFamily,
    target: LogTarget,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
    z=None,
) -> dict:
    """Reparameterization gradient of the ELBO.

    Returns a dict with ``"mu"`` and ``"Lr"`` (gradient with respect to the
    strict lower triangle of ``L`` and to ``log diag(L)``). The entropy term
    is differentiated analytically.
    """
    if z is None:
        z = rng.standard_normal((n_samples, q.dim))
    Z = jnp.atleast_2d(jnp.asarray(z, dtype=jnp.float64))
    _, g = _elbo_value_and_grad(target.core, target.model, q.raw(), Z, target.args)
    return {"mu": np.asarray(g["mu"]), "Lr": np.tril(np.asarray(g["Lr"]))}


# ---------------------------------------------------------------------------
# Optimizer loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VISettings:
    """Optimizer settings for Gaussian VI.

    Parameters
    ----------
    steps : int, default=10000
    samples_per_step : int, default=1
    rho, eps : float
        ADADELTA decay and conditioner.
    init_scale : float, default=0.1
        Initial ``L = init_scale * I``.
    init : {"zero", "mode"}, default="zero"
        ``"zero"`` starts at ``mu = 0``; ``"mode"`` starts at the supplied
        starting point (moment matching for model targets).
    chunk : int, default=1000
        Steps per compiled scan call.
    average_tail : float, default=0.0
        Fraction of final steps whose iterates are averaged (Polyak-Ruppert)
        to give the returned parameters; 0 returns the last iterate.
    """

    steps: int = 10000
    samples_per_step: int = 1
    rho: float = 0.85
    eps: float = 1e-6
    init_scale: float = 0.1
    init: str = "zero"
    chunk: int = 1000
    average_tail: float = 0.0

    def __post_init__(self):
        if self.steps < 1 or self.samples_per_step < 1:
            raise ValueError("steps and samples_per_step must be >= 1")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must lie in [0, 1)")
        if self.init not in ("zero", "mode"):
            raise ValueError("init must be 'zero' or 'mode'")


@dataclass(frozen=True, eq=False)
class VIFit:
    family: GaussianVariationalFamily
    elbo_trace: np.ndarray
    steps: int
    skipped: int = 0


@partial(jax.jit, static_argnums=(0, 1))
def _scan_chunk(core, model, params, state, acc, Zs, steps, avg_start, args, mask):
    def step(carry, inp):
        p, s, a = carry
        Z, t = inp
        val, g = jax.value_and_grad(lambda pp: _elbo_mc(core, model, pp, Z, args))(p)
        ok = jnp.isfinite(val) & jnp.all(
            jnp.stack([jnp.all(jnp.isfinite(x)) for x in jax.tree_util.tree_leaves(g)])
        )
        g = jax.tree_util.tree_map(lambda x, m: jnp.where(ok & m, x, 0.0), g, mask)
        upd, s_new = adadelta_step(s, g)
        p_new = jax.tree_util.tree_map(lambda x, d, m: jnp.where(m, x + d, x), p, upd, mask)
        s_new = jax.tree_util.tree_map(lambda new, old: jnp.where(ok, new, old), s_new, s)
        a_new = jax.tree_util.tree_map(lambda x, y: jnp.where(t >= avg_start, x + y, x), a, p_new)
        return (p_new, s_new, a_new), (val, ok)

    (params, state, acc), (vals, oks) = jax.lax.scan(step, (params, state, acc), (Zs, steps))
    return params, state, acc, vals, oks


def _run_adadelta(target: LogTarget, params: dict, mask: dict, settings: VISettings, rng):
    state = adadelta_init(params, settings.rho, settings.eps)
    acc = jax.tree_util.tree_map(jnp.zeros_like, params)
    avg_start = settings.steps - int(round(settings.average_tail * settings.steps))
    d = params["mu"].shape[0]
    trace = []
    skipped = 0
    done = 0
    while done < settings.steps:
        k = min(settings.chunk, settings.steps - done)
        Zs = jnp.asarray(rng.standard_normal((k, settings.samples_per_step, d)))
        steps = jnp.arange(done, done + k)
        params, state, acc, vals, oks = _scan_chunk(
            target.core, target.model, params, state, acc, Zs, steps, avg_start, target.args, mask
        )
        trace.append(np.asarray(vals))
        skipped += int(k - np.sum(np.asarray(oks)))
        done += k
        leaves = [np.asarray(x) for x in jax.tree_util.tree_leaves(params)]
        if not all(np.all(np.isfinite(x)) for x in leaves):
            raise OptimizationError(
                f"variational parameters diverged by step {done}", np.concatenate(trace)
            )
    if avg_start < settings.steps:
        count = settings.steps - avg_start
        # frozen coordinates are copied, not averaged, so they stay bit-identical
        params = jax.tree_util.tree_map(
            lambda p, a, m: jnp.where(m, a / count, p), params, acc, mask
        )
    return params, np.concatenate(trace) if trace else np.zeros(0), skipped


def fit_gaussian_vi(
    target: LogTarget,
    dim: int | None = None,
    settings: VISettings | None = None,
    rng: np.random.Generator | None = None,
    init: GaussianVariationalFamily | None = None,
) -> VIFit:
    """Maximize the ELBO of ``N(mu, L L^T)`` against ``target`` with ADADELTA.

    Raises
    ------
    OptimizationError
        If the variational parameters become non-finite.
    """
    settings = settings or VISettings()
    rng = rng if rng is not None else np.random.default_rng()
    dim = target.dim if dim is None else int(dim)
    q0 = init or GaussianVariationalFamily.default(dim, settings.init_scale)
    params = q0.raw()
    mask = {"mu": jnp.ones(dim, bool), "Lr": jnp.tril(jnp.ones((dim, dim), bool))}
    params, trace, skipped = _run_adadelta(target, params, mask, settings, rng)
    return VIFit(GaussianVariationalFamily.from_raw(params), trace, settings.steps, skipped)


# ---------------------------------------------------------------------------
# Model-level VI
# ---------------------------------------------------------------------------


def core_joint_psi_first(model, z, y):
    """Joint posterior with the packing reordered to ``(psi, theta)``."""
    k = model.n_psi
    return _model.core_joint(model, jnp.concatenate([z[k:], z[:k]]), y)


@dataclass(frozen=True, eq=False)
class CutVIResult:
    """Outcome of (cut) variational inference.

    ``family`` is over ``(eta1, eta2)``; ``order`` maps its coordinates back
    to the model's packing, so ``draws[:, order]`` is in packing order.
    """

    family: GaussianVariationalFamily
    stage1: GaussianVariationalFamily
    elbo_trace_stage1: np.ndarray
    elbo_trace_stage2: np.ndarray
    steps: tuple[int, int]
    cut: str | None
    names: tuple[str, ...]
    order: np.ndarray
    seed: int | None = None
    auxiliary: AuxiliaryVariationalFamily | None = None
    extra: dict = field(default_factory=dict)

    def mean(self) -> np.ndarray:
        """Variational mean in packing order (unconstrained)."""
        return self.family.mu[self.order]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draws in packing order (unconstrained)."""
        return self.family.sample(rng, n)[:, self.order]


def _initial(settings: VISettings, dim: int, start=None) -> GaussianVariationalFamily:
    mu = np.zeros(dim) if settings.init == "zero" or start is None else np.asarray(start, float)
    return GaussianVariationalFamily(mu, settings.init_scale * np.eye(dim))


def _stage2(target_joint: LogTarget, stage1: GaussianVariationalFamily, d2: int,
            settings: VISettings, rng, start2=None):
    d1 = stage1.dim
    d = d1 + d2
    mu = np.concatenate([stage1.mu, _initial(settings, d2, start2).mu])
    L = np.zeros((d, d))
    L[:d1, :d1] = stage1.L
    L[d1:, d1:] = settings.init_scale * np.eye(d2)
    params = GaussianVariationalFamily(mu, L).raw()
    # stage-1 raw parameters are carried over bit for bit
    params["mu"] = params["mu"].at[:d1].set(jnp.asarray(stage1.raw()["mu"]))
    params["Lr"] = params["Lr"].at[:d1, :d1].set(jnp.asarray(stage1.raw()["Lr"]))
    rows = jnp.arange(d)[:, None] >= d1
    mask = {
        "mu": jnp.arange(d) >= d1,
        "Lr": rows & jnp.tril(jnp.ones((d, d), bool)),
    }
    params, trace, skipped = _run_adadelta(target_joint, params, mask, settings, rng)
    return params, trace, skipped


def fit_vi(
    model: CopulaModel,
    data: Dataset,
    settings: VISettings | None = None,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> CutVIResult:
    """Conventional (uncut) Gaussian VI of the joint posterior."""
    settings = settings or VISettings()
    rng = rng if rng is not None else np.random.default_rng(seed)
    target = _model.joint_target(model, data)
    start = _model.initial_point(model, data)
    fit = fit_gaussian_vi(target, settings=settings, rng=rng, init=_initial(settings, model.dim, start))
    fam = GaussianVariationalFamily(fit.family.mu, fit.family.L, (model.dim, 0))
    return CutVIResult(
        fam, fam, fit.elbo_trace, np.zeros(0), (fit.steps, 0), None,
        model.param_names, np.arange(model.dim), seed, extra={"skipped": fit.skipped},
    )


def fit_cut_vi(
    model: CopulaModel,
    data: Dataset,
    cut_type: str,
    settings: VISettings | None = None,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    stage2_settings: VISettings | None = None,
) -> CutVIResult:
    """Two-stage cut VI.

    Parameters
    ----------
    cut_type : {"type1", "type2"}
        ``type1`` fits ``q(theta)`` to ``log g1 + log p(theta)``; ``type2``
        fits ``q(psi)`` to the exact rank likelihood plus ``log p(psi)``
        (requires m <= 10). Stage 2 then fits the conditional block against
        the joint posterior with stage 1 frozen.
    """
    settings = settings or VISettings()
    stage2_settings = stage2_settings or settings
    rng = rng if rng is not None else np.random.default_rng(seed)
    start = _model.initial_point(model, data)
    nt, npsi = model.n_theta, model.n_psi
    y = jnp.asarray(data.values)
    if cut_type == "type1":
        t1 = _model.cut1_stage1_target(model, data)
        joint = _model.joint_target(model, data)
        s1_start, s2_start, d2 = start[:nt], start[nt:], npsi
        names = model.theta_names + model.psi_names
        order = np.arange(model.dim)
    elif cut_type == "type2":
        t1 = _model.cut2_stage1_target(model, data.ranks())
        joint = LogTarget(core_joint_psi_first, model, (y,), model.dim)
        s1_start, s2_start, d2 = start[nt:], start[:nt], nt
        names = model.psi_names + model.theta_names
        order = np.concatenate([np.arange(npsi, model.dim), np.arange(npsi)])
    else:
        raise ValueError(f"unknown cut type {cut_type!r}; expected 'type1' or 'type2'")
    fit1 = fit_gaussian_vi(t1, settings=settings, rng=rng, init=_initial(settings, t1.dim, s1_start))
    params, trace2, skipped2 = _stage2(joint, fit1.family, d2, stage2_settings, rng, s2_start)
    fam = GaussianVariationalFamily.from_raw(params, (t1.dim, d2))
    return CutVIResult(
        fam, fit1.family, fit1.elbo_trace, trace2, (fit1.steps, stage2_settings.steps),
        cut_type, names, order, seed, extra={"skipped": fit1.skipped + skipped2},
    )


# ---------------------------------------------------------------------------
# Augmented type-2 VI
# ---------------------------------------------------------------------------


def _aug_elbo(model, params, z_psi, z_u, lower, upper):
    L = _chol_from_raw(params["Lr"])
    psi_z = params["mu"] + L @ z_psi
    psi, _ = model.constrain_psi(psi_z)
    u = _aux_transform(params["delta"], params["log_omega"], lower, upper, z_u)
    u = jnp.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP)
    log_c = jnp.sum(_cop._log_density(model.copula, psi, u, model.df))
    return (
        log_c
        + _model._prior_psi(model, psi_z)
        + _entropy_raw(params)
        + jnp.sum(_aux_entropy(params["delta"], params["log_omega"], lower, upper))
    )


@partial(jax.jit, static_argnums=(0,))
def _aug_chunk(model, params, state, Zp, Zu, lower, upper):
    def step(carry, zs):
        p, s = carry
        z_psi, z_u = zs
        val, g = jax.value_and_grad(
            lambda pp: jnp.mean(
                jax.vmap(lambda a, b: _aug_elbo(model, pp, a, b, lower, upper))(z_psi, z_u)
            )
        )(p)
        ok = jnp.isfinite(val) & jnp.all(
            jnp.stack([jnp.all(jnp.isfinite(x)) for x in jax.tree_util.tree_leaves(g)])
        )
        g = jax.tree_util.tree_map(lambda x: jnp.where(ok, x, 0.0), g)
        g["Lr"] = jnp.tril(g["Lr"])
        upd, s_new = adadelta_step(s, g)
        p_new = jax.tree_util.tree_map(lambda x, d: x + d, p, upd)
        s_new = jax.tree_util.tree_map(lambda new, old: jnp.where(ok, new, old), s_new, s)
        return (p_new, s_new), (val, ok)

    (params, state), (vals, oks) = jax.lax.scan(step, (params, state), (Zp, Zu))
    return params, state, vals, oks


def fit_augmented_type2_vi(
    model: CopulaModel,
    data: Dataset,
    settings: VISettings | None = None,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    stage2_settings: VISettings | None = None,
) -> CutVIResult:
    """Type-2 cut VI with latent uniforms instead of the exact rank likelihood.

    Stage 1 maximizes the ELBO of ``q(psi) q(u)`` against
    ``p(r | u) p(u | psi) p(psi)``; the indicator ``p(r | u)`` is 1 for every
    draw because ``u`` is generated inside its rank cell, and the entropy of
    ``q(u)`` is analytic. Cost per step is O(nm), so any m works.
    """
    settings = settings or VISettings()
    stage2_settings = stage2_settings or settings
    rng = rng if rng is not None else np.random.default_rng(seed)
    ranks = data.ranks()
    start = _model.initial_point(model, data)
    nt, npsi = model.n_theta, model.n_psi
    q0 = _initial(settings, npsi, start[nt:])
    params = q0.raw()
    n, m = ranks.n, ranks.m
    params["delta"] = jnp.zeros((n, m))
    params["log_omega"] = jnp.zeros((n, m))
    lower, upper = jnp.asarray(ranks.lower), jnp.asarray(ranks.upper)
    state = adadelta_init(params, settings.rho, settings.eps)
    trace = []
    skipped = 0
    done = 0
    S = settings.samples_per_step
    while done < settings.steps:
        k = min(settings.chunk, settings.steps - done)
        Zp = jnp.asarray(rng.standard_normal((k, S, npsi)))
        Zu = jnp.asarray(rng.standard_normal((k, S, n, m)))
        params, state, vals, oks = _aug_chunk(model, params, state, Zp, Zu, lower, upper)
        trace.append(np.asarray(vals))
        skipped += int(k - np.sum(np.asarray(oks)))
        done += k
        if not all(np.all(np.isfinite(np.asarray(x))) for x in jax.tree_util.tree_leaves(params)):
            raise OptimizationError(f"augmented VI diverged by step {done}", np.concatenate(trace))
    stage1 = GaussianVariationalFamily.from_raw({"mu": params["mu"], "Lr": params["Lr"]})
    aux = AuxiliaryVariationalFamily(np.asarray(params["delta"]), np.asarray(params["log_omega"]), ranks)
    joint = LogTarget(core_joint_psi_first, model, (jnp.asarray(data.values),), model.dim)
    p2, trace2, skipped2 = _stage2(joint, stage1, nt, stage2_settings, rng, start[:nt])
    fam = GaussianVariationalFamily.from_raw(p2, (npsi, nt))
    order = np.concatenate([np.arange(npsi, model.dim), np.arange(npsi)])
    return CutVIResult(
        fam, stage1, np.concatenate(trace), trace2, (settings.steps, stage2_settings.steps),
        "type2_augmented", model.psi_names + model.theta_names, order, seed, aux,
        extra={"skipped": skipped + skipped2},
    )


def augmented_is_estimate(
    spec: CopulaSpec,
    aux: AuxiliaryVariationalFamily,
    n_draws: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Importance-sampling estimate of the integrated augmented likelihood.

    Averages ``p(r, u | psi) / q(u)`` over ``u ~ q``. Because every draw lies
    in its rank cell, the integral equals the rank likelihood at ``psi``.

    Returns
    -------
    estimate, standard_error : float
    """
    u = aux.sample(rng, n_draws)
    flat = u.reshape(-1, aux.ranks.m)
    log_c = np.asarray(_cop.copula_log_density(spec, flat)).reshape(u.shape[:-1]).sum(axis=-1)
    w = np.exp(log_c - aux.log_density(u))
    return float(np.mean(w)), float(np.std(w, ddof=1) / math.sqrt(n_draws))
