"""Mode finding, independence Metropolis-Hastings and nested MCMC for cut posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import jax.numpy as jnp
import numpy as np
import scipy.optimize as opt

from cutcopula import model as _model
from cutcopula.copulas import CopulaFamily
from cutcopula.model import CopulaModel, Dataset, LogTarget

__all__ = [
    "OptimizationError",
    "StuckChainError",
    "SampleSet",
    "LaplaceApprox",
    "MCMCSettings",
    "IFMResult",
    "maximize",
    "fd_hessian",
    "find_mode",
    "mh_independence",
    "nested_mcmc_cut",
    "fit_mcmc",
    "ifm_fit",
]


class OptimizationError(RuntimeError):
    """An optimizer failed; ``trace`` holds its iterate history."""

    def __init__(self, message: str, trace: Sequence[Any] = ()):
        super().__init__(message)
        self.trace = list(trace)


class StuckChainError(RuntimeError):
    """A Metropolis-Hastings chain stopped accepting proposals."""

    def __init__(self, message: str, s: int | None = None):
        super().__init__(message)
        self.s = s


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Posterior draws on the unconstrained scale.

    Parameters
    ----------
    draws : ndarray of shape (S, d)
        Retained draws (burn-in removed).
    names : tuple of str
    acceptance_rate : float
        For nested samplers this is the stage-1 rate; the inner rate is
        stored in ``extra``.
    seed : int or None
    burn_in : int
    """

    draws: np.ndarray
    names: tuple[str, ...]
    acceptance_rate: float
    seed: int | None = None
    burn_in: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.array(self.draws, dtype=float)
        if d.ndim != 2:
            raise ValueError("draws must be 2-D")
        if not np.all(np.isfinite(d)):
            raise ValueError("draws contain non-finite entries")
        if not (0.0 < self.acceptance_rate <= 1.0):
            raise ValueError(f"acceptance rate {self.acceptance_rate} outside (0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


@dataclass(frozen=True, eq=False)
class LaplaceApprox:
    """Gaussian approximation at a mode: ``N(mode, covariance)``."""

    mode: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mode = np.atleast_1d(np.asarray(self.mode, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mode.size, mode.size):
            raise ValueError("covariance shape does not match the mode")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    @property
    def dim(self) -> int:
        return self.mode.size

    def scaled(self, factor: float) -> "LaplaceApprox":
        """Same centre with standard deviations multiplied by ``factor``."""
        return LaplaceApprox(self.mode, self.covariance * factor**2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mode + rng.standard_normal((n, self.dim)) @ self.chol.T

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.linalg.solve(self.chol, (x - self.mode).T)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return -0.5 * (self.dim * math.log(2 * math.pi) + logdet + np.sum(z * z, axis=0))


def _as_target(target) -> LogTarget:
    if isinstance(target, LogTarget):
        return target
    raise TypeError("target must be a LogTarget; wrap plain functions with LogTarget.from_callable")


def fd_hessian(target: LogTarget, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central finite differences of the exact gradient, step ``rel_step * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        h = rel_step * (1.0 + abs(x[i]))
        e = np.zeros(d)
        e[i] = h
        H[:, i] = (target.grad(x + e) - target.grad(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def maximize(
    target: LogTarget,
    init,
    gtol: float = 1e-6,
    max_iter: int = 2000,
    gain_tol: float = 1e-8,
):
    """Maximize ``target``; returns ``(x, value, grad, trace)``.

    BFGS does the bulk of the work; Newton steps on the finite-difference
    Hessian then drive the gradient norm below ``gtol``. On very flat ridges
    the gradient can bottom out at its rounding floor above ``gtol``; such a
    point is accepted when Newton stalls and the predicted gain
    ``g^T (-H)^{-1} g / 2`` is below ``gain_tol``.

    Raises
    ------
    OptimizationError
        If the target is not finite at ``init`` or neither stopping rule is met.
    """
    target = _as_target(target)
    x0 = np.asarray(init, dtype=float)
    trace: list[tuple[float, float]] = []
    v0, g0 = target.value_and_grad(x0)
    if not (np.isfinite(v0) and np.all(np.isfinite(g0))):
        raise OptimizationError(f"target is not finite at the initial point (value {v0})")

    def fun(x):
        v, g = target.value_and_grad(x)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        trace.append((v, float(np.linalg.norm(g))))
        return -v, -g

    res = opt.minimize(fun, x0, jac=True, method="BFGS", options={"gtol": gtol * 0.1, "maxiter": max_iter})
    x = res.x
    v, g = target.value_and_grad(x)
    if not np.isfinite(v):
        x, v, g = x0, v0, g0
    gain = np.inf
    for _ in range(25):
        if np.linalg.norm(g) <= gtol:
            break
        H = fd_hessian(target, x)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        gain = 0.5 * float(g @ step)
        # backtrack on the gradient norm, which is what we are driving down
        t = 1.0
        for _ in range(30):
            xn = x + t * step
            vn, gn = target.value_and_grad(xn)
            if np.isfinite(vn) and np.linalg.norm(gn) < np.linalg.norm(g):
                break
            t *= 0.5
        else:
            break
        x, v, g = xn, vn, gn
        trace.append((v, float(np.linalg.norm(g))))
    gnorm = float(np.linalg.norm(g))
    if gnorm <= gtol:
        return x, v, g, trace
    H = fd_hessian(target, x)
    try:
        gain = 0.5 * float(g @ -np.linalg.solve(H, g))
    except np.linalg.LinAlgError:
        pass
    if 0.0 <= gain <= gain_tol:
        return x, v, g, trace
    raise OptimizationError(
        f"gradient norm {gnorm:.3e} above tolerance {gtol:.1e} (predicted gain {gain:.1e}) "
        f"after {len(trace)} evaluations",
        trace,
    )


def find_mode(target: LogTarget, init, gtol: float = 1e-6, max_iter: int = 2000) -> LaplaceApprox:
    """Posterior mode with the negative inverse Hessian as covariance.

    The Hessian is a central difference of the exact gradient with step
    ``1e-4 * (1 + |x_i|)``. ``1e-8 * I`` is added (and grown tenfold) until
    the negative Hessian is positive definite.
    """
    x, _, _, trace = maximize(target, init, gtol=gtol, max_iter=max_iter)
    neg_h = -fd_hessian(target, x)
    jitter = 0.0
    for k in range(12):
        try:
            chol = np.linalg.cholesky(neg_h + jitter * np.eye(x.size))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-8 * 10.0**k
    else:
        raise OptimizationError("negative Hessian at the mode is not positive definite", trace)
    inv_chol = np.linalg.inv(chol)
    return LaplaceApprox(x, inv_chol.T @ inv_chol)


def mh_independence(
    target: LogTarget,
    proposal: LaplaceApprox,
    n_draws: int,
    burn_in: int,
    rng: np.random.Generator,
    init=None,
    stuck_window: int = 1000,
    seed: int | None = None,
) -> SampleSet:
    """Independence Metropolis-Hastings with a Gaussian proposal.

    All proposals are drawn and evaluated up front (one vectorized pass); the
    accept/reject sweep then runs over cached values.

    Raises
    ------
    StuckChainError
        If no proposal is accepted within ``stuck_window`` consecutive steps.
    """
    target = _as_target(target)
    total = int(burn_in) + int(n_draws)
    if n_draws < 1 or burn_in < 0:
        raise ValueError("n_draws must be >= 1 and burn_in >= 0")
    props = proposal.sample(rng, total)
    log_u = np.log(rng.random(total))
    lp = target.batch(props)
    lq = proposal.logpdf(props)
    x = proposal.mode.copy() if init is None else np.asarray(init, dtype=float)
    lp_x = target(x)
    lq_x = float(proposal.logpdf(x)[0])
    if not np.isfinite(lp_x):
        raise StuckChainError("target is not finite at the chain's starting point")
    out = np.empty((int(n_draws), x.size))
    accepted = 0
    since = 0
    w_x = lp_x - lq_x
    for t in range(total):
        w_y = lp[t] - lq[t]
        if log_u[t] < w_y - w_x:
            x = props[t]
            w_x = w_y
            since = 0
            if t >= burn_in:
                accepted += 1
        else:
            since += 1
            if since >= stuck_window:
                raise StuckChainError(f"no acceptance in {stuck_window} consecutive steps (step {t})")
        if t >= burn_in:
            out[t - burn_in] = x
    rate = accepted / n_draws
    if accepted == 0:
        raise StuckChainError("no proposal accepted after burn-in")
    return SampleSet(out, target.names, rate, seed, int(burn_in))


def nested_mcmc_cut(
    stage1_target: LogTarget,
    stage2_target: LogTarget,
    n_draws: int,
    burn_in: int,
    inner_burn_in: int,
    rng: np.random.Generator,
    stage1_init,
    stage2_init,
    proposal_scale: float = 1.2,
    stuck_window: int = 1000,
    seed: int | None = None,
) -> SampleSet:
    """Nested MCMC for a cut posterior.

    Stage 1 runs an independence sampler on ``p_cut(eta1 | D)``. For every
    retained ``eta1^(s)`` an inner chain of ``inner_burn_in`` steps targets
    ``p(eta2 | eta1^(s), D)`` and only its final state is kept.

    Parameters
    ----------
    stage1_target : LogTarget
        Target over ``eta1``.
    stage2_target : LogTarget
        Conditional target over ``eta2`` whose first dynamic argument is
        ``eta1``; it is rebound for every outer draw.
    stage1_init, stage2_init : array-like
        Optimizer starting points.
    proposal_scale : float, default=1.2
        The inner proposal is the Laplace approximation of the conditional at
        the stage-1 posterior mean, with standard deviations times this factor.
    stuck_window : int, default=1000
        Raise if this many consecutive outer draws see no inner acceptance.

    Returns
    -------
    SampleSet
        Columns ordered ``(eta1, eta2)``. Inner chains are warm-started at the
        previous outer iterate's ``eta2``.
    """
    lap1 = find_mode(stage1_target, stage1_init)
    s1 = mh_independence(stage1_target, lap1, n_draws, burn_in, rng, stuck_window=stuck_window)
    eta1 = s1.draws
    centre = eta1.mean(axis=0)
    cond = stage2_target.bind(centre, *stage2_target.args[1:])
    lap2 = find_mode(cond, stage2_init).scaled(proposal_scale)

    K = int(inner_burn_in)
    if K < 1:
        raise ValueError("inner_burn_in must be >= 1")
    d2 = lap2.dim
    out = np.empty((eta1.shape[0], d2))
    state = lap2.mode.copy()
    lq_state = float(lap2.logpdf(state)[0])
    accepted = 0
    since = 0
    for s in range(eta1.shape[0]):
        props = lap2.sample(rng, K)
        log_u = np.log(rng.random(K))
        pts = np.vstack([state[None, :], props])
        # eta1 enters unbatched, so terms depending only on it (PITs) are computed once
        lp = stage2_target.bind(eta1[s], *stage2_target.args[1:]).batch(pts)
        lq = lap2.logpdf(props)
        w_x = lp[0] - lq_state
        if not np.isfinite(w_x):
            w_x = -np.inf
        moved = False
        for k in range(K):
            w_y = lp[k + 1] - lq[k]
            if log_u[k] < w_y - w_x:
                state = props[k]
                lq_state = lq[k]
                w_x = w_y
                accepted += 1
                moved = True
        # the window counts retained draws, as for the outer sampler
        since = 0 if moved else since + 1
        if since >= stuck_window or not np.isfinite(w_x):
            raise StuckChainError(f"inner chain stuck at outer draw s={s}", s=s)
        out[s] = state
    draws = np.hstack([eta1, out])
    names = stage1_target.names + stage2_target.names
    extra = {
        "inner_acceptance_rate": accepted / (K * eta1.shape[0]),
        "stage1_mode": lap1.mode,
        "stage2_proposal_mode": lap2.mode,
    }
    return SampleSet(draws, names, s1.acceptance_rate, seed, int(burn_in), extra)


@dataclass(frozen=True)
class MCMCSettings:
    """Sampler settings; ``inner_burn_in=None`` picks 100 (type 1) or 1000 (type 2)."""

    n_draws: int = 15000
    burn_in: int = 5000
    inner_burn_in: int | None = None
    proposal_scale: float = 1.2
    stuck_window: int = 1000

    def inner_for(self, cut: str) -> int:
        if self.inner_burn_in is not None:
            return int(self.inner_burn_in)
        return 100 if cut == "type1" else 1000


def fit_mcmc(
    model: CopulaModel,
    data: Dataset,
    cut: str | None,
    settings: MCMCSettings | None = None,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    init=None,
) -> SampleSet:
    """Uncut, type-1 cut or type-2 cut posterior draws in the model's packing order.

    Parameters
    ----------
    cut : {None, "type1", "type2"}
    init : array-like, optional
        Packed unconstrained starting point; defaults to moment matching.
    """
    settings = settings or MCMCSettings()
    rng = rng if rng is not None else np.random.default_rng(seed)
    z0 = _model.initial_point(model, data) if init is None else np.asarray(init, dtype=float)
    nt = model.n_theta
    if cut is None:
        target = _model.joint_target(model, data)
        lap = find_mode(target, z0)
        return mh_independence(
            target, lap, settings.n_draws, settings.burn_in, rng,
            stuck_window=settings.stuck_window, seed=seed,
        )
    if model.n_psi == 0:
        raise ValueError("cutting needs a copula with free parameters")
    if cut == "type1":
        s1 = _model.cut1_stage1_target(model, data)
        s2 = _model.cut1_stage2_target(model, data, z0[:nt])
        res = nested_mcmc_cut(
            s1, s2, settings.n_draws, settings.burn_in, settings.inner_for(cut), rng,
            z0[:nt], z0[nt:], settings.proposal_scale, settings.stuck_window, seed,
        )
        return res
    if cut == "type2":
        s1 = _model.cut2_stage1_target(model, data.ranks())
        s2 = _model.cut2_stage2_target(model, data, z0[nt:])
        res = nested_mcmc_cut(
            s1, s2, settings.n_draws, settings.burn_in, settings.inner_for(cut), rng,
            z0[nt:], z0[:nt], settings.proposal_scale, settings.stuck_window, seed,
        )
        np_ = model.n_psi
        draws = np.hstack([res.draws[:, np_:], res.draws[:, :np_]])
        return SampleSet(draws, model.param_names, res.acceptance_rate, seed, res.burn_in, res.extra)
    raise ValueError(f"unknown cut {cut!r}; expected None, 'type1' or 'type2'")


@dataclass(frozen=True, eq=False)
class IFMResult:
    """Two-stage maximum likelihood estimate (unconstrained and constrained)."""

    theta_z: np.ndarray
    psi_z: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.theta_z, self.psi_z])

    @property
    def constrained(self) -> np.ndarray:
        return np.concatenate([self.theta, self.psi])


def ifm_fit(model: CopulaModel, data: Dataset, gtol: float = 1e-6, init=None) -> IFMResult:
    """Inference-for-margins: margin MLEs, then the copula MLE at those margins.

    The marginal log-likelihood is separable, so maximizing it jointly gives
    the per-margin maximizers. Without free copula parameters the second
    stage is skipped and tau is reported as 0.
    """
    z0 = _model.initial_point(model, data) if init is None else np.asarray(init, dtype=float)
    nt = model.n_theta
    y = np.asarray(data.values)
    g1 = LogTarget(_model.core_g1, model, (jnp.asarray(y),), nt, model.theta_names)
    theta_z, *_ = maximize(g1, z0[:nt], gtol=gtol)
    theta = model.to_constrained(theta_z, part="theta")
    if model.n_psi == 0:
        tau = np.zeros(1) if model.copula is CopulaFamily.INDEPENDENCE else np.zeros(0)
        return IFMResult(theta_z, np.zeros(0), theta, tau)
    cop = _model.ifm_copula_target(model, data, theta_z)
    psi_z, *_ = maximize(cop, z0[nt:], gtol=gtol)
    return IFMResult(theta_z, psi_z, theta, model.to_constrained(psi_z, part="psi"))
