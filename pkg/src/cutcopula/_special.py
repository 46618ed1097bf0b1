"""Special functions shared by the marginal and copula families.

Everything here is usable inside ``jax.jit``. Where SciPy has a faster or more
accurate routine than ``jax.scipy`` (incomplete gamma, Student-t quantile,
Owen's T) the primal value is obtained through ``jax.pure_callback`` and the
derivative rule is supplied explicitly with ``jax.custom_jvp``.
"""

from __future__ import annotations

import functools
import math

import jax
import jax.numpy as jnp
import numpy as np
import scipy.special as sp
import scipy.stats as st
from jax import lax
from jax.scipy.special import gammaln, ndtr

LOG_2PI = math.log(2.0 * math.pi)


def _callback(fn, *args):
    args = jnp.broadcast_arrays(*[jnp.asarray(a, dtype=jnp.float64) for a in args])
    out = jax.ShapeDtypeStruct(args[0].shape, jnp.float64)
    return jax.pure_callback(
        lambda *xs: np.asarray(fn(*xs), dtype=np.float64),
        out,
        *args,
        vmap_method="broadcast_all",
    )


@jax.custom_jvp
def gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    return _callback(sp.gammainc, a, x)


@gammainc.defjvp
def _gammainc_jvp(primals, tangents):
    a, x = jnp.broadcast_arrays(*primals)
    da, dx = tangents
    p = gammainc(a, x)
    xs = jnp.where(x > 0, x, 1.0)
    dp_dx = jnp.where(x > 0, jnp.exp((a - 1.0) * jnp.log(xs) - xs - gammaln(a)), 0.0)
    dp_da = jnp.where(x > 0, lax.igamma_grad_a(a, xs), 0.0)
    return p, dp_da * da + dp_dx * dx


def t_logpdf(x, df):
    return (
        gammaln((df + 1.0) / 2.0)
        - gammaln(df / 2.0)
        - 0.5 * jnp.log(df * jnp.pi)
        - (df + 1.0) / 2.0 * jnp.log1p(x * x / df)
    )


@functools.partial(jax.custom_jvp, nondiff_argnums=(1,))
def t_ppf(u, df: float):
    """Student-t quantile with fixed degrees of freedom."""
    return _callback(lambda p: st.t.ppf(p, df), u)


@t_ppf.defjvp
def _t_ppf_jvp(df, primals, tangents):
    (u,) = primals
    (du,) = tangents
    x = t_ppf(u, df)
    return x, du * jnp.exp(-t_logpdf(x, df))


def _bvn_cdf_np(h, k, rho):
    """Owen (1956) T-function representation of the standard bivariate normal CDF."""
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, float), np.asarray(k, float), np.asarray(rho, float)
    )
    both_zero = (h == 0) & (k == 0)
    # The two-term representation degenerates on the axes; the CDF is Lipschitz,
    # so stepping 1e-12 off the axis is harmless.
    hh = np.where(h == 0, 1e-12, h)
    kk = np.where(k == 0, 1e-12, k)
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a_h = (kk - rho * hh) / (hh * s)
        a_k = (hh - rho * kk) / (kk * s)
        out = (
            0.5 * sp.ndtr(hh)
            + 0.5 * sp.ndtr(kk)
            - sp.owens_t(hh, a_h)
            - sp.owens_t(kk, a_k)
            - np.where(hh * kk < 0, 0.5, 0.0)
        )
    out = np.where(both_zero, 0.25 + np.arcsin(rho) / (2.0 * np.pi), out)
    inf_lo = np.isneginf(h) | np.isneginf(k)
    out = np.where(inf_lo, 0.0, out)
    out = np.where(np.isposinf(h), sp.ndtr(k), out)
    out = np.where(np.isposinf(k), sp.ndtr(h), out)
    out = np.where(np.isposinf(h) & np.isposinf(k), 1.0, out)
    return np.clip(out, 0.0, 1.0)


def bvn_cdf_np(h, k, rho):
    return _bvn_cdf_np(h, k, rho)


@jax.custom_jvp
def bvn_cdf(h, k, rho):
    """Standard bivariate normal CDF P(Z1 <= h, Z2 <= k) with correlation rho."""
    return _callback(_bvn_cdf_np, h, k, rho)


@bvn_cdf.defjvp
def _bvn_cdf_jvp(primals, tangents):
    h, k, rho = jnp.broadcast_arrays(*primals)
    dh, dk, drho = tangents
    p = bvn_cdf(h, k, rho)
    s = jnp.sqrt((1.0 - rho) * (1.0 + rho))
    hf = jnp.where(jnp.isfinite(h), h, 0.0)
    kf = jnp.where(jnp.isfinite(k), k, 0.0)
    phi_h = jnp.where(jnp.isfinite(h), jnp.exp(-0.5 * hf * hf - 0.5 * LOG_2PI), 0.0)
    phi_k = jnp.where(jnp.isfinite(k), jnp.exp(-0.5 * kf * kf - 0.5 * LOG_2PI), 0.0)
    dp_dh = phi_h * ndtr((kf - rho * hf) / s)
    dp_dk = phi_k * ndtr((hf - rho * kf) / s)
    q = (hf * hf - 2.0 * rho * hf * kf + kf * kf) / (s * s)
    dens = jnp.exp(-0.5 * q) / (2.0 * jnp.pi * s)
    dp_drho = jnp.where(jnp.isfinite(h) & jnp.isfinite(k), dens, 0.0)
    return p, dp_dh * dh + dp_dk * dk + dp_drho * drho


def _bvt_cdf_integer(nu: int, dh, dk, r):
    """Genz's closed-form bivariate t CDF for integer degrees of freedom."""
    dh = np.asarray(dh, float)
    dk = np.asarray(dk, float)
    tpi = 2.0 * math.pi
    ors = 1.0 - r * r
    hrk = dh - r * dk
    krh = dk - r * dh
    denom_h = hrk**2 + ors * (nu + dk**2)
    denom_k = krh**2 + ors * (nu + dh**2)
    xnhk = np.where(denom_h > 0, hrk**2 / np.where(denom_h > 0, denom_h, 1.0), 0.0)
    xnkh = np.where(denom_k > 0, krh**2 / np.where(denom_k > 0, denom_k, 1.0), 0.0)
    hs = np.sign(hrk)
    ks = np.sign(krh)
    if nu % 2 == 0:
        bvt = np.full(dh.shape, math.atan2(math.sqrt(ors), -r) / tpi)
        gmph = dh / np.sqrt(16.0 * (nu + dh**2))
        gmpk = dk / np.sqrt(16.0 * (nu + dk**2))
        btnckh = 2.0 * np.arctan2(np.sqrt(xnkh), np.sqrt(1.0 - xnkh)) / math.pi
        btpdkh = 2.0 * np.sqrt(xnkh * (1.0 - xnkh)) / math.pi
        btnchk = 2.0 * np.arctan2(np.sqrt(xnhk), np.sqrt(1.0 - xnhk)) / math.pi
        btpdhk = 2.0 * np.sqrt(xnhk * (1.0 - xnhk)) / math.pi
        for j in range(1, nu // 2 + 1):
            bvt = bvt + gmph * (1.0 + ks * btnckh) + gmpk * (1.0 + hs * btnchk)
            btnckh = btnckh + btpdkh
            btpdkh = 2 * j * btpdkh * (1.0 - xnkh) / (2 * j + 1)
            btnchk = btnchk + btpdhk
            btpdhk = 2 * j * btpdhk * (1.0 - xnhk) / (2 * j + 1)
            gmph = gmph * (2 * j - 1) / (2 * j * (1.0 + dh**2 / nu))
            gmpk = gmpk * (2 * j - 1) / (2 * j * (1.0 + dk**2 / nu))
    else:
        qhrk = np.sqrt(dh**2 + dk**2 - 2.0 * r * dh * dk + nu * ors)
        hkrn = dh * dk + r * nu
        hkn = dh * dk - nu
        hpk = dh + dk
        bvt = (
            np.arctan2(-math.sqrt(nu) * (hkn * qhrk + hpk * hkrn), hkn * hkrn - nu * hpk * qhrk)
            / tpi
        )
        bvt = np.where(bvt < -10 * np.finfo(float).eps, bvt + 1.0, bvt)
        gmph = dh / (tpi * math.sqrt(nu) * (1.0 + dh**2 / nu))
        gmpk = dk / (tpi * math.sqrt(nu) * (1.0 + dk**2 / nu))
        btnckh = np.sqrt(xnkh)
        btpdkh = btnckh.copy()
        btnchk = np.sqrt(xnhk)
        btpdhk = btnchk.copy()
        for j in range(1, (nu - 1) // 2 + 1):
            bvt = bvt + gmph * (1.0 + ks * btnckh) + gmpk * (1.0 + hs * btnchk)
            btpdkh = (2 * j - 1) * btpdkh * (1.0 - xnkh) / (2 * j)
            btnckh = btnckh + btpdkh
            btpdhk = (2 * j - 1) * btpdhk * (1.0 - xnhk) / (2 * j)
            btnchk = btnchk + btpdhk
            gmph = gmph * 2 * j / ((2 * j + 1) * (1.0 + dh**2 / nu))
            gmpk = gmpk * 2 * j / ((2 * j + 1) * (1.0 + dk**2 / nu))
    return bvt


def _t_copula_hfunc(u, v, rho, nu):
    # dC/du for the bivariate t copula.
    x = st.t.ppf(u, nu)
    y = st.t.ppf(v, nu)
    scale = np.sqrt((nu + x * x) * (1.0 - rho * rho) / (nu + 1.0))
    return st.t.cdf((y - rho * x) / scale, nu + 1.0)


def t_copula_cdf_np(u, v, rho: float, nu: float):
    """Bivariate Student-t copula CDF.

    Integer ``nu`` uses Genz's closed form; otherwise the h-function is
    integrated over the first argument.
    """
    from scipy import integrate

    u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
    out = np.zeros(u.shape)
    inside = (u > 0) & (v > 0)
    out = np.where(u >= 1, v, out)
    out = np.where(v >= 1, u, out)
    interior = inside & (u < 1) & (v < 1)
    if not np.any(interior):
        return np.clip(out, 0.0, 1.0)
    ui, vi = u[interior], v[interior]
    if float(nu).is_integer() and nu >= 1:
        vals = _bvt_cdf_integer(int(nu), st.t.ppf(ui, nu), st.t.ppf(vi, nu), rho)
    else:
        vals = np.array(
            [
                integrate.quad(lambda s: _t_copula_hfunc(s, b, rho, nu), 0.0, a, epsabs=1e-13)[0]
                for a, b in zip(ui, vi)
            ]
        )
    out = out.copy()
    out[interior] = vals
    return np.clip(out, 0.0, 1.0)


def _tvn_cdf(upper, corr):
    # Condition on the first coordinate and integrate the bivariate remainder.
    from scipy import integrate

    h1, h2, h3 = upper
    if min(h1, h2, h3) == -np.inf:
        return 0.0
    r12, r13, r23 = corr[0, 1], corr[0, 2], corr[1, 2]
    s2 = math.sqrt(1.0 - r12 * r12)
    s3 = math.sqrt(1.0 - r13 * r13)
    rho = (r23 - r12 * r13) / (s2 * s3)

    def integrand(z):
        return math.exp(-0.5 * z * z - 0.5 * LOG_2PI) * float(
            _bvn_cdf_np((h2 - r12 * z) / s2, (h3 - r13 * z) / s3, rho)
        )

    lower = -np.inf
    val, _ = integrate.quad(integrand, lower, h1, epsabs=1e-14, epsrel=1e-12, limit=200)
    return min(max(val, 0.0), 1.0)


def mvn_cdf_np(upper, corr):
    """Standard multivariate normal CDF for rows of ``upper`` (shape (k, m))."""
    upper = np.atleast_2d(np.asarray(upper, float))
    m = upper.shape[1]
    if m == 2:
        return _bvn_cdf_np(upper[:, 0], upper[:, 1], corr[0, 1])
    if m == 3:
        return np.array([_tvn_cdf(row, corr) for row in upper])
    out = np.empty(upper.shape[0])
    for i, row in enumerate(upper):
        if np.any(np.isneginf(row)):
            out[i] = 0.0
            continue
        finite = np.isfinite(row)
        if not np.all(finite):
            keep = np.nonzero(finite)[0]
            if keep.size == 0:
                out[i] = 1.0
                continue
            sub = corr[np.ix_(keep, keep)]
            out[i] = mvn_cdf_np(row[keep][None, :], sub)[0] if keep.size > 1 else sp.ndtr(row[keep][0])
            continue
        out[i] = st.multivariate_normal.cdf(
            row, mean=np.zeros(m), cov=corr, maxpts=2_000_000 * m, abseps=1e-12, releps=1e-10
        )
    return out
