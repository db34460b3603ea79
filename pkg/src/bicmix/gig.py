"""Generalized inverse Gaussian random variates.

Density (unnormalized) ``x**(p-1) * exp(-(a*x + b/x) / 2)`` for ``x > 0``.
Draws use the rejection schemes of Hoermann & Leydold (2014): ratio of
uniforms with mode shift for large order or concentration, ratio of
uniforms without shift for moderate values, and a dominating
constant/power/exponential hat for small concentration.  All three have
acceptance rates bounded away from zero uniformly in the parameters.

Everything is vectorized: parameters broadcast against each other and
rejection loops only re-draw the still-pending entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

_EPS = np.finfo(float).eps
# below this concentration the hat construction overflows; use the gamma limits
_TINY = 1e-150


class GigParamError(ValueError):
    pass


@dataclass(frozen=True)
class GigParams:
    p_order: float
    a_coef: float
    b_coef: float

    def __post_init__(self):
        check_params(self.p_order, self.a_coef, self.b_coef)


def check_params(p, a, b) -> None:
    p, a, b = np.broadcast_arrays(np.asarray(p, float), np.asarray(a, float), np.asarray(b, float))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise GigParamError("GIG parameters must be finite")
    if np.any(a <= 0):
        raise GigParamError("GIG a_coef must be > 0")
    if np.any(b < 0):
        raise GigParamError("GIG b_coef must be >= 0")
    if np.any((b == 0) & (p <= 0)):
        raise GigParamError("GIG with b_coef = 0 needs p_order > 0")


def gig_log_density(x, p, a, b):
    """Normalized log density, using the modified Bessel function of the second kind."""
    x = np.asarray(x, float)
    p, a, b = float(p), float(a), float(b)
    if b == 0:
        # Gamma(p, rate a/2)
        return p * np.log(a / 2) - special.gammaln(p) + (p - 1) * np.log(x) - a * x / 2
    w = np.sqrt(a * b)
    log_norm = (p / 2) * np.log(a / b) - np.log(2.0) - (np.log(special.kve(p, w)) - w)
    return log_norm + (p - 1) * np.log(x) - (a * x + b / x) / 2


def gig_mean(p, a, b):
    """Analytic mean sqrt(b/a) K_{p+1}(w) / K_p(w)."""
    if b == 0:
        return 2 * p / a
    w = np.sqrt(a * b)
    return np.sqrt(b / a) * special.kve(p + 1, w) / special.kve(p, w)


def _mode(lam, omega):
    # mode of the standardized density y**(lam-1) exp(-omega/2 (y + 1/y))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(
            lam >= 1,
            (np.sqrt((lam - 1) ** 2 + omega**2) + (lam - 1)) / omega,
            omega / (np.sqrt((1 - lam) ** 2 + omega**2) + (1 - lam)),
        )


def _rou_noshift(lam, omega, rng):
    t = 0.5 * (lam - 1)
    s = 0.25 * omega
    xm = _mode(lam, omega)
    nc = t * np.log(xm) - s * (xm + 1 / xm)
    ym = ((lam + 1) + np.sqrt((lam + 1) ** 2 + omega**2)) / omega
    um = np.exp(0.5 * (lam + 1) * np.log(ym) - s * (ym + 1 / ym) - nc)
    out = np.empty_like(lam)
    pending = np.arange(lam.size)
    while pending.size:
        u = um[pending] * rng.random(pending.size)
        v = rng.random(pending.size)
        x = u / v
        with np.errstate(divide="ignore"):
            ok = np.log(v) <= t[pending] * np.log(x) - s[pending] * (x + 1 / x) - nc[pending]
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    return out


def _rou_shift(lam, omega, rng):
    t = 0.5 * (lam - 1)
    s = 0.25 * omega
    xm = _mode(lam, omega)
    nc = t * np.log(xm) - s * (xm + 1 / xm)
    # roots of the cubic locating the bounding rectangle
    a = -(2 * (lam + 1) / omega + xm)
    b = 2 * (lam - 1) * xm / omega - 1
    c = xm
    pp = b - a * a / 3
    qq = 2 * a**3 / 27 - a * b / 3 + c
    fi = np.arccos(np.clip(-qq / (2 * np.sqrt(-(pp**3) / 27)), -1.0, 1.0))
    fak = 2 * np.sqrt(-pp / 3)
    y1 = fak * np.cos(fi / 3) - a / 3
    y2 = fak * np.cos(fi / 3 + 4 / 3 * np.pi) - a / 3
    uplus = (y1 - xm) * np.exp(t * np.log(y1) - s * (y1 + 1 / y1) - nc)
    uminus = (y2 - xm) * np.exp(t * np.log(y2) - s * (y2 + 1 / y2) - nc)
    out = np.empty_like(lam)
    pending = np.arange(lam.size)
    while pending.size:
        um, up = uminus[pending], uplus[pending]
        u = um + rng.random(pending.size) * (up - um)
        v = rng.random(pending.size)
        x = u / v + xm[pending]
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (x > 0) & (np.log(v) <= t[pending] * np.log(x) - s[pending] * (x + 1 / x) - nc[pending])
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    return out


def _expm1_over(lam, d):
    """expm1(lam d) / lam, with the lam -> 0 limit d."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(np.abs(lam * d) < 1e-10, d * (1 + 0.5 * lam * d), np.expm1(lam * d) / lam)


def _log1p_over(lam, c):
    """log1p(lam c) / lam, with the lam -> 0 limit c."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(np.abs(lam * c) < 1e-10, c * (1 - 0.5 * lam * c), np.log1p(lam * c) / lam)


def _concave_hat(lam, omega, rng):
    # 0 <= lam < 1, small omega
    xm = _mode(lam, omega)
    x0 = omega / (1 - lam)
    k0 = np.exp((lam - 1) * np.log(xm) - 0.5 * omega * (xm + 1 / xm))
    A0 = k0 * x0
    far = x0 >= 2 / omega
    k1 = np.where(far, 0.0, np.exp(-omega))
    # A1 = k1 ((2/omega)^lam - x0^lam) / lam, written to stay exact as lam -> 0
    A1 = np.where(far, 0.0, k1 * x0**lam * _expm1_over(lam, np.log(2 / omega) - np.log(x0)))
    k2 = np.where(far, x0 ** (lam - 1), (2 / omega) ** (lam - 1))
    A2 = np.where(far, k2 * 2 * np.exp(-omega * x0 / 2) / omega, k2 * 2 * np.exp(-1.0) / omega)
    Atot = A0 + A1 + A2
    lower = np.maximum(x0, 2 / omega)

    out = np.empty_like(lam)
    pending = np.arange(lam.size)
    while pending.size:
        L, W = lam[pending], omega[pending]
        v = Atot[pending] * rng.random(pending.size)
        a0, a1 = A0[pending], A1[pending]
        x = np.empty(pending.size)
        hx = np.empty(pending.size)
        r0 = v <= a0
        r1 = ~r0 & (v - a0 <= a1)
        r2 = ~r0 & ~r1
        x[r0] = x0[pending][r0] * v[r0] / a0[r0]
        hx[r0] = k0[pending][r0]
        if r1.any():
            vv = v[r1] - a0[r1]
            l1, kk1, x0r = L[r1], k1[pending][r1], x0[pending][r1]
            # invert the power-law hat: x^lam = x0^lam + lam vv / k1
            xr = x0r * np.exp(_log1p_over(l1, vv / (kk1 * x0r**l1)))
            hr = kk1 * xr ** (l1 - 1)
            x[r1], hx[r1] = xr, hr
        if r2.any():
            vv = v[r2] - a0[r2] - a1[r2]
            w2, kk2, lo = W[r2], k2[pending][r2], lower[pending][r2]
            arg = np.exp(-w2 / 2 * lo) - w2 / (2 * kk2) * vv
            with np.errstate(divide="ignore", invalid="ignore"):
                x[r2] = -2 / w2 * np.log(arg)
            hx[r2] = kk2 * np.exp(-w2 / 2 * x[r2])
        u = rng.random(pending.size) * hx
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = np.isfinite(x) & (x > 0) & (np.log(u) <= (L - 1) * np.log(x) - W / 2 * (x + 1 / x))
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    return out


def _standard_gig(lam, omega, rng):
    """Draw from y**(lam-1) exp(-omega/2 (y + 1/y)) for lam >= 0, omega > 0."""
    out = np.empty_like(lam)
    shift = (lam > 2) | (omega > 3)
    noshift = ~shift & ((lam >= 1 - 2.25 * omega**2) | (omega > 0.2))
    hat = ~shift & ~noshift
    if shift.any():
        out[shift] = _rou_shift(lam[shift], omega[shift], rng)
    if noshift.any():
        out[noshift] = _rou_noshift(lam[noshift], omega[noshift], rng)
    if hat.any():
        out[hat] = _concave_hat(lam[hat], omega[hat], rng)
    return out


def sample_gig(p, a, b, rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Draw GIG(p, a, b) variates; parameters broadcast against each other and ``size``.

    ``b == 0`` (with ``p > 0``) is the Gamma(p, rate a/2) limit.  Entries whose
    concentration ``sqrt(a b)`` underflows are drawn from that same limit
    (``p > 0``) or its reciprocal inverse-gamma limit (``p < 0``).
    """
    if isinstance(p, GigParams):
        p, a, b = p.p_order, p.a_coef, p.b_coef
    check_params(p, a, b)
    scalar = size is None and np.ndim(p) == 0 and np.ndim(a) == 0 and np.ndim(b) == 0
    shape = np.broadcast_shapes(np.shape(p), np.shape(a), np.shape(b), () if size is None else np.atleast_1d(size))
    p = np.broadcast_to(np.asarray(p, float), shape).ravel()
    a = np.broadcast_to(np.asarray(a, float), shape).ravel()
    b = np.broadcast_to(np.asarray(b, float), shape).ravel()

    out = np.empty(p.size)
    omega = np.sqrt(a * b)
    degenerate = omega < _TINY
    gam = degenerate & (p > 0)
    invgam = degenerate & (p <= 0)
    if gam.any():
        out[gam] = rng.gamma(p[gam], 2.0 / a[gam])
    if invgam.any():
        # b/x dominates: 1/x ~ Gamma(-p, rate b/2); p == 0 here is improper and is pushed to the floor by callers
        shape_ = np.maximum(-p[invgam], _EPS)
        out[invgam] = 1.0 / rng.gamma(shape_, 2.0 / b[invgam])
    regular = ~degenerate
    if regular.any():
        lam = np.abs(p[regular])
        w = omega[regular]
        y = _standard_gig(lam, w, rng)
        scale = np.sqrt(b[regular] / a[regular])
        out[regular] = np.where(p[regular] < 0, scale / y, scale * y)
    if scalar:
        return float(out[0])
    return out.reshape(shape)
