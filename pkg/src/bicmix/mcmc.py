"""Gibbs sampler for the doubly sparse mixture factor model.

Indicators are hard 0/1 assignments here.  The sweep order is: loading
rows, per-component loading scales, tau and z, the global loading scales
and pi, then the mirrored factor block, then the residual variances.  The
final state is used verbatim as the VEM starting point.

When an indicator is 0 the per-entry scales of that component are left
untouched, so they act as an implicit flat pseudo-prior in the indicator
conditional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .gig import GigParams, sample_gig as _sample_gig_array
from .model import FLOOR, DataMatrix, Hyperparameters, ModelState, SideHypers
from .vem import LinearSolveError, indicator_log_odds, initialize_state

_CEIL = 1e300


@dataclass
class ChainConfig:
    sweeps: int = 100
    seed: int = 0
    thin: int = 1
    record_from: int = 0
    K_init: int = 50
    record: bool = False

    def __post_init__(self):
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.record_from < 0 or (self.sweeps and self.record_from >= self.sweeps):
            raise ValueError("record_from must lie in [0, sweeps)")
        if self.K_init < 1:
            raise ValueError("K_init must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class ChainResult:
    state: ModelState
    samples: list = field(default_factory=list)  # (sweep, ModelState) pairs
    rng_state: dict | None = None


def sample_gig(params: GigParams, rng: np.random.Generator) -> float:
    """One draw from GIG(params)."""
    return float(_sample_gig_array(params.p_order, params.a_coef, params.b_coef, rng))


def _gamma(shape, rate, rng):
    return np.clip(rng.gamma(shape, 1.0 / np.asarray(rate, float)), FLOOR, _CEIL)


def _gig_floored(p, a, b, rng):
    """GIG draws, with the improper (b = 0, p <= 0) entries set to FLOOR."""
    p, a, b = np.broadcast_arrays(np.asarray(p, float), np.asarray(a, float), np.asarray(b, float))
    out = np.full(p.shape, FLOOR)
    ok = (b > 0) | (p > 0)
    if ok.any():
        out[ok] = _sample_gig_array(p[ok], a[ok], b[ok], rng)
    return np.clip(out, FLOOR, _CEIL)


def _mvn_precision_stack(P, rhs, rng, what):
    """Draw from N(P^{-1} rhs, P^{-1}) for a stack of precisions ``P`` (m, K, K)."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        conds = np.array([np.linalg.cond(m) for m in P])
        idx = int(np.argmax(conds))
        raise LinearSolveError(f"{what} precision {idx} is not positive definite", float(conds[idx]), idx) from None
    Linv = np.linalg.inv(L)  # P^{-1} = Linv^T Linv
    LinvT = np.swapaxes(Linv, 1, 2)
    mean = (LinvT @ (Linv @ rhs[..., None]))[..., 0]
    eps = rng.standard_normal(rhs.shape)
    return mean + (LinvT @ eps[..., None])[..., 0]


def sample_loadings(Y, X, psi, V, rng):
    """All rows of Lambda; ``V`` (p, K) holds the prior variances."""
    P = (X @ X.T)[None, :, :] / psi[:, None, None]
    idx = np.arange(X.shape[0])
    P = P.copy()
    P[:, idx, idx] += 1.0 / V
    rhs = (Y @ X.T) / psi[:, None]
    return _mvn_precision_stack(P, rhs, rng, "loading row")


def sample_loading_row(y_row, X, psi_i, V_i, rng) -> np.ndarray:
    """Draw one row of Lambda from its Gaussian conditional.

    The precision is ``X X^T / psi_i + diag(1 / V_i)`` and the mean solves
    ``P m = X y / psi_i``.
    """
    V_i = np.asarray(V_i, float)
    if np.any(V_i <= 0):
        raise ValueError("V_i must be positive")
    X = np.atleast_2d(np.asarray(X, float))
    return sample_loadings(np.asarray(y_row, float)[None, :], X, np.array([float(psi_i)]), V_i[None, :], rng)[0]


# scalar conditionals, vectorized over their arguments (loading-side names;
# the factor side uses the same draws for sigma, rho, omega, kappa, chi, varphi)


def draw_local_var(values, local_rate, a, rng):
    """theta | lambda, delta ~ GIG(a - 1/2, 2 delta, lambda^2)."""
    return _gig_floored(a - 0.5, 2 * np.asarray(local_rate, float), np.square(values), rng)


def draw_local_rate(local_var, col_scale, a, b, rng):
    """delta | theta, phi ~ Ga(a + b, theta + phi)."""
    return _gamma(a + b, np.asarray(local_var, float) + col_scale, rng)


def draw_sparse_col_scale(rate_sum, col_rate, length, b, c, rng):
    """phi | delta, tau ~ Ga(L b + c, sum(delta) + tau) for a sparse column."""
    return _gamma(length * b + c, np.asarray(rate_sum, float) + col_rate, rng)


def draw_dense_col_scale(sq_sum, col_rate, length, c, rng):
    """phi | lambda, tau ~ GIG(c - L/2, 2 tau, sum(lambda^2)) for a dense column."""
    return _gig_floored(c - length / 2, 2 * np.asarray(col_rate, float), sq_sum, rng)


def draw_col_rate(col_scale, glob, c, d, rng):
    """tau | phi, eta ~ Ga(c + d, phi + eta)."""
    return _gamma(c + d, np.asarray(col_scale, float) + glob, rng)


def draw_global(col_rate_sum, top, K, d, e, rng):
    """eta | tau, gamma ~ Ga(K d + e, gamma + sum(tau))."""
    return _gamma(K * d + e, np.asarray(top, float) + col_rate_sum, rng)


def draw_top(glob, rate, e, f, rng):
    """gamma | eta ~ Ga(e + f, eta + nu)."""
    return _gamma(e + f, np.asarray(glob, float) + rate, rng)


def draw_weight(n_sparse, K, alpha, beta, rng):
    """pi | z ~ Beta(alpha + n1, beta + n0)."""
    n_sparse = np.asarray(n_sparse, float)
    return rng.beta(alpha + n_sparse, beta + (K - n_sparse))


def _sample_side_scales(values, local_var, local_rate, col_scale, col_rate, sparse, h: SideHypers, rng, axis):
    """Scales of one side.  ``axis`` is the entry axis (0 for loadings (p, K), 1 for factors (K, n)).

    Sparse components draw the column scale, then the per-entry variances,
    then the per-entry rates; dense components draw only the column scale.
    """
    L = values.shape[axis]
    s = sparse.astype(bool)
    col_scale = col_scale.copy()
    local_var = local_var.copy()
    local_rate = local_rate.copy()
    if s.any():
        col_scale[s] = draw_sparse_col_scale(local_rate.sum(axis=axis)[s], col_rate[s], L, h.b, h.c, rng)
        sl = (slice(None), s) if axis == 0 else (s, slice(None))
        cs = col_scale[s][None, :] if axis == 0 else col_scale[s][:, None]
        local_var[sl] = draw_local_var(values[sl], local_rate[sl], h.a, rng)
        local_rate[sl] = draw_local_rate(local_var[sl], cs, h.a, h.b, rng)
    d = ~s
    if d.any():
        col_scale[d] = draw_dense_col_scale(np.square(values).sum(axis=axis)[d], col_rate[d], L, h.c, rng)
    return local_var, local_rate, col_scale


def sample_loading_hypers(state: ModelState, k: int, hyper: Hyperparameters, rng) -> ModelState:
    """Resample theta[:, k], delta[:, k] and phi[k] given the hard indicator z[k]."""
    ld = state.loading
    sl = slice(k, k + 1)
    th, de, ph = _sample_side_scales(
        ld.lam[:, sl], ld.theta[:, sl], ld.delta[:, sl], ld.phi[sl], ld.tau[sl], ld.z[sl], hyper.loading_side(), rng, 0
    )
    ld.theta[:, sl], ld.delta[:, sl], ld.phi[sl] = th, de, ph
    return state


def _sample_indicator_side(values, local_var, local_rate, col_scale, ln_pi, ln_1m, h: SideHypers, rng, axis):
    K = col_scale.size
    take = (lambda a_, k: a_[:, k]) if axis == 0 else (lambda a_, k: a_[k])
    d = np.array(
        [
            indicator_log_odds(take(values, k), take(local_var, k), take(local_rate, k), col_scale[k], ln_pi, ln_1m, h.a, h.b)
            for k in range(K)
        ]
    )
    ind = (rng.random(K) < special.expit(d)).astype(float)
    return ind, float(draw_weight(ind.sum(), K, h.alpha, h.beta, rng))


def _log_pair(pi):
    pi = float(np.clip(pi, FLOOR, 1 - 1e-16))
    return float(np.log(pi)), float(np.log1p(-pi))


def sample_indicators(state: ModelState, hyper: Hyperparameters, rng):
    """Draw z, pi and o, pi_X; returns ``(z, pi, o, pi_x)`` and writes them into ``state``."""
    ld, fc = state.loading, state.factor
    hl, hx = hyper.loading_side(), hyper.factor_side()
    z, pi = _sample_indicator_side(ld.lam, ld.theta, ld.delta, ld.phi, ld.ln_pi, ld.ln_one_minus_pi, hl, rng, 0)
    o, pi_x = _sample_indicator_side(fc.x_mean, fc.sigma, fc.rho, fc.omega, fc.ln_pi_x, fc.ln_one_minus_pi_x, hx, rng, 1)
    ld.z, fc.o = z, o
    ld.ln_pi, ld.ln_one_minus_pi = _log_pair(pi)
    fc.ln_pi_x, fc.ln_one_minus_pi_x = _log_pair(pi_x)
    return z, pi, o, pi_x


def sample_loading_block(state: ModelState, Y, hyper: Hyperparameters, rng, update_indicators=True) -> ModelState:
    ld, fc = state.loading, state.factor
    hl = hyper.loading_side()
    V = np.where(ld.z[None, :] == 1, ld.theta, ld.phi[None, :])
    ld.lam = sample_loadings(Y, fc.x_mean, state.noise.psi, V, rng)
    ld.theta, ld.delta, ld.phi = _sample_side_scales(ld.lam, ld.theta, ld.delta, ld.phi, ld.tau, ld.z, hl, rng, 0)
    ld.tau = draw_col_rate(ld.phi, ld.eta, hl.c, hl.d, rng)
    if update_indicators:
        ld.z, pi = _sample_indicator_side(ld.lam, ld.theta, ld.delta, ld.phi, ld.ln_pi, ld.ln_one_minus_pi, hl, rng, 0)
    ld.eta = float(draw_global(ld.tau.sum(), ld.gamma, state.K, hl.d, hl.e, rng))
    ld.gamma = float(draw_top(ld.eta, hl.rate, hl.e, hl.f, rng))
    if update_indicators:
        ld.ln_pi, ld.ln_one_minus_pi = _log_pair(pi)
    return state


def sample_factors(Y, lam, psi, W, rng):
    """All columns of X; ``W`` (K, n) holds the prior variances."""
    lt = lam.T / psi[None, :]
    G = lt @ lam
    n = Y.shape[1]
    P = np.repeat(G[None, :, :], n, axis=0)
    idx = np.arange(lam.shape[1])
    P[:, idx, idx] += 1.0 / W.T
    rhs = (lt @ Y).T
    return _mvn_precision_stack(P, rhs, rng, "factor column").T


def sample_factor_block(state: ModelState, Y, hyper: Hyperparameters, rng, update_indicators=True) -> ModelState:
    ld, fc = state.loading, state.factor
    hx = hyper.factor_side()
    W = np.where(fc.o[:, None] == 1, fc.sigma, fc.omega[:, None])
    fc.x_mean = sample_factors(Y, ld.lam, state.noise.psi, W, rng)
    fc.sigma, fc.rho, fc.omega = _sample_side_scales(fc.x_mean, fc.sigma, fc.rho, fc.omega, fc.kappa, fc.o, hx, rng, 1)
    fc.kappa = draw_col_rate(fc.omega, fc.chi, hx.c, hx.d, rng)
    if update_indicators:
        fc.o, pi_x = _sample_indicator_side(fc.x_mean, fc.sigma, fc.rho, fc.omega, fc.ln_pi_x, fc.ln_one_minus_pi_x, hx, rng, 1)
    fc.chi = float(draw_global(fc.kappa.sum(), fc.varphi_g, state.K, hx.d, hx.e, rng))
    fc.varphi_g = float(draw_top(fc.chi, hx.rate, hx.e, hx.f, rng))
    if update_indicators:
        fc.ln_pi_x, fc.ln_one_minus_pi_x = _log_pair(pi_x)
    return state


def sample_psi(Y, lam, X, rng) -> np.ndarray:
    """psi_i ~ InvGamma(n/2 + 1, RSS_i / 2 + 1)."""
    Y = np.asarray(Y, float)
    resid = Y - np.asarray(lam, float) @ np.asarray(X, float)
    shape = Y.shape[1] / 2 + 1
    rate = np.einsum("ij,ij->i", resid, resid) / 2 + 1
    return np.clip(1.0 / rng.gamma(shape, 1.0 / rate), FLOOR, _CEIL)


def gibbs_sweep(state: ModelState, Y, hyper: Hyperparameters, rng, update_indicators=True) -> ModelState:
    state = sample_loading_block(state, Y, hyper, rng, update_indicators)
    state = sample_factor_block(state, Y, hyper, rng, update_indicators)
    state.noise.psi = sample_psi(Y, state.loading.lam, state.factor.x_mean, rng)
    return state


def gibbs(state: ModelState, Y, hyper: Hyperparameters, sweeps: int, rng, samples=None, thin=1, record_from=0):
    """Run ``sweeps`` Gibbs sweeps in place; optionally append thinned copies to ``samples``."""
    state.factor.x_cov = np.zeros_like(state.factor.x_cov)
    for t in range(sweeps):
        state = gibbs_sweep(state, Y, hyper, rng)
        if samples is not None and t >= record_from and (t - record_from) % thin == 0:
            samples.append((t + 1, state.copy()))
    return state


def run_chain(data, hyper: Hyperparameters | None = None, config: ChainConfig | None = None) -> ChainResult:
    """Initialize from the prior-style starting distribution and run the sampler."""
    hyper = hyper or Hyperparameters()
    config = config or ChainConfig()
    Y = data.values if isinstance(data, DataMatrix) else DataMatrix(np.asarray(data, float)).values
    rng = np.random.default_rng(config.seed)
    state = initialize_state(Y.shape[0], Y.shape[1], config.K_init, hyper, rng)
    samples = [] if config.record else None
    state = gibbs(state, Y, hyper, config.sweeps, rng, samples, config.thin, config.record_from)
    return ChainResult(state, samples or [], rng.bit_generator.state)
