"""Variational EM for the doubly sparse mixture factor model.

Each sweep updates the loading block (rows of Lambda, per-entry scales,
column scales, indicators, global scales, mixture weight), then the factor
block (columns of <X> with their posterior covariances, and the mirrored
scales), then the residual variances.  Updates are the closed-form
maximizers of the expected complete log likelihood; zero numerators that
arise under the horseshoe setting are floored.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .model import (
    FLOOR,
    DataMatrix,
    FactorSide,
    Hyperparameters,
    LoadingSide,
    ModelState,
    NoiseModel,
    SideHypers,
    select_components,
)

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)


class LinearSolveError(RuntimeError):
    """A K x K system in a row/column update was singular or not positive definite."""

    def __init__(self, message, condition=np.inf, index=None, iteration=None):
        super().__init__(message)
        self.condition = condition
        self.index = index
        self.iteration = iteration


class IndicatorError(FloatingPointError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


@dataclass
class FitConfig:
    K_init: int = 50
    max_iterations: int = 5000
    seed: int = 0
    prune_eps: float = 1e-6
    converge_tol: float = 1e-6
    classification_threshold: float = 0.9
    warm_start_iterations: int = 100
    support_eps: float = 1e-6
    rebalance: bool = False

    def __post_init__(self):
        if self.K_init < 1:
            raise ValueError("K_init must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.prune_eps < 0 or self.converge_tol < 0 or self.support_eps < 0:
            raise ValueError("tolerances must be non-negative")
        if not 0.5 < self.classification_threshold <= 1:
            raise ValueError("classification_threshold must lie in (0.5, 1]")
        if self.warm_start_iterations < 0:
            raise ValueError("warm_start_iterations must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationTrace:
    iteration: int
    component_ids: np.ndarray
    n_genes: np.ndarray
    n_samples: np.ndarray
    residual_norm: float
    active: int

    def counts_for(self, component_id: int) -> tuple[int, int] | None:
        hit = np.flatnonzero(self.component_ids == component_id)
        if hit.size == 0:
            return None
        return int(self.n_genes[hit[0]]), int(self.n_samples[hit[0]])


# ---------------------------------------------------------------------------
# scalar / per-entry updates (shared by both sides)


def update_theta(lam, delta, a):
    """Mode of the GIG conditional of a per-entry variance.

    Maximizes ``-0.5 ln t - lam^2 / (2 t) + (a - 1) ln t - delta t``.  For
    ``a < 1.5`` the root is rationalized so that ``delta -> 0`` gives the
    limit ``lam^2 / (3 - 2a)`` without cancellation.
    """
    lam2 = np.square(lam)
    delta = np.asarray(delta, dtype=float)
    k = 2 * a - 3
    root = np.sqrt(k * k + 8 * lam2 * delta)
    if k < 0:
        out = 2 * lam2 / (root - k)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (k + root) / (4 * delta)
    return np.maximum(out, FLOOR)


def update_delta(theta, phi, a, b):
    return np.maximum((a + b - 1) / (np.asarray(theta) + phi), FLOOR)


def update_phi(column_sq_sum, delta_sum, tau, z, length, b, c):
    """Column scale shared by the sparse and dense branches.

    ``column_sq_sum`` is T (sum of squared loadings or of <x^2>),
    ``delta_sum`` the sum of the per-entry rates, ``length`` is p (or n).
    """
    H = length * b * z + c - 1 - 0.5 * length * (1 - z)
    M = 2 * (z * delta_sum + tau)
    T = column_sq_sum
    root = np.sqrt(H * H + M * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(H >= 0, (H + root) / M, T / (root - H))
    out = np.where(np.isfinite(out), out, FLOOR)
    return np.maximum(out, FLOOR)


def update_column_hypers(scales, global_rate, global_top, h: SideHypers):
    """Conjugate MAP updates above the column scales.

    Returns ``(tau, eta, gamma, floored)`` on the loading side (``kappa``,
    ``chi``, ``varphi`` on the factor side); ``floored`` is True when a
    numerator was negative and the value was clamped.
    """
    scales = np.asarray(scales, dtype=float)
    K = scales.size
    n_tau = h.c + h.d - 1
    n_eta = K * h.d + h.e - 1
    n_gam = h.e + h.f - 1
    floored = n_tau < 0 or n_eta < 0 or n_gam < 0
    tau = np.maximum(n_tau / (scales + global_rate), FLOOR)
    eta = max(n_eta / (global_top + tau.sum()), FLOOR)
    gamma = max(n_gam / (eta + h.rate), FLOOR)
    return tau, eta, gamma, floored


def _ln_normal(x, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - np.square(x) / (2 * var)


def _ln_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - special.gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def indicator_log_odds(values, local_var, local_rate, col_scale, ln_pi, ln_one_minus_pi, a, b):
    """L1 - L0 for one component, summed over entries in log space."""
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        l1_terms = (
            _ln_normal(values, local_var)
            + _ln_gamma_pdf(local_var, a, local_rate)
            + _ln_gamma_pdf(local_rate, b, col_scale)
        )
        l0_terms = _ln_normal(values, col_scale)
    bad = ~np.isfinite(l1_terms) | ~np.isfinite(l0_terms)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndicatorError(f"non-finite log density at entry {i}", i)
    return (ln_pi + l1_terms.sum()) - (ln_one_minus_pi + l0_terms.sum())


def expect_z(lam_col, theta_col, delta_col, phi_k, ln_pi, ln_one_minus_pi, a, b) -> float:
    """Posterior probability that loading column k is sparse."""
    d = indicator_log_odds(lam_col, theta_col, delta_col, phi_k, ln_pi, ln_one_minus_pi, a, b)
    return float(special.expit(d))


def expect_o(x_row, sigma_row, rho_row, omega_k, ln_pi_x, ln_one_minus_pi_x, aX, bX) -> float:
    """Posterior probability that factor row k is sparse."""
    d = indicator_log_odds(x_row, sigma_row, rho_row, omega_k, ln_pi_x, ln_one_minus_pi_x, aX, bX)
    return float(special.expit(d))


def expect_ln_pi(z_sum, K, alpha, beta) -> tuple[float, float]:
    """Geometric-mean terms <ln pi>, <ln(1 - pi)> of the Beta posterior on the weight."""
    if not -1e-12 <= z_sum <= K + 1e-12:
        raise ValueError("z_sum must lie in [0, K]")
    total = special.digamma(K + alpha + beta)
    return (
        float(special.digamma(z_sum + alpha) - total),
        float(special.digamma(K - z_sum + beta) - total),
    )


# ---------------------------------------------------------------------------
# block updates


def _solve_spd_stack(A, rhs, what, want_inverse=False):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        conds = np.array([np.linalg.cond(m) for m in A])
        idx = int(np.argmax(conds))
        raise LinearSolveError(
            f"{what} system {idx} is not positive definite (condition {conds[idx]:.3e})",
            condition=float(conds[idx]),
            index=idx,
        ) from None
    Linv = np.linalg.inv(L)
    inv = np.swapaxes(Linv, 1, 2) @ Linv
    sol = (inv @ rhs[..., None])[..., 0]
    if not np.all(np.isfinite(sol)):
        idx = int(np.flatnonzero(~np.isfinite(sol).all(axis=1))[0])
        cond = float(np.linalg.cond(A[idx]))
        raise LinearSolveError(f"{what} system {idx} is singular (condition {cond:.3e})", cond, idx)
    if want_inverse:
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        return sol, inv
    return sol


def update_loadings(Y, x_mean, xx, psi, theta, phi, z):
    """All rows of Lambda at once; ``xx`` is <X X^T> = <X><X>^T + sum_j cov_j."""
    B = (Y @ x_mean.T) / psi[:, None]
    prior = z / theta + (1 - z) / phi  # (p, K)
    A = xx[None, :, :] / psi[:, None, None]
    idx = np.arange(xx.shape[0])
    A = A.copy()
    A[:, idx, idx] += prior
    return _solve_spd_stack(A, B, "loading row")


def update_loading_row(y_row, x_mean, x_cov, psi_i, theta_i, phi, z):
    """MAP of one row of Lambda given the factor posterior statistics."""
    x_mean = np.atleast_2d(np.asarray(x_mean, float))
    x_cov = np.asarray(x_cov, float)
    K = x_mean.shape[0]
    cov_sum = x_cov.reshape(-1, K, K).sum(axis=0) if x_cov.size else np.zeros((K, K))
    xx = x_mean @ x_mean.T + cov_sum
    out = update_loadings(
        np.asarray(y_row, float)[None, :],
        x_mean,
        xx,
        np.array([float(psi_i)]),
        np.asarray(theta_i, float)[None, :],
        np.asarray(phi, float),
        np.asarray(z, float),
    )
    return out[0]


def factor_posterior(Y, lam, psi, sigma, omega, o):
    """Per-column posterior means and covariances of X; returns ``(mean (K, n), cov (n, K, K))``."""
    lt = lam.T / psi[None, :]  # Lambda^T Psi^{-1}
    G = lt @ lam
    rhs = (lt @ Y).T  # (n, K)
    prior = (o[:, None] / sigma + ((1 - o) / omega)[:, None]).T  # (n, K)
    K = lam.shape[1]
    A = np.repeat(G[None, :, :], Y.shape[1], axis=0)
    idx = np.arange(K)
    A[:, idx, idx] += prior
    mean, cov = _solve_spd_stack(A, rhs, "factor column", want_inverse=True)
    return mean.T, cov


def update_factor_column(y_col, lam, psi, sigma_j, omega, o):
    mean, cov = factor_posterior(
        np.asarray(y_col, float)[:, None],
        np.asarray(lam, float),
        np.asarray(psi, float),
        np.asarray(sigma_j, float)[:, None],
        np.asarray(omega, float),
        np.asarray(o, float),
    )
    return mean[:, 0], cov[0]


def x_second_moments(x_mean, x_cov):
    """Elementwise <x_kj^2> = <x_kj>^2 + cov_j[k, k]."""
    return np.square(x_mean) + np.diagonal(x_cov, axis1=1, axis2=2).T


def update_sigma_rho_omega(x2, rho, omega, kappa, o, h: SideHypers):
    """Factor-side mirror of the theta, delta, phi updates.

    ``x2`` holds <x_kj^2>.  Returns ``(sigma, rho, omega)``.
    """
    sigma = update_theta(np.sqrt(x2), rho, h.a)
    rho = update_delta(sigma, omega[:, None], h.a, h.b)
    n = x2.shape[1]
    omega = update_phi(x2.sum(axis=1), rho.sum(axis=1), kappa, o, n, h.b, h.c)
    return sigma, rho, omega


def update_psi(Y, lam, x_mean, xx):
    """Residual variances under a Ga(1, 1) prior on the precisions, computed row-wise."""
    n = Y.shape[1]
    yy = np.einsum("ij,ij->i", Y, Y)
    cross = np.einsum("ik,ik->i", Y @ x_mean.T, lam)
    quad = np.einsum("ik,ik->i", lam @ xx, lam)
    return np.maximum((yy - 2 * cross + quad + 2) / (n + 2), FLOOR)


def prune_components(state: ModelState, prune_eps: float) -> ModelState:
    """Drop components whose loading column or factor row is identically (near) zero."""
    lam_max = np.abs(state.loading.lam).max(axis=0) if state.p else np.zeros(state.K)
    x_max = np.abs(state.factor.x_mean).max(axis=1) if state.n else np.zeros(state.K)
    dead = (lam_max <= prune_eps) | (x_max <= prune_eps)
    if not dead.any():
        return state
    keep = [k for k in range(state.K) if not dead[k]]
    return select_components(state, keep)


def rebalance_components(state: ModelState) -> ModelState:
    """Rescale each (Lambda column, X row) pair to equal Euclidean norms.

    Lambda X is unchanged; every scale variable is moved by the matching
    power of the factor so the state is the exact image under the
    reparameterization.  This removes the drift along the scale direction,
    along which the objective is unbounded.
    """
    ld, fc = state.loading, state.factor
    nl = np.linalg.norm(ld.lam, axis=0)
    nx = np.linalg.norm(fc.x_mean, axis=1)
    c = np.ones(state.K)
    ok = (nl > 0) & (nx > 0)
    c[ok] = np.sqrt(nx[ok] / nl[ok])
    c2 = c * c
    ld.lam = ld.lam * c
    ld.theta = np.maximum(ld.theta * c2, FLOOR)
    ld.delta = np.maximum(ld.delta / c2, FLOOR)
    ld.phi = np.maximum(ld.phi * c2, FLOOR)
    fc.x_mean = fc.x_mean / c[:, None]
    fc.sigma = np.maximum(fc.sigma / c2[:, None], FLOOR)
    fc.rho = np.maximum(fc.rho * c2[:, None], FLOOR)
    fc.omega = np.maximum(fc.omega / c2, FLOOR)
    fc.x_cov = fc.x_cov / np.outer(c, c)[None, :, :]
    return state


def pve(state: ModelState) -> np.ndarray:
    """Per-component share of Tr(Lambda <X X^T> Lambda^T), treating components as disjoint."""
    lam_sq = np.square(state.loading.lam).sum(axis=0)
    x2 = np.square(state.factor.x_mean).sum(axis=1) + np.diagonal(state.factor.x_cov, axis1=1, axis2=2).sum(axis=0)
    num = lam_sq * x2
    total = num.sum()
    if not total > 0:
        raise ValueError("all components are zero; PVE undefined")
    return num / total


# ---------------------------------------------------------------------------
# sweeps


def vem_sweep(state: ModelState, Y: np.ndarray, hyper: Hyperparameters) -> tuple[ModelState, bool]:
    """One pass of the update schedule; mutates and returns ``state``."""
    hl, hx = hyper.loading_side(), hyper.factor_side()
    ld, fc = state.loading, state.factor
    p, n = Y.shape
    K = state.K
    floored = False
    if K == 0:
        state.noise.psi = update_psi(Y, ld.lam, fc.x_mean, np.zeros((0, 0)))
        return state, floored

    # loading block
    xx = fc.x_mean @ fc.x_mean.T + fc.x_cov.sum(axis=0)
    ld.lam = update_loadings(Y, fc.x_mean, xx, state.noise.psi, ld.theta, ld.phi, ld.z)
    ld.theta = update_theta(ld.lam, ld.delta, hl.a)
    ld.delta = update_delta(ld.theta, ld.phi[None, :], hl.a, hl.b)
    lam_sq = np.square(ld.lam).sum(axis=0)
    ld.phi = update_phi(lam_sq, ld.delta.sum(axis=0), ld.tau, ld.z, p, hl.b, hl.c)
    ld.tau, ld.eta, ld.gamma, f1 = update_column_hypers(ld.phi, ld.eta, ld.gamma, hl)
    ld.z = np.array(
        [
            expect_z(ld.lam[:, k], ld.theta[:, k], ld.delta[:, k], ld.phi[k], ld.ln_pi, ld.ln_one_minus_pi, hl.a, hl.b)
            for k in range(K)
        ]
    )
    ld.ln_pi, ld.ln_one_minus_pi = expect_ln_pi(ld.z.sum(), K, hl.alpha, hl.beta)

    # factor block
    fc.x_mean, fc.x_cov = factor_posterior(Y, ld.lam, state.noise.psi, fc.sigma, fc.omega, fc.o)
    x2 = x_second_moments(fc.x_mean, fc.x_cov)
    fc.sigma, fc.rho, fc.omega = update_sigma_rho_omega(x2, fc.rho, fc.omega, fc.kappa, fc.o, hx)
    fc.kappa, fc.chi, fc.varphi_g, f2 = update_column_hypers(fc.omega, fc.chi, fc.varphi_g, hx)
    fc.o = np.array(
        [
            expect_o(fc.x_mean[k], fc.sigma[k], fc.rho[k], fc.omega[k], fc.ln_pi_x, fc.ln_one_minus_pi_x, hx.a, hx.b)
            for k in range(K)
        ]
    )
    fc.ln_pi_x, fc.ln_one_minus_pi_x = expect_ln_pi(fc.o.sum(), K, hx.alpha, hx.beta)

    # residual variances
    xx = fc.x_mean @ fc.x_mean.T + fc.x_cov.sum(axis=0)
    state.noise.psi = update_psi(Y, ld.lam, fc.x_mean, xx)
    return state, floored or f1 or f2


def make_trace(state: ModelState, Y: np.ndarray, iteration: int, eps: float) -> IterationTrace:
    resid = Y - state.loading.lam @ state.factor.x_mean
    return IterationTrace(
        iteration=iteration,
        component_ids=state.component_ids.copy(),
        n_genes=(np.abs(state.loading.lam) > eps).sum(axis=0).astype(np.int64),
        n_samples=(np.abs(state.factor.x_mean) > eps).sum(axis=1).astype(np.int64),
        residual_norm=float(np.linalg.norm(resid)),
        active=state.K,
    )


# ---------------------------------------------------------------------------
# initialization and driver


def initialize_state(p: int, n: int, K: int, hyper: Hyperparameters, rng: np.random.Generator) -> ModelState:
    """Random starting values: scales from Ga(1, 1), Lambda and X from N(0, 1),
    indicators from Bernoulli draws of Beta-distributed weights."""
    eta, gamma, chi, varphi = rng.gamma(1.0, 1.0, size=4)
    pi = rng.beta(hyper.alpha, hyper.beta)
    pi_x = rng.beta(hyper.alphaX, hyper.betaX)
    psi = rng.gamma(1.0, 1.0, size=p)
    z = (rng.random(K) < pi).astype(float)
    o = (rng.random(K) < pi_x).astype(float)
    phi, tau, omega, kappa = rng.gamma(1.0, 1.0, size=(4, K))
    lam = rng.standard_normal((p, K))
    theta, delta = rng.gamma(1.0, 1.0, size=(2, p, K))
    x = rng.standard_normal((K, n))
    sigma, rho = rng.gamma(1.0, 1.0, size=(2, K, n))
    clip = lambda v: np.maximum(v, FLOOR)  # noqa: E731
    loading = LoadingSide(
        lam=lam,
        theta=clip(theta),
        delta=clip(delta),
        phi=clip(phi),
        tau=clip(tau),
        eta=float(max(eta, FLOOR)),
        gamma=float(max(gamma, FLOOR)),
        z=z,
        ln_pi=float(np.log(max(pi, FLOOR))),
        ln_one_minus_pi=float(np.log(max(1 - pi, FLOOR))),
    )
    factor = FactorSide(
        x_mean=x,
        x_cov=np.zeros((n, K, K)),
        sigma=clip(sigma),
        rho=clip(rho),
        omega=clip(omega),
        kappa=clip(kappa),
        chi=float(max(chi, FLOOR)),
        varphi_g=float(max(varphi, FLOOR)),
        o=o,
        ln_pi_x=float(np.log(max(pi_x, FLOOR))),
        ln_one_minus_pi_x=float(np.log(max(1 - pi_x, FLOOR))),
    )
    return ModelState(loading, factor, NoiseModel(clip(psi)))


def refresh_factor_covariance(state: ModelState, Y: np.ndarray) -> ModelState:
    """Set x_cov to the conditional posterior covariance at the current scales, keeping <X>."""
    if state.K:
        _, state.factor.x_cov = factor_posterior(
            Y, state.loading.lam, state.noise.psi, state.factor.sigma, state.factor.omega, state.factor.o
        )
    return state


@dataclass
class Checkpoint:
    """Everything needed to continue a fit bit-exactly."""

    state: ModelState
    iteration: int
    trace: list
    rng_state: dict
    hyper: Hyperparameters
    config: FitConfig
    converged_at: int | None = None


@dataclass
class FitResult:
    state: ModelState
    trace: list
    converged_at: int | None
    rng_state: dict
    hyper: Hyperparameters
    config: FitConfig
    floored_warning: bool = False
    elapsed: float = 0.0
    metadata: dict = field(default_factory=dict)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.state.copy(), len(self.trace), list(self.trace), self.rng_state, self.hyper, self.config, self.converged_at)


def start(data: DataMatrix | np.ndarray, hyper: Hyperparameters, config: FitConfig) -> Checkpoint:
    """Initialize and (optionally) run the MCMC warm start; returns iteration-0 checkpoint."""
    from . import mcmc  # local import: mcmc depends on this module

    Y = data.values if isinstance(data, DataMatrix) else np.asarray(data, float)
    p, n = Y.shape
    rng = np.random.default_rng(config.seed)
    state = initialize_state(p, n, config.K_init, hyper, rng)
    if config.warm_start_iterations:
        state = mcmc.gibbs(state, Y, hyper, config.warm_start_iterations, rng)
    state = refresh_factor_covariance(state, Y)
    return Checkpoint(state, 0, [], rng.bit_generator.state, hyper, config)


def resume(
    data: DataMatrix | np.ndarray,
    checkpoint: Checkpoint,
    stop_at: int | None = None,
    callback: Callable[[Checkpoint], None] | None = None,
    checkpoint_every: int = 0,
) -> FitResult:
    """Run VEM sweeps from ``checkpoint`` up to ``stop_at`` (default: max_iterations)."""
    Y = data.values if isinstance(data, DataMatrix) else np.asarray(data, float)
    config, hyper = checkpoint.config, checkpoint.hyper
    stop = config.max_iterations if stop_at is None else min(stop_at, config.max_iterations)
    state = checkpoint.state.copy()
    trace = list(checkpoint.trace)
    converged_at = checkpoint.converged_at
    floored_any = False
    t0 = time.perf_counter()
    for it in range(checkpoint.iteration + 1, stop + 1):
        try:
            state, floored = vem_sweep(state, Y, hyper)
        except LinearSolveError as exc:
            exc.iteration = it
            raise
        if floored and not floored_any:
            log.warning("negative MAP numerator floored at iteration %d (shape parameters below 0.5?)", it)
        floored_any |= floored
        if config.rebalance:
            state = rebalance_components(state)
        state = prune_components(state, config.prune_eps)
        entry = make_trace(state, Y, it, config.support_eps)
        if trace and converged_at is None:
            prev = trace[-1].residual_norm
            if prev > 0 and abs(entry.residual_norm - prev) / prev < config.converge_tol:
                converged_at = it
        trace.append(entry)
        if callback is not None and checkpoint_every and it % checkpoint_every == 0:
            callback(Checkpoint(state.copy(), it, list(trace), checkpoint.rng_state, hyper, config, converged_at))
    return FitResult(
        state=state,
        trace=trace,
        converged_at=converged_at,
        rng_state=checkpoint.rng_state,
        hyper=hyper,
        config=config,
        floored_warning=floored_any,
        elapsed=time.perf_counter() - t0,
    )


def fit(
    data: DataMatrix | np.ndarray,
    hyper: Hyperparameters | None = None,
    config: FitConfig | None = None,
    **kwargs,
) -> FitResult:
    """Warm start (optional) followed by ``config.max_iterations`` VEM sweeps."""
    hyper = hyper or Hyperparameters()
    config = config or FitConfig()
    if isinstance(data, DataMatrix):
        Y = data.values
    else:
        Y = DataMatrix(np.asarray(data, float)).values
    return resume(Y, start(Y, hyper, config), **kwargs)
