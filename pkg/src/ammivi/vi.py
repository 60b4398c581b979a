"""Coordinate-ascent variational inference for the Bayesian AMMI model.

All factor updates are closed-form conjugate updates of the mean-field
family: Normal factors for the grand mean, main effects and most bilinear
entries, positive-truncated Normal factors for the singular values and the
first row of the left singular-vector matrix, and a Gamma factor for the
noise precision.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, log_ndtr

from .model import Dataset, Hyperparams, ModelConfig, ThetaPoint
from .statsmath import TruncNormalParams, trunc_normal_moments

_LOG_2PI = np.log(2.0 * np.pi)


class DivergenceError(RuntimeError):
    """Raised when the objective becomes non-finite during fitting."""


@dataclass
class VariationalState:
    """Variational parameters of every mean-field factor.

    Sigma_* fields hold variances of the underlying Normal laws; for the
    truncated factors (lambda, first gamma row) mu/Sigma parameterize the
    parent Normal before truncation to the positive half-line.
    """

    mu_q_mu: float
    Sigma_q_mu: float
    mu_q_g: np.ndarray
    Sigma_q_g: np.ndarray
    mu_q_e: np.ndarray
    Sigma_q_e: np.ndarray
    mu_q_lambda: np.ndarray
    Sigma_q_lambda: np.ndarray
    mu_q_gamma: np.ndarray
    Sigma_q_gamma: np.ndarray
    mu_q_delta: np.ndarray
    Sigma_q_delta: np.ndarray
    a_q: float
    b_q: float

    @property
    def n_components(self) -> int:
        return self.mu_q_lambda.size

    def validate(self):
        for name in ("Sigma_q_mu", "Sigma_q_g", "Sigma_q_e", "Sigma_q_lambda",
                     "Sigma_q_gamma", "Sigma_q_delta", "a_q", "b_q"):
            val = np.asarray(getattr(self, name))
            if not np.all(np.isfinite(val)) or np.any(val <= 0):
                raise ValueError(f"{name} must be finite and strictly positive")

    def mean_changes(self, other: "VariationalState") -> float:
        """Max absolute change of all variational means (convergence metric)."""
        diffs = [abs(self.mu_q_mu - other.mu_q_mu)]
        for name in ("mu_q_g", "mu_q_e", "mu_q_lambda", "mu_q_gamma", "mu_q_delta"):
            a, b = getattr(self, name), getattr(other, name)
            diffs.append(float(np.max(np.abs(a - b))) if a.size else 0.0)
        return max(diffs)

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.mu_q_mu, self.Sigma_q_mu,
            self.mu_q_g.copy(), self.Sigma_q_g.copy(),
            self.mu_q_e.copy(), self.Sigma_q_e.copy(),
            self.mu_q_lambda.copy(), self.Sigma_q_lambda.copy(),
            self.mu_q_gamma.copy(), self.Sigma_q_gamma.copy(),
            self.mu_q_delta.copy(), self.Sigma_q_delta.copy(),
            self.a_q, self.b_q)


@dataclass
class ExpectationCache:
    """First and second moments of every factor, refreshed block by block."""

    tilde_mu: float
    var_mu: float
    tilde_g: np.ndarray
    var_g: np.ndarray
    tilde_e: np.ndarray
    var_e: np.ndarray
    tilde_lambda: np.ndarray
    tilde_lambda_sq: np.ndarray
    tilde_gamma: np.ndarray
    tilde_gamma_sq: np.ndarray
    tilde_delta: np.ndarray
    tilde_delta_sq: np.ndarray
    tilde_tau: float


@dataclass
class FitResult:
    state: VariationalState
    theta: ThetaPoint
    elbo_trace: np.ndarray
    n_iter: int
    converged: bool
    wall_time: float


def _trunc_moments_vec(locs, variances):
    means = np.empty_like(np.atleast_1d(np.asarray(locs, dtype=float)))
    var_out = np.empty_like(means)
    for k, (m, v) in enumerate(zip(np.atleast_1d(locs), np.atleast_1d(variances))):
        means[k], var_out[k] = trunc_normal_moments(TruncNormalParams(float(m), float(v)))
    return means, var_out


def expectations(state: VariationalState) -> ExpectationCache:
    lam_mean, lam_var = _trunc_moments_vec(state.mu_q_lambda, state.Sigma_q_lambda)
    gamma_mean = state.mu_q_gamma.copy()
    gamma_var = state.Sigma_q_gamma.copy()
    if state.n_components:
        gamma_mean[0], gamma_var[0] = _trunc_moments_vec(
            state.mu_q_gamma[0], state.Sigma_q_gamma[0])
    return ExpectationCache(
        tilde_mu=state.mu_q_mu, var_mu=state.Sigma_q_mu,
        tilde_g=state.mu_q_g.copy(), var_g=state.Sigma_q_g.copy(),
        tilde_e=state.mu_q_e.copy(), var_e=state.Sigma_q_e.copy(),
        tilde_lambda=lam_mean, tilde_lambda_sq=lam_var + lam_mean ** 2,
        tilde_gamma=gamma_mean, tilde_gamma_sq=gamma_var + gamma_mean ** 2,
        tilde_delta=state.mu_q_delta.copy(),
        tilde_delta_sq=state.Sigma_q_delta + state.mu_q_delta ** 2,
        tilde_tau=state.a_q / state.b_q)


def point_mass_cache(theta: ThetaPoint) -> ExpectationCache:
    """Cache with every factor degenerate at a parameter point.

    With this cache each coordinate update reduces to the corresponding
    Gibbs full conditional, which is how the two derivations are
    cross-checked.
    """
    return ExpectationCache(
        tilde_mu=float(theta.mu), var_mu=0.0,
        tilde_g=theta.g.copy(), var_g=np.zeros_like(theta.g),
        tilde_e=theta.e.copy(), var_e=np.zeros_like(theta.e),
        tilde_lambda=theta.lam.copy(), tilde_lambda_sq=theta.lam ** 2,
        tilde_gamma=theta.gamma.copy(), tilde_gamma_sq=theta.gamma ** 2,
        tilde_delta=theta.delta.copy(), tilde_delta_sq=theta.delta ** 2,
        tilde_tau=1.0 / theta.sigma2)


def _bilinear_obs(cache: ExpectationCache, rows, cols) -> np.ndarray:
    if cache.tilde_lambda.size == 0:
        return np.zeros(rows.size)
    return (cache.tilde_gamma[rows] * cache.tilde_delta[cols]) @ cache.tilde_lambda


def init_state(theta: ThetaPoint, dataset: Dataset, config: ModelConfig
               ) -> VariationalState:
    """State with means at a parameter point and unit variances.

    Singular values are clipped away from zero and each gamma column is
    sign-flipped (jointly with its delta column) so the first-row
    location is positive, matching the truncated factor's support.
    """
    I, J, Q = dataset.n_genotypes, dataset.n_environments, config.Q
    if theta.g.size != I or theta.e.size != J or theta.n_components != Q:
        raise ValueError("theta dimensions do not match dataset/config")
    lam = np.maximum(theta.lam.astype(float), 1e-6)
    gamma = theta.gamma.astype(float).copy()
    delta = theta.delta.astype(float).copy()
    for q in range(Q):
        if gamma[0, q] < 0:
            gamma[:, q] *= -1.0
            delta[:, q] *= -1.0
        if gamma[0, q] == 0.0:
            gamma[0, q] = 1e-6
    a_q = config.hyper.a + dataset.n_obs / 2.0
    # Initial variances must be small relative to the bilinear entries
    # (~1/sqrt(I)): unit variances dominate the E[gamma^2] E[delta^2]
    # precision sums of the first singular-value update and collapse the
    # interaction to a degenerate optimum on sparse grids.
    v0 = 1e-4
    return VariationalState(
        mu_q_mu=float(theta.mu), Sigma_q_mu=v0,
        mu_q_g=theta.g.astype(float).copy(), Sigma_q_g=np.full(I, v0),
        mu_q_e=theta.e.astype(float).copy(), Sigma_q_e=np.full(J, v0),
        mu_q_lambda=lam, Sigma_q_lambda=np.full(Q, v0),
        mu_q_gamma=gamma, Sigma_q_gamma=np.full((I, Q), v0),
        mu_q_delta=delta, Sigma_q_delta=np.full((J, Q), v0),
        a_q=float(a_q), b_q=float(a_q * theta.sigma2))


def random_theta(dataset: Dataset, Q: int, rng: np.random.Generator) -> ThetaPoint:
    """Naive random starting point (all blocks standard-normal draws)."""
    I, J = dataset.n_genotypes, dataset.n_environments
    return ThetaPoint(
        mu=float(rng.normal(dataset.y.mean(), 1.0)),
        g=rng.standard_normal(I), e=rng.standard_normal(J),
        lam=np.sort(np.abs(rng.standard_normal(Q)))[::-1],
        gamma=rng.standard_normal((I, Q)), delta=rng.standard_normal((J, Q)),
        sigma2=1.0)


def update_mu(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
              cache: ExpectationCache) -> tuple[float, float]:
    resid = (dataset.y - cache.tilde_g[dataset.rows] - cache.tilde_e[dataset.cols]
             - _bilinear_obs(cache, dataset.rows, dataset.cols))
    prec = dataset.n_obs * cache.tilde_tau + 1.0 / hyper.sigma2_mu
    mean = (cache.tilde_tau * resid.sum() + hyper.mu_mu / hyper.sigma2_mu) / prec
    state.mu_q_mu, state.Sigma_q_mu = float(mean), float(1.0 / prec)
    cache.tilde_mu, cache.var_mu = state.mu_q_mu, state.Sigma_q_mu
    return state.mu_q_mu, state.Sigma_q_mu


def update_g(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
             cache: ExpectationCache) -> tuple[np.ndarray, np.ndarray]:
    I = dataset.n_genotypes
    resid = (dataset.y - cache.tilde_mu - cache.tilde_e[dataset.cols]
             - _bilinear_obs(cache, dataset.rows, dataset.cols))
    n_rows = np.bincount(dataset.rows, minlength=I)
    prec = n_rows * cache.tilde_tau + 1.0 / hyper.sigma2_g
    sums = np.bincount(dataset.rows, weights=resid, minlength=I)
    state.mu_q_g = cache.tilde_tau * sums / prec
    state.Sigma_q_g = 1.0 / prec
    cache.tilde_g, cache.var_g = state.mu_q_g.copy(), state.Sigma_q_g.copy()
    return state.mu_q_g, state.Sigma_q_g


def update_e(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
             cache: ExpectationCache) -> tuple[np.ndarray, np.ndarray]:
    J = dataset.n_environments
    resid = (dataset.y - cache.tilde_mu - cache.tilde_g[dataset.rows]
             - _bilinear_obs(cache, dataset.rows, dataset.cols))
    n_cols = np.bincount(dataset.cols, minlength=J)
    prec = n_cols * cache.tilde_tau + 1.0 / hyper.sigma2_e
    sums = np.bincount(dataset.cols, weights=resid, minlength=J)
    state.mu_q_e = cache.tilde_tau * sums / prec
    state.Sigma_q_e = 1.0 / prec
    cache.tilde_e, cache.var_e = state.mu_q_e.copy(), state.Sigma_q_e.copy()
    return state.mu_q_e, state.Sigma_q_e


def _partial_resid(dataset: Dataset, cache: ExpectationCache, q: int) -> np.ndarray:
    """Residual at observed cells with component q left out of the bilinear sum."""
    resid = (dataset.y - cache.tilde_mu - cache.tilde_g[dataset.rows]
             - cache.tilde_e[dataset.cols]
             - _bilinear_obs(cache, dataset.rows, dataset.cols))
    return resid + (cache.tilde_lambda[q] * cache.tilde_gamma[dataset.rows, q]
                    * cache.tilde_delta[dataset.cols, q])


def update_lambda(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
                  cache: ExpectationCache, q: int) -> tuple[float, float]:
    resid = _partial_resid(dataset, cache, q)
    gd_sq = cache.tilde_gamma_sq[dataset.rows, q] * cache.tilde_delta_sq[dataset.cols, q]
    gd = cache.tilde_gamma[dataset.rows, q] * cache.tilde_delta[dataset.cols, q]
    prec = cache.tilde_tau * gd_sq.sum() + 1.0 / hyper.sigma2_lambda
    loc = cache.tilde_tau * (gd @ resid) / prec
    state.mu_q_lambda[q], state.Sigma_q_lambda[q] = loc, 1.0 / prec
    mean, var = trunc_normal_moments(TruncNormalParams(float(loc), float(1.0 / prec)))
    cache.tilde_lambda[q], cache.tilde_lambda_sq[q] = mean, var + mean ** 2
    return float(loc), float(1.0 / prec)


def update_gamma(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
                 cache: ExpectationCache, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Update the q-th left singular-vector column (all rows).

    The first row's factor is a positive-truncated Normal; remaining rows
    are plain Normals with unit prior variance.
    """
    I = dataset.n_genotypes
    resid = _partial_resid(dataset, cache, q)
    d_mean = cache.tilde_delta[dataset.cols, q]
    prec = (cache.tilde_tau * cache.tilde_lambda_sq[q]
            * np.bincount(dataset.rows, weights=cache.tilde_delta_sq[dataset.cols, q],
                          minlength=I) + 1.0)
    loc = (cache.tilde_tau * cache.tilde_lambda[q]
           * np.bincount(dataset.rows, weights=d_mean * resid, minlength=I) / prec)
    state.mu_q_gamma[:, q] = loc
    state.Sigma_q_gamma[:, q] = 1.0 / prec
    cache.tilde_gamma[:, q] = loc
    cache.tilde_gamma_sq[:, q] = loc ** 2 + 1.0 / prec
    mean0, var0 = trunc_normal_moments(TruncNormalParams(float(loc[0]), float(1.0 / prec[0])))
    cache.tilde_gamma[0, q] = mean0
    cache.tilde_gamma_sq[0, q] = var0 + mean0 ** 2
    return loc, 1.0 / prec


def update_delta(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
                 cache: ExpectationCache, q: int) -> tuple[np.ndarray, np.ndarray]:
    J = dataset.n_environments
    resid = _partial_resid(dataset, cache, q)
    g_mean = cache.tilde_gamma[dataset.rows, q]
    prec = (cache.tilde_tau * cache.tilde_lambda_sq[q]
            * np.bincount(dataset.cols, weights=cache.tilde_gamma_sq[dataset.rows, q],
                          minlength=J) + 1.0)
    loc = (cache.tilde_tau * cache.tilde_lambda[q]
           * np.bincount(dataset.cols, weights=g_mean * resid, minlength=J) / prec)
    state.mu_q_delta[:, q] = loc
    state.Sigma_q_delta[:, q] = 1.0 / prec
    cache.tilde_delta[:, q] = loc
    cache.tilde_delta_sq[:, q] = loc ** 2 + 1.0 / prec
    return loc, 1.0 / prec


def expected_sse(cache: ExpectationCache, dataset: Dataset) -> float:
    """E || y - model mean ||^2 over observed cells under the mean field."""
    rows, cols = dataset.rows, dataset.cols
    r = (dataset.y - cache.tilde_mu - cache.tilde_g[rows] - cache.tilde_e[cols]
         - _bilinear_obs(cache, rows, cols))
    total = float(r @ r)
    total += dataset.n_obs * cache.var_mu
    total += float(cache.var_g[rows].sum() + cache.var_e[cols].sum())
    if cache.tilde_lambda.size:
        second = (cache.tilde_gamma_sq[rows] * cache.tilde_delta_sq[cols]) @ cache.tilde_lambda_sq
        first = ((cache.tilde_gamma[rows] * cache.tilde_delta[cols]) ** 2) @ cache.tilde_lambda ** 2
        total += float(np.sum(second - first))
    return total


def update_tau(state: VariationalState, dataset: Dataset, hyper: Hyperparams,
               cache: ExpectationCache) -> tuple[float, float]:
    state.a_q = hyper.a + dataset.n_obs / 2.0
    state.b_q = hyper.b + 0.5 * expected_sse(cache, dataset)
    cache.tilde_tau = state.a_q / state.b_q
    return state.a_q, state.b_q


def _neg_kl_normal(m, v, m0, v0):
    return 0.5 * (np.log(v / v0) - (v + (m - m0) ** 2) / v0 + 1.0)


def _neg_kl_gamma(a_q, b_q, a, b):
    # E_q[log p(tau)] - E_q[log q(tau)] for Gamma(shape, rate) laws
    e_log_tau = digamma(a_q) - np.log(b_q)
    e_tau = a_q / b_q
    e_log_p = a * np.log(b) - gammaln(a) + (a - 1.0) * e_log_tau - b * e_tau
    e_log_q = a_q * np.log(b_q) - gammaln(a_q) + (a_q - 1.0) * e_log_tau - a_q
    return e_log_p - e_log_q


def _neg_kl_trunc(m, v, prior_var):
    """E_q[log p] - E_q[log q] for q = N(m, v) truncated to x > 0 and
    p the positive half of N(0, prior_var)."""
    mean_t, var_t = trunc_normal_moments(TruncNormalParams(float(m), float(v)))
    e_x2 = var_t + mean_t ** 2
    e_dev2 = var_t + (mean_t - m) ** 2
    s = np.sqrt(v)
    log_z = log_ndtr(m / s)
    e_log_p = np.log(2.0) - 0.5 * (_LOG_2PI + np.log(prior_var)) - e_x2 / (2.0 * prior_var)
    e_log_q = -0.5 * (_LOG_2PI + np.log(v)) - log_z - e_dev2 / (2.0 * v)
    return float(e_log_p - e_log_q)


def elbo(state: VariationalState, dataset: Dataset | None, hyper: Hyperparams) -> float:
    """Evidence lower bound E_q[log p(y, theta)] - E_q[log q(theta)]."""
    cache = expectations(state)
    total = 0.0
    if dataset is not None:
        e_log_tau = digamma(state.a_q) - np.log(state.b_q)
        total += 0.5 * dataset.n_obs * (e_log_tau - _LOG_2PI)
        total -= 0.5 * cache.tilde_tau * expected_sse(cache, dataset)
    total += _neg_kl_normal(state.mu_q_mu, state.Sigma_q_mu, hyper.mu_mu, hyper.sigma2_mu)
    total += float(np.sum(_neg_kl_normal(state.mu_q_g, state.Sigma_q_g, 0.0, hyper.sigma2_g)))
    total += float(np.sum(_neg_kl_normal(state.mu_q_e, state.Sigma_q_e, 0.0, hyper.sigma2_e)))
    for q in range(state.n_components):
        total += _neg_kl_trunc(state.mu_q_lambda[q], state.Sigma_q_lambda[q],
                               hyper.sigma2_lambda)
        total += _neg_kl_trunc(state.mu_q_gamma[0, q], state.Sigma_q_gamma[0, q], 1.0)
        total += float(np.sum(_neg_kl_normal(state.mu_q_gamma[1:, q],
                                             state.Sigma_q_gamma[1:, q], 0.0, 1.0)))
        total += float(np.sum(_neg_kl_normal(state.mu_q_delta[:, q],
                                             state.Sigma_q_delta[:, q], 0.0, 1.0)))
    total += _neg_kl_gamma(state.a_q, state.b_q, hyper.a, hyper.b)
    return float(total)


def posterior_mean_theta(state: VariationalState) -> ThetaPoint:
    """Posterior means of every block as a parameter point."""
    cache = expectations(state)
    if state.a_q > 1.0:
        sigma2 = state.b_q / (state.a_q - 1.0)
    else:
        sigma2 = state.b_q / state.a_q
    return ThetaPoint(mu=cache.tilde_mu, g=cache.tilde_g, e=cache.tilde_e,
                      lam=cache.tilde_lambda, gamma=cache.tilde_gamma,
                      delta=cache.tilde_delta, sigma2=float(sigma2))


def post_process(theta: ThetaPoint) -> ThetaPoint:
    """Map a parameter point to its identifiable representative.

    Row/column means of the bilinear matrix are absorbed into the main
    effects and grand mean, the doubly centered remainder is re-expressed
    through its SVD with ordered singular values, and gamma columns are
    sign-fixed positive in their first nonzero entry. Cell means are
    unchanged.
    """
    g, e = theta.g.copy(), theta.e.copy()
    mu = theta.mu
    Q = theta.n_components
    if Q:
        M = (theta.gamma * theta.lam) @ theta.delta.T
        row = M.mean(axis=1)
        col = M.mean(axis=0)
        grand = M.mean()
        mu += grand
        g += row - grand
        e += col - grand
        Mc = M - row[:, None] - col[None, :] + grand
        U, svals, Vt = np.linalg.svd(Mc, full_matrices=False)
        lam = svals[:Q].copy()
        gamma = U[:, :Q].copy()
        delta = Vt[:Q].T.copy()
        for q in range(Q):
            nz = np.nonzero(np.abs(gamma[:, q]) > 1e-12)[0]
            lead = gamma[nz[0], q] if nz.size else 1.0
            if lead < 0:
                gamma[:, q] *= -1.0
                delta[:, q] *= -1.0
    else:
        lam, gamma, delta = theta.lam, theta.gamma, theta.delta
    gm, em = g.mean(), e.mean()
    return ThetaPoint(mu=mu + gm + em, g=g - gm, e=e - em,
                      lam=lam, gamma=gamma, delta=delta, sigma2=theta.sigma2)


def post_process_state(state: VariationalState) -> ThetaPoint:
    return post_process(posterior_mean_theta(state))


def fit(dataset: Dataset, config: ModelConfig, init: ThetaPoint,
        callback=None) -> FitResult:
    """Run CAVI sweeps until the variational means stabilize.

    Sweep order: mu, g, e, then (lambda_q, gamma column q, delta column q)
    for each component, then the noise precision. Stops when the max
    absolute mean change falls below config.tol. `callback`, when given,
    receives (sweep_number, state) after every sweep.
    """
    t0 = time.perf_counter()
    hyper = config.hyper
    state = init_state(init, dataset, config)
    cache = expectations(state)
    trace = [elbo(state, dataset, hyper)]
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        previous = state.copy()
        update_mu(state, dataset, hyper, cache)
        update_g(state, dataset, hyper, cache)
        update_e(state, dataset, hyper, cache)
        for q in range(config.Q):
            update_lambda(state, dataset, hyper, cache, q)
            update_gamma(state, dataset, hyper, cache, q)
            update_delta(state, dataset, hyper, cache, q)
        update_tau(state, dataset, hyper, cache)
        value = elbo(state, dataset, hyper)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite ELBO at sweep {n_iter}")
        trace.append(value)
        if callback is not None:
            callback(n_iter, state)
        if state.mean_changes(previous) < config.tol:
            converged = True
            break
    theta = post_process(posterior_mean_theta(state))
    return FitResult(state=state, theta=theta, elbo_trace=np.array(trace),
                     n_iter=n_iter, converged=converged,
                     wall_time=time.perf_counter() - t0)
