"""Systematic-scan Gibbs sampler targeting the exact AMMI posterior.

Serves as the MCMC comparator for the variational fitter and as the
correctness oracle for its one-step updates. The conditional formulas
here are written out independently of the VI module on purpose: tests
cross-check the two derivations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .freqfit import frequentist_fit
from .model import Dataset, Hyperparams, ModelConfig, ThetaPoint
from .statsmath import ChainSet, TruncNormalParams, gelman_rubin, sample_trunc_normal
from .vi import post_process

BLOCKS = ("mu", "g", "e", "lambda", "gamma", "delta", "tau")


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-processed posterior draws, indexed (chain, iteration, ...)."""

    mu: np.ndarray
    g: np.ndarray
    e: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    sigma2: np.ndarray
    n_burn: int
    wall_time: float = 0.0

    @property
    def n_chains(self) -> int:
        return self.mu.shape[0]

    @property
    def n_iter(self) -> int:
        return self.mu.shape[1]

    @property
    def n_components(self) -> int:
        return self.lam.shape[2]

    def kept(self, name: str) -> np.ndarray:
        """Post-burn-in draws of one block, chain axis preserved."""
        return getattr(self, name)[:, self.n_burn:]

    def flat(self, name: str) -> np.ndarray:
        """Post-burn-in draws of one block, chains concatenated."""
        arr = self.kept(name)
        return arr.reshape(-1, *arr.shape[2:])


def _resid(theta: ThetaPoint, dataset: Dataset, *, drop_mu=False, drop_g=False,
           drop_e=False, drop_component: int | None = None) -> np.ndarray:
    rows, cols = dataset.rows, dataset.cols
    out = dataset.y.copy()
    if not drop_mu:
        out -= theta.mu
    if not drop_g:
        out -= theta.g[rows]
    if not drop_e:
        out -= theta.e[cols]
    for q in range(theta.n_components):
        if q != drop_component:
            out -= theta.lam[q] * theta.gamma[rows, q] * theta.delta[cols, q]
    return out


def _cond_mu(theta, dataset, hyper):
    tau = 1.0 / theta.sigma2
    prec = dataset.n_obs * tau + 1.0 / hyper.sigma2_mu
    r = _resid(theta, dataset, drop_mu=True)
    mean = (tau * r.sum() + hyper.mu_mu / hyper.sigma2_mu) / prec
    return mean, 1.0 / prec


def _cond_g(theta, dataset, hyper):
    tau = 1.0 / theta.sigma2
    I = dataset.n_genotypes
    prec = np.bincount(dataset.rows, minlength=I) * tau + 1.0 / hyper.sigma2_g
    r = _resid(theta, dataset, drop_g=True)
    means = tau * np.bincount(dataset.rows, weights=r, minlength=I) / prec
    return means, 1.0 / prec


def _cond_e(theta, dataset, hyper):
    tau = 1.0 / theta.sigma2
    J = dataset.n_environments
    prec = np.bincount(dataset.cols, minlength=J) * tau + 1.0 / hyper.sigma2_e
    r = _resid(theta, dataset, drop_e=True)
    means = tau * np.bincount(dataset.cols, weights=r, minlength=J) / prec
    return means, 1.0 / prec


def _cond_lambda(theta, dataset, hyper, q):
    tau = 1.0 / theta.sigma2
    gd = theta.gamma[dataset.rows, q] * theta.delta[dataset.cols, q]
    prec = tau * float(gd @ gd) + 1.0 / hyper.sigma2_lambda
    r = _resid(theta, dataset, drop_component=q)
    loc = tau * float(gd @ r) / prec
    return loc, 1.0 / prec


def _cond_gamma(theta, dataset, hyper, q):
    tau = 1.0 / theta.sigma2
    I = dataset.n_genotypes
    d = theta.delta[dataset.cols, q]
    prec = tau * theta.lam[q] ** 2 * np.bincount(
        dataset.rows, weights=d * d, minlength=I) + 1.0
    r = _resid(theta, dataset, drop_component=q)
    locs = tau * theta.lam[q] * np.bincount(dataset.rows, weights=d * r, minlength=I) / prec
    return locs, 1.0 / prec


def _cond_delta(theta, dataset, hyper, q):
    tau = 1.0 / theta.sigma2
    J = dataset.n_environments
    gcol = theta.gamma[dataset.rows, q]
    prec = tau * theta.lam[q] ** 2 * np.bincount(
        dataset.cols, weights=gcol * gcol, minlength=J) + 1.0
    r = _resid(theta, dataset, drop_component=q)
    locs = tau * theta.lam[q] * np.bincount(dataset.cols, weights=gcol * r, minlength=J) / prec
    return locs, 1.0 / prec


def _cond_tau(theta, dataset, hyper):
    r = _resid(theta, dataset)
    return hyper.a + dataset.n_obs / 2.0, hyper.b + 0.5 * float(r @ r)


def full_conditional(block: str, theta: ThetaPoint, dataset: Dataset,
                     hyper: Hyperparams, q: int = 0):
    """Exact full-conditional parameters of one named block.

    Returns (mean, variance) for mu; (means, variances) for g/e and the
    gamma/delta columns; (location, variance) of the positive-truncated
    Normal for lambda; (shape, rate) for tau.
    """
    if block == "mu":
        return _cond_mu(theta, dataset, hyper)
    if block == "g":
        return _cond_g(theta, dataset, hyper)
    if block == "e":
        return _cond_e(theta, dataset, hyper)
    if block == "lambda":
        return _cond_lambda(theta, dataset, hyper, q)
    if block == "gamma":
        return _cond_gamma(theta, dataset, hyper, q)
    if block == "delta":
        return _cond_delta(theta, dataset, hyper, q)
    if block == "tau":
        return _cond_tau(theta, dataset, hyper)
    raise ValueError(f"unknown block {block!r}")


def _jittered_init(base: ThetaPoint, rng: np.random.Generator) -> ThetaPoint:
    Q = base.n_components
    return ThetaPoint(
        mu=base.mu + rng.normal(0.0, 0.1),
        g=base.g + rng.normal(0.0, 0.1, base.g.shape),
        e=base.e + rng.normal(0.0, 0.1, base.e.shape),
        lam=np.maximum(base.lam + rng.normal(0.0, 0.1, Q), 1e-6),
        gamma=base.gamma + rng.normal(0.0, 0.1, base.gamma.shape),
        delta=base.delta + rng.normal(0.0, 0.1, base.delta.shape),
        sigma2=float(abs(base.sigma2 + rng.normal(0.0, 0.1))) or 1e-6)


def gibbs_fit(dataset: Dataset, config: ModelConfig, n_chains: int = 4,
              n_iter: int = 6000, n_burn: int = 1000,
              init: ThetaPoint | None = None) -> PosteriorDraws:
    """Run the Gibbs sampler and return draw-wise post-processed draws.

    Chains start at the frequentist fit perturbed by chain-seeded
    Normal(0, 0.1^2) jitter and run sequentially with independent RNG
    streams derived from config.seed.
    """
    t0 = time.perf_counter()
    I, J, Q = dataset.n_genotypes, dataset.n_environments, config.Q
    hyper = config.hyper
    base = init if init is not None else frequentist_fit(dataset, Q)

    mu_d = np.empty((n_chains, n_iter))
    g_d = np.empty((n_chains, n_iter, I))
    e_d = np.empty((n_chains, n_iter, J))
    lam_d = np.empty((n_chains, n_iter, Q))
    gamma_d = np.empty((n_chains, n_iter, I, Q))
    delta_d = np.empty((n_chains, n_iter, J, Q))
    sig_d = np.empty((n_chains, n_iter))

    for c in range(n_chains):
        rng = np.random.default_rng([config.seed, c])
        theta = _jittered_init(base, rng)
        mu, g, e = theta.mu, theta.g.copy(), theta.e.copy()
        lam = theta.lam.copy()
        gamma, delta = theta.gamma.copy(), theta.delta.copy()
        sigma2 = theta.sigma2
        for t in range(n_iter):
            theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                               delta=delta, sigma2=sigma2)
            m, v = _cond_mu(theta, dataset, hyper)
            mu = rng.normal(m, np.sqrt(v))

            theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                               delta=delta, sigma2=sigma2)
            means, variances = _cond_g(theta, dataset, hyper)
            g = means + np.sqrt(variances) * rng.standard_normal(I)

            theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                               delta=delta, sigma2=sigma2)
            means, variances = _cond_e(theta, dataset, hyper)
            e = means + np.sqrt(variances) * rng.standard_normal(J)

            for q in range(Q):
                theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                                   delta=delta, sigma2=sigma2)
                loc, var = _cond_lambda(theta, dataset, hyper, q)
                lam = lam.copy()
                lam[q] = sample_trunc_normal(rng, TruncNormalParams(loc, var))

                theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                                   delta=delta, sigma2=sigma2)
                locs, variances = _cond_gamma(theta, dataset, hyper, q)
                gamma = gamma.copy()
                gamma[0, q] = sample_trunc_normal(
                    rng, TruncNormalParams(float(locs[0]), float(variances[0])))
                gamma[1:, q] = locs[1:] + np.sqrt(variances[1:]) * rng.standard_normal(I - 1)

                theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                                   delta=delta, sigma2=sigma2)
                locs, variances = _cond_delta(theta, dataset, hyper, q)
                delta = delta.copy()
                delta[:, q] = locs + np.sqrt(variances) * rng.standard_normal(J)

            theta = ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                               delta=delta, sigma2=sigma2)
            shape, rate = _cond_tau(theta, dataset, hyper)
            sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)

            # identifiable representative for reporting; the chain itself
            # keeps running on the unconstrained values
            rep = post_process(ThetaPoint(mu=mu, g=g, e=e, lam=lam, gamma=gamma,
                                          delta=delta, sigma2=sigma2))
            mu_d[c, t] = rep.mu
            g_d[c, t] = rep.g
            e_d[c, t] = rep.e
            lam_d[c, t] = rep.lam
            gamma_d[c, t] = rep.gamma
            delta_d[c, t] = rep.delta
            sig_d[c, t] = rep.sigma2

    return PosteriorDraws(mu=mu_d, g=g_d, e=e_d, lam=lam_d, gamma=gamma_d,
                          delta=delta_d, sigma2=sig_d, n_burn=n_burn,
                          wall_time=time.perf_counter() - t0)


def rhat_table(draws: PosteriorDraws) -> dict[str, np.ndarray]:
    """Split-chain R-hat per scalar parameter, on post-burn-in draws."""
    out: dict[str, np.ndarray] = {
        "mu": np.array(gelman_rubin(ChainSet(draws.kept("mu")))),
        "sigma2": np.array(gelman_rubin(ChainSet(draws.kept("sigma2")))),
    }
    for name in ("g", "e", "lam"):
        arr = draws.kept(name)
        out[name] = np.array([gelman_rubin(ChainSet(arr[:, :, k]))
                              for k in range(arr.shape[2])])
    return out


def posterior_mean_theta(draws: PosteriorDraws) -> ThetaPoint:
    return ThetaPoint(
        mu=float(draws.flat("mu").mean()),
        g=draws.flat("g").mean(axis=0),
        e=draws.flat("e").mean(axis=0),
        lam=draws.flat("lam").mean(axis=0),
        gamma=draws.flat("gamma").mean(axis=0),
        delta=draws.flat("delta").mean(axis=0),
        sigma2=float(draws.flat("sigma2").mean()))


def summarize(draws: PosteriorDraws) -> dict[str, dict[str, np.ndarray]]:
    """Per-parameter mean and 5/50/95% quantiles of post-burn-in draws."""
    if draws.n_iter <= draws.n_burn:
        raise ValueError("no post-burn-in draws to summarize")
    out = {}
    for name in ("mu", "g", "e", "lam", "gamma", "delta", "sigma2"):
        flat = draws.flat(name)
        qs = np.quantile(flat, [0.05, 0.50, 0.95], axis=0)
        out[name] = {"mean": flat.mean(axis=0),
                     "q05": qs[0], "q50": qs[1], "q95": qs[2]}
    return out
