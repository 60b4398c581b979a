"""Distributional and linear-algebra primitives for the AMMI pipeline.

Truncated-normal moments/sampling, column orthonormalization of the
bilinear factor matrices, and the split-chain Gelman-Rubin diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

# Above this standardized truncation point the direct variance formula
# 1 + a*h - h^2 loses too many digits; switch to the Mills-ratio
# asymptotic series in u = 1/a^2.
_TAIL_SWITCH = 25.0


class DegenerateInputError(ValueError):
    """Raised when an input is rank deficient or otherwise degenerate."""


@dataclass(frozen=True)
class TruncNormalParams:
    """Parameters of a normal law truncated to (lower_bound, inf).

    `location` and `scale_sq` are the mean and variance of the parent
    (untruncated) normal, not of the truncated law.
    """

    location: float
    scale_sq: float
    lower_bound: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.location) and np.isfinite(self.scale_sq)
                and np.isfinite(self.lower_bound)):
            raise ValueError("truncated-normal parameters must be finite")
        if self.scale_sq <= 0:
            raise ValueError(f"scale_sq must be > 0, got {self.scale_sq}")


@dataclass(frozen=True)
class ChainSet:
    """Scalar MCMC draws organized as (n_chains, n_iter)."""

    draws: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.draws, dtype=float)
        if arr.ndim != 2:
            raise ValueError("draws must be a 2-d array (chains x iterations)")
        object.__setattr__(self, "draws", arr)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iter(self) -> int:
        return self.draws.shape[1]


def _hazard(alpha):
    """phi(alpha) / (1 - Phi(alpha)), stable for large alpha via log Phi."""
    alpha = np.asarray(alpha, dtype=float)
    log_pdf = -0.5 * alpha * alpha - _LOG_SQRT_2PI
    return np.exp(log_pdf - log_ndtr(-alpha))


def trunc_normal_moments(p: TruncNormalParams) -> tuple[float, float]:
    """Mean and variance of N(location, scale_sq) truncated to x > lower_bound."""
    s = np.sqrt(p.scale_sq)
    alpha = (p.lower_bound - p.location) / s
    if alpha <= _TAIL_SWITCH:
        h = float(_hazard(alpha))
        mean = p.location + s * h
        var = p.scale_sq * (1.0 + alpha * h - h * h)
    else:
        # deep right tail: h ~ a(1 + u - 2u^2 + 10u^3), Var/s^2 ~ u - 6u^2 + 50u^3
        u = 1.0 / (alpha * alpha)
        h = alpha * (1.0 + u * (1.0 - u * (2.0 - 10.0 * u)))
        mean = p.location + s * h
        var = p.scale_sq * u * (1.0 - u * (6.0 - 50.0 * u))
    return float(mean), float(var)


def sample_trunc_normal(rng: np.random.Generator, p: TruncNormalParams,
                        size: int | None = None):
    """Draw from N(location, scale_sq) truncated to x > lower_bound.

    Uses plain rejection from the parent normal when the kept mass is
    large, and Robert's translated-exponential rejection in the tail.
    """
    n = 1 if size is None else int(size)
    s = np.sqrt(p.scale_sq)
    alpha = (p.lower_bound - p.location) / s

    out = np.empty(n)
    filled = 0
    if alpha < 0.5:
        # accept prob = 1 - Phi(alpha) >= 0.3
        while filled < n:
            batch = max(n - filled, 16)
            z = rng.standard_normal(int(batch * 2.5))
            z = z[z > alpha]
            take = min(z.size, n - filled)
            out[filled:filled + take] = z[:take]
            filled += take
    else:
        lam = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
        while filled < n:
            batch = max(2 * (n - filled), 16)
            z = alpha + rng.exponential(1.0 / lam, size=batch)
            accept = rng.random(batch) <= np.exp(-0.5 * (z - lam) ** 2)
            z = z[accept]
            take = min(z.size, n - filled)
            out[filled:filled + take] = z[:take]
            filled += take

    draws = p.location + s * out
    # guard against round-off landing exactly on the bound
    np.maximum(draws, np.nextafter(p.lower_bound, np.inf), out=draws)
    if size is None:
        return float(draws[0])
    return draws


def orthonormalize_interaction(raw_gamma: np.ndarray, raw_delta: np.ndarray
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Turn raw factor matrices into identifiable bilinear factors.

    Columns are centered, made orthonormal by modified Gram-Schmidt, and
    each gamma column is sign-fixed so its first entry is positive, with
    the paired delta column flipped jointly so the bilinear product is
    unchanged.
    """
    gamma = np.array(raw_gamma, dtype=float, copy=True)
    delta = np.array(raw_delta, dtype=float, copy=True)
    if gamma.ndim != 2 or delta.ndim != 2 or gamma.shape[1] != delta.shape[1]:
        raise ValueError("raw_gamma and raw_delta must be 2-d with equal column counts")
    q = gamma.shape[1]
    if gamma.shape[0] <= q or delta.shape[0] <= q:
        raise DegenerateInputError("need more rows than columns to center and orthonormalize")

    for mat, name in ((gamma, "gamma"), (delta, "delta")):
        mat -= mat.mean(axis=0, keepdims=True)
        for k in range(q):
            for prev in range(k):
                mat[:, k] -= (mat[:, prev] @ mat[:, k]) * mat[:, prev]
            nrm = np.linalg.norm(mat[:, k])
            if nrm < 1e-12 * np.sqrt(mat.shape[0]):
                raise DegenerateInputError(
                    f"{name} column {k} is rank deficient after centering")
            mat[:, k] /= nrm

    for k in range(q):
        lead = gamma[:, k][np.nonzero(gamma[:, k])[0][0]]
        if lead < 0:
            gamma[:, k] *= -1.0
            delta[:, k] *= -1.0
    return gamma, delta


def gelman_rubin(chains: ChainSet) -> float:
    """Split-chain potential scale reduction factor R-hat.

    Each chain is halved, so m = 2 * n_chains sequences enter the
    within/between variance comparison.
    """
    if chains.n_chains < 2:
        raise ValueError("need at least 2 chains")
    if chains.n_iter < 4:
        raise ValueError("need at least 4 iterations to split")
    half = chains.n_iter // 2
    splits = np.vstack([chains.draws[:, :half], chains.draws[:, half:2 * half]])

    within = splits.var(axis=1, ddof=1)
    w = within.mean()
    if w <= 0:
        raise ValueError("constant chains: within-chain variance is zero")
    b = half * splits.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))
