"""Predictions, error metrics, heatmap exports and VI-vs-MCMC comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gibbs import PosteriorDraws
from .model import Dataset, mean_matrix
from .statsmath import TruncNormalParams, sample_trunc_normal
from .vi import FitResult


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-cell posterior-predictive quantiles and mean for the cell mean."""

    mean: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    observed: np.ndarray
    include_noise: bool


def _vi_parameter_draws(fit: FitResult, n_draws: int, rng: np.random.Generator):
    st = fit.state
    I, Q = st.mu_q_gamma.shape
    J = st.mu_q_delta.shape[0]
    mu = rng.normal(st.mu_q_mu, np.sqrt(st.Sigma_q_mu), n_draws)
    g = st.mu_q_g + np.sqrt(st.Sigma_q_g) * rng.standard_normal((n_draws, I))
    e = st.mu_q_e + np.sqrt(st.Sigma_q_e) * rng.standard_normal((n_draws, J))
    lam = np.empty((n_draws, Q))
    gamma = st.mu_q_gamma + np.sqrt(st.Sigma_q_gamma) * rng.standard_normal((n_draws, I, Q))
    delta = st.mu_q_delta + np.sqrt(st.Sigma_q_delta) * rng.standard_normal((n_draws, J, Q))
    for q in range(Q):
        lam[:, q] = sample_trunc_normal(
            rng, TruncNormalParams(float(st.mu_q_lambda[q]), float(st.Sigma_q_lambda[q])),
            size=n_draws)
        gamma[:, 0, q] = sample_trunc_normal(
            rng, TruncNormalParams(float(st.mu_q_gamma[0, q]), float(st.Sigma_q_gamma[0, q])),
            size=n_draws)
    sigma2 = 1.0 / rng.gamma(st.a_q, 1.0 / st.b_q, n_draws)
    return mu, g, e, lam, gamma, delta, sigma2


def _cell_mean_draws(mu, g, e, lam, gamma, delta) -> np.ndarray:
    out = mu[:, None, None] + g[:, :, None] + e[:, None, :]
    if lam.shape[1]:
        out = out + np.einsum("dq,diq,djq->dij", lam, gamma, delta)
    return out


def predict(fit: FitResult | PosteriorDraws, dataset: Dataset,
            n_draws: int = 4000, include_noise: bool = False,
            seed: int = 0) -> PredictiveSummary:
    """Posterior-predictive summary for every cell of the grid.

    VI draws parameter vectors from the independent variational factors;
    MCMC reuses the stored posterior draws (subsampled to n_draws).
    With include_noise, Normal observation noise is added per draw.
    """
    I, J = dataset.n_genotypes, dataset.n_environments
    rng = np.random.default_rng(seed)
    if isinstance(fit, FitResult):
        if fit.state.mu_q_g.size != I or fit.state.mu_q_e.size != J:
            raise DimensionMismatchError("fit does not cover the dataset grid")
        mu, g, e, lam, gamma, delta, sigma2 = _vi_parameter_draws(fit, n_draws, rng)
    else:
        if fit.g.shape[2] != I or fit.e.shape[2] != J:
            raise DimensionMismatchError("draws do not cover the dataset grid")
        mu, g, e = fit.flat("mu"), fit.flat("g"), fit.flat("e")
        lam, gamma, delta = fit.flat("lam"), fit.flat("gamma"), fit.flat("delta")
        sigma2 = fit.flat("sigma2")
        if mu.size > n_draws:
            pick = rng.choice(mu.size, size=n_draws, replace=False)
            mu, g, e, sigma2 = mu[pick], g[pick], e[pick], sigma2[pick]
            lam, gamma, delta = lam[pick], gamma[pick], delta[pick]

    cells = _cell_mean_draws(mu, g, e, lam, gamma, delta)
    if include_noise:
        cells = cells + np.sqrt(sigma2)[:, None, None] * rng.standard_normal(cells.shape)

    qs = np.quantile(cells, [0.05, 0.50, 0.95], axis=0)
    observed = np.zeros((I, J), dtype=bool)
    observed[dataset.rows, dataset.cols] = True
    return PredictiveSummary(mean=cells.mean(axis=0), q05=qs[0], q50=qs[1],
                             q95=qs[2], observed=observed,
                             include_noise=include_noise)


def rmse(predicted, reference) -> float:
    predicted = np.asarray(predicted, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if predicted.shape != reference.shape or predicted.size == 0:
        raise ValueError("need equal-length nonempty vectors")
    return float(np.sqrt(np.mean((predicted - reference) ** 2)))


def in_sample_rmse(theta, dataset: Dataset) -> float:
    """RMSE of fitted cell means against the observed responses."""
    fitted = mean_matrix(theta)[dataset.rows, dataset.cols]
    return rmse(fitted, dataset.y)


def _write_matrix(path, matrix, row_labels, col_labels, fmt):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["genotype"] + list(col_labels))
        for label, row in zip(row_labels, matrix):
            writer.writerow([label] + [fmt(v) for v in row])


def export_heatmap(summary: PredictiveSummary, dataset: Dataset, prefix) -> list[str]:
    """Write q05/q50/q95 matrices plus the observed-cell mask as CSV files."""
    prefix = str(prefix)
    paths = []
    for tag, matrix in (("q05", summary.q05), ("q50", summary.q50), ("q95", summary.q95)):
        path = f"{prefix}_{tag}.csv"
        _write_matrix(path, matrix, dataset.genotype_labels,
                      dataset.environment_labels, lambda v: f"{v:.12g}")
        paths.append(path)
    mask_path = f"{prefix}_observed.csv"
    _write_matrix(mask_path, summary.observed.astype(int),
                  dataset.genotype_labels, dataset.environment_labels,
                  lambda v: str(int(v)))
    paths.append(mask_path)
    return paths


@dataclass(frozen=True)
class ComparisonReport:
    rows: list[tuple]          # (name, vi_mean, mcmc_mean, vi_sd, mcmc_sd, gap)
    vi_rmse: float
    mcmc_rmse: float
    vi_time: float
    mcmc_time: float

    @property
    def time_ratio(self) -> float:
        return self.mcmc_time / self.vi_time if self.vi_time > 0 else np.inf

    def max_gap(self, prefix: str) -> float:
        gaps = [r[5] for r in self.rows if r[0].startswith(prefix)]
        return max(gaps) if gaps else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "vi_mean", "mcmc_mean", "vi_sd", "mcmc_sd",
                             "abs_gap"])
            for row in self.rows:
                writer.writerow([row[0]] + [f"{v:.12g}" for v in row[1:]])

    def to_text(self) -> str:
        lines = [
            f"in-sample RMSE: VI {self.vi_rmse:.4f}  MCMC {self.mcmc_rmse:.4f}",
            f"wall time [s]:  VI {self.vi_time:.2f}  MCMC {self.mcmc_time:.2f}"
            f"  (ratio MCMC/VI {self.time_ratio:.2f})",
            f"max mean gap: mu/g/e "
            f"{max(self.max_gap('mu'), self.max_gap('g['), self.max_gap('e[')):.4f}",
        ]
        return "\n".join(lines)


def compare(vi: FitResult, mcmc: PosteriorDraws, dataset: Dataset) -> ComparisonReport:
    """Per-parameter means/sds of the two fitters plus speed and RMSE."""
    from .gibbs import posterior_mean_theta

    Q = vi.state.n_components
    if (mcmc.n_components != Q or mcmc.g.shape[2] != dataset.n_genotypes
            or mcmc.e.shape[2] != dataset.n_environments
            or vi.state.mu_q_g.size != dataset.n_genotypes):
        raise DimensionMismatchError("fits disagree on I, J or Q")

    theta_vi = vi.theta
    st = vi.state
    rows: list[tuple] = []

    def add(name, vi_mean, mcmc_draws, vi_sd):
        mcmc_mean = float(np.mean(mcmc_draws))
        rows.append((name, float(vi_mean), mcmc_mean, float(vi_sd),
                     float(np.std(mcmc_draws)), abs(vi_mean - mcmc_mean)))

    add("mu", theta_vi.mu, mcmc.flat("mu"), np.sqrt(st.Sigma_q_mu))
    for i in range(dataset.n_genotypes):
        add(f"g[{i + 1}]", theta_vi.g[i], mcmc.flat("g")[:, i], np.sqrt(st.Sigma_q_g[i]))
    for j in range(dataset.n_environments):
        add(f"e[{j + 1}]", theta_vi.e[j], mcmc.flat("e")[:, j], np.sqrt(st.Sigma_q_e[j]))
    for q in range(Q):
        add(f"lambda[{q + 1}]", theta_vi.lam[q], mcmc.flat("lam")[:, q],
            np.sqrt(st.Sigma_q_lambda[q]))
    sig_sd = np.sqrt(st.b_q ** 2 / ((st.a_q - 1.0) ** 2 * (st.a_q - 2.0))) \
        if st.a_q > 2 else np.nan
    add("sigma2", theta_vi.sigma2, mcmc.flat("sigma2"), sig_sd)

    return ComparisonReport(
        rows=rows,
        vi_rmse=in_sample_rmse(theta_vi, dataset),
        mcmc_rmse=in_sample_rmse(posterior_mean_theta(mcmc), dataset),
        vi_time=vi.wall_time, mcmc_time=mcmc.wall_time)
