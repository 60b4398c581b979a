"""Data model for two-way trial data and AMMI parameter points."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when input data violates the dataset contract."""


@dataclass(frozen=True)
class Dataset:
    """Long-format observations over a possibly incomplete I x J grid.

    `rows` / `cols` hold 0-based genotype / environment indices assigned
    by first appearance of the labels.
    """

    rows: np.ndarray
    cols: np.ndarray
    y: np.ndarray
    n_genotypes: int
    n_environments: int
    genotype_labels: tuple[str, ...]
    environment_labels: tuple[str, ...]

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp)
        cols = np.asarray(self.cols, dtype=np.intp)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "y", y)
        if not (rows.shape == cols.shape == y.shape) or rows.ndim != 1:
            raise ValidationError("rows, cols and y must be equal-length 1-d arrays")
        if rows.size == 0:
            raise ValidationError("dataset is empty")
        if not np.all(np.isfinite(y)):
            raise ValidationError("non-finite response values")
        if rows.min() < 0 or rows.max() >= self.n_genotypes:
            raise ValidationError("genotype index out of range")
        if cols.min() < 0 or cols.max() >= self.n_environments:
            raise ValidationError("environment index out of range")
        keys = rows * self.n_environments + cols
        if np.unique(keys).size != keys.size:
            dup = int(keys[np.argmax(np.bincount(keys) > 1)])
            raise ValidationError(
                f"duplicate cell (genotype={dup // self.n_environments + 1}, "
                f"environment={dup % self.n_environments + 1})")
        if np.unique(rows).size != self.n_genotypes:
            raise ValidationError("some genotype has no observations")
        if np.unique(cols).size != self.n_environments:
            raise ValidationError("some environment has no observations")

    @property
    def n_obs(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters of the Bayesian AMMI model."""

    mu_mu: float = 0.0
    sigma2_mu: float = 1e6
    sigma2_g: float = 100.0
    sigma2_e: float = 100.0
    sigma2_lambda: float = 100.0
    a: float = 0.1
    b: float = 0.1

    def __post_init__(self):
        for name in ("sigma2_mu", "sigma2_g", "sigma2_e", "sigma2_lambda", "a", "b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def default_hyperparams(dataset: Dataset) -> Hyperparams:
    """Weakly informative defaults, with the grand-mean prior centered on the data."""
    return Hyperparams(mu_mu=float(dataset.y.mean()))


@dataclass(frozen=True)
class ThetaPoint:
    """One concrete parameter assignment of the AMMI model."""

    mu: float
    g: np.ndarray
    e: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    sigma2: float

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        e = np.asarray(self.e, dtype=float)
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        q = lam.size
        gamma = np.asarray(self.gamma, dtype=float).reshape(g.size, q)
        delta = np.asarray(self.delta, dtype=float).reshape(e.size, q)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "delta", delta)
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")

    @property
    def n_components(self) -> int:
        return self.lam.size


@dataclass(frozen=True)
class ModelConfig:
    """Fit configuration shared by the VI and Gibbs fitters."""

    Q: int
    hyper: Hyperparams = field(default_factory=Hyperparams)
    max_iter: int = 1000
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.Q not in (0, 1, 2):
            raise ValueError("Q must be 0, 1 or 2")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def model_mean(theta: ThetaPoint, i: int, j: int) -> float:
    """Systematic part mu + g_i + e_j + sum_q lambda_q gamma_iq delta_jq."""
    bil = float(theta.gamma[i] * theta.delta[j] @ theta.lam) if theta.n_components else 0.0
    return theta.mu + float(theta.g[i]) + float(theta.e[j]) + bil


def mean_matrix(theta: ThetaPoint) -> np.ndarray:
    """All cell means as an I x J matrix."""
    out = theta.mu + theta.g[:, None] + theta.e[None, :]
    if theta.n_components:
        out = out + (theta.gamma * theta.lam) @ theta.delta.T
    return out


def cell_counts(dataset: Dataset) -> tuple[int, np.ndarray, np.ndarray]:
    """Observed-cell counts: total, per genotype row, per environment column."""
    n_rows = np.bincount(dataset.rows, minlength=dataset.n_genotypes)
    n_cols = np.bincount(dataset.cols, minlength=dataset.n_environments)
    return dataset.n_obs, n_rows, n_cols


CSV_HEADER = ["genotype", "environment", "yield"]


def dataset_from_labels(genotypes, environments, values) -> Dataset:
    """Build a Dataset assigning indices by first appearance of each label."""
    g_index: dict[str, int] = {}
    e_index: dict[str, int] = {}
    rows, cols = [], []
    for gl, el in zip(genotypes, environments):
        rows.append(g_index.setdefault(str(gl), len(g_index)))
        cols.append(e_index.setdefault(str(el), len(e_index)))
    return Dataset(
        rows=np.array(rows), cols=np.array(cols), y=np.asarray(values, dtype=float),
        n_genotypes=len(g_index), n_environments=len(e_index),
        genotype_labels=tuple(g_index), environment_labels=tuple(e_index))


def load_csv(path) -> Dataset:
    """Read a long-format trial CSV with header genotype,environment,yield."""
    genotypes, environments, values = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        if [h.strip() for h in header] != CSV_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields")
            try:
                val = float(record[2])
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: non-numeric yield {record[2]!r}") from None
            genotypes.append(record[0])
            environments.append(record[1])
            values.append(val)
    if not values:
        raise ValidationError(f"{path}: no observations")
    return dataset_from_labels(genotypes, environments, values)


THETA_HEADER = ["parameter", "index1", "index2", "value"]


def write_theta_csv(theta: ThetaPoint, path) -> None:
    """Named-parameter CSV of one parameter point (1-based indices)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(THETA_HEADER)
        writer.writerow(["mu", "", "", repr(theta.mu)])
        for i, v in enumerate(theta.g):
            writer.writerow(["g", i + 1, "", repr(float(v))])
        for j, v in enumerate(theta.e):
            writer.writerow(["e", j + 1, "", repr(float(v))])
        for q, v in enumerate(theta.lam):
            writer.writerow(["lambda", q + 1, "", repr(float(v))])
        for (i, q), v in np.ndenumerate(theta.gamma):
            writer.writerow(["gamma", i + 1, q + 1, repr(float(v))])
        for (j, q), v in np.ndenumerate(theta.delta):
            writer.writerow(["delta", j + 1, q + 1, repr(float(v))])
        writer.writerow(["sigma2", "", "", repr(theta.sigma2)])


def load_theta_csv(path) -> ThetaPoint:
    values: dict[str, dict] = {k: {} for k in
                               ("mu", "g", "e", "lambda", "gamma", "delta", "sigma2")}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != THETA_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(THETA_HEADER)}")
        for record in reader:
            if not record:
                continue
            name, i1, i2, val = record
            if name not in values:
                raise ValidationError(f"{path}: unknown parameter {name!r}")
            key = (int(i1) if i1 else 0, int(i2) if i2 else 0)
            values[name][key] = float(val)

    def vec(name):
        entries = values[name]
        return np.array([entries[k] for k in sorted(entries)])

    def mat(name, n_rows):
        entries = values[name]
        if not entries:
            return np.zeros((n_rows, 0))
        q = max(k[1] for k in entries)
        out = np.empty((n_rows, q))
        for (i, j), v in entries.items():
            out[i - 1, j - 1] = v
        return out

    g, e = vec("g"), vec("e")
    return ThetaPoint(
        mu=values["mu"][(0, 0)], g=g, e=e, lam=vec("lambda"),
        gamma=mat("gamma", g.size), delta=mat("delta", e.size),
        sigma2=values["sigma2"][(0, 0)])


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i, j, val in zip(dataset.rows, dataset.cols, dataset.y):
            writer.writerow([dataset.genotype_labels[i],
                             dataset.environment_labels[j],
                             repr(float(val))])
