"""Command-line entry point wiring simulation, fitting, prediction and studies.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 divergence,
5 dimension mismatch.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, gibbs, vi
# The package re-exports the simulate() function, shadowing the submodule
# attribute, so resolve the module itself explicitly.
_simmod = importlib.import_module("ammivi.simulate")
from .freqfit import frequentist_fit
from .model import (Dataset, Hyperparams, ModelConfig, ValidationError,
                    default_hyperparams, load_csv, load_theta_csv, write_csv,
                    write_theta_csv)

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_DIMENSION = 5


def _parse_hyper(pairs, dataset) -> Hyperparams:
    base = default_hyperparams(dataset)
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"--hyper expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        if key not in ("mu_mu", "sigma2_mu", "sigma2_g", "sigma2_e",
                       "sigma2_lambda", "a", "b"):
            raise ValidationError(f"unknown hyperparameter {key!r}")
        overrides[key] = float(val)
    if overrides:
        fields = {k: getattr(base, k) for k in
                  ("mu_mu", "sigma2_mu", "sigma2_g", "sigma2_e",
                   "sigma2_lambda", "a", "b")}
        fields.update(overrides)
        return Hyperparams(**fields)
    return base


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(args, dataset) -> ModelConfig:
    return ModelConfig(Q=args.q, hyper=_parse_hyper(getattr(args, "hyper", None), dataset),
                       max_iter=args.max_iter, tol=args.tol, seed=args.seed)


def _initial_theta(args, dataset, config):
    mode = getattr(args, "init", "freq")
    if mode == "freq":
        return frequentist_fit(dataset, config.Q)
    if mode == "random":
        return vi.random_theta(dataset, config.Q, np.random.default_rng(config.seed))
    if mode == "file":
        if not getattr(args, "init_file", None):
            raise ValidationError("--init file requires --init-file")
        return load_theta_csv(args.init_file)
    if mode == "mcmc-short":
        return mcmc_short_init(dataset, config)
    raise ValidationError(f"unknown init mode {mode!r}")


def subsample_dataset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Random cell subsample that keeps every row and column nonempty."""
    n_keep = max(int(round(fraction * dataset.n_obs)), 1)
    for attempt in range(500):
        rng = np.random.default_rng([seed, attempt])
        pick = np.sort(rng.choice(dataset.n_obs, size=n_keep, replace=False))
        try:
            return Dataset(rows=dataset.rows[pick], cols=dataset.cols[pick],
                           y=dataset.y[pick],
                           n_genotypes=dataset.n_genotypes,
                           n_environments=dataset.n_environments,
                           genotype_labels=dataset.genotype_labels,
                           environment_labels=dataset.environment_labels)
        except ValidationError:
            continue
    raise ValidationError("could not subsample without emptying a row or column")


def mcmc_short_init(dataset: Dataset, config: ModelConfig, fraction: float = 0.25,
                    n_iter: int = 500, n_burn: int = 100):
    """Initialization from a short Gibbs run on a 25% cell subsample."""
    sub = subsample_dataset(dataset, fraction, config.seed)
    draws = gibbs.gibbs_fit(sub, config, n_chains=1, n_iter=n_iter, n_burn=n_burn)
    return gibbs.posterior_mean_theta(draws)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_state_csv(state: vi.VariationalState, path):
    rows = [("mu", "", "", repr(state.mu_q_mu), repr(state.Sigma_q_mu))]
    for i in range(state.mu_q_g.size):
        rows.append(("g", i + 1, "", repr(float(state.mu_q_g[i])),
                     repr(float(state.Sigma_q_g[i]))))
    for j in range(state.mu_q_e.size):
        rows.append(("e", j + 1, "", repr(float(state.mu_q_e[j])),
                     repr(float(state.Sigma_q_e[j]))))
    for q in range(state.n_components):
        rows.append(("lambda", q + 1, "", repr(float(state.mu_q_lambda[q])),
                     repr(float(state.Sigma_q_lambda[q]))))
        for i in range(state.mu_q_gamma.shape[0]):
            rows.append(("gamma", i + 1, q + 1, repr(float(state.mu_q_gamma[i, q])),
                         repr(float(state.Sigma_q_gamma[i, q]))))
        for j in range(state.mu_q_delta.shape[0]):
            rows.append(("delta", j + 1, q + 1, repr(float(state.mu_q_delta[j, q])),
                         repr(float(state.Sigma_q_delta[j, q]))))
    rows.append(("tau_shape", "", "", repr(state.a_q), ""))
    rows.append(("tau_rate", "", "", repr(state.b_q), ""))
    _write_rows(path, ["parameter", "index1", "index2", "mean", "variance"], rows)


def _scenario_from_args(args) -> _simmod.SimScenario:
    if args.scenario:
        scenario = _simmod.scenario_by_name(args.scenario)
        return _simmod.with_seed(scenario, args.seed) if args.seed is not None else scenario
    if args.i is None or args.j is None:
        raise ValidationError("either --scenario or --i/--j/--lambda are required")
    lam = tuple(float(v) for v in args.lam.split(",")) if args.lam else ()
    return _simmod.SimScenario(I=args.i, J=args.j, Q=len(lam), lambda_true=lam,
                           sigma2_g=args.sigma2_g, sigma2_e=args.sigma2_e,
                           sigma2_y=args.sigma2_y, mu_mean=args.mu_mean,
                           seed=args.seed if args.seed is not None else 0,
                           missing_fraction=args.missing, name="custom")


def run_simulate(args) -> int:
    out = _outdir(args)
    scenario = _scenario_from_args(args)
    dataset, truth = _simmod.simulate(scenario)
    write_csv(dataset, out / "data.csv")
    write_theta_csv(truth, out / "truth.csv")
    print(f"wrote {out / 'data.csv'} ({dataset.n_obs} observations) and truth.csv")
    return 0


def run_fit_freq(args) -> int:
    dataset = load_csv(args.input)
    theta = frequentist_fit(dataset, args.q)
    out = _outdir(args)
    write_theta_csv(theta, out / "theta.csv")
    print(f"wrote {out / 'theta.csv'}")
    return 0


def _fit_vi(args, dataset):
    config = _model_config(args, dataset)
    init = _initial_theta(args, dataset, config)
    return vi.fit(dataset, config, init), config


def run_fit_vi(args) -> int:
    dataset = load_csv(args.input)
    result, _ = _fit_vi(args, dataset)
    out = _outdir(args)
    write_theta_csv(result.theta, out / "theta.csv")
    _write_state_csv(result.state, out / "vi_state.csv")
    _write_rows(out / "elbo_trace.csv", ["iteration", "elbo"],
                [(k, repr(float(v))) for k, v in enumerate(result.elbo_trace)])
    _write_rows(out / "fit_summary.csv", ["key", "value"],
                [("converged", int(result.converged)), ("n_iter", result.n_iter),
                 ("wall_time", f"{result.wall_time:.6f}"),
                 ("final_elbo", repr(float(result.elbo_trace[-1])))])
    print(f"converged={result.converged} n_iter={result.n_iter} "
          f"elbo={result.elbo_trace[-1]:.4f}")
    return 0


def run_fit_mcmc(args) -> int:
    dataset = load_csv(args.input)
    config = _model_config(args, dataset)
    draws = gibbs.gibbs_fit(dataset, config, n_chains=args.chains,
                            n_iter=args.iters, n_burn=args.burn)
    out = _outdir(args)
    summary = gibbs.summarize(draws)
    rows = []

    def emit(name, i1, i2, stats, k=None):
        sel = (lambda a: a if k is None else a[k])
        rows.append((name, i1, i2, *(repr(float(sel(np.atleast_1d(stats[s]))))
                                     for s in ("mean", "q05", "q50", "q95"))))

    emit("mu", "", "", {s: summary["mu"][s] for s in ("mean", "q05", "q50", "q95")}, 0)
    for i in range(dataset.n_genotypes):
        emit("g", i + 1, "", summary["g"], i)
    for j in range(dataset.n_environments):
        emit("e", j + 1, "", summary["e"], j)
    for q in range(config.Q):
        emit("lambda", q + 1, "", summary["lam"], q)
    emit("sigma2", "", "", summary["sigma2"], 0)
    _write_rows(out / "mcmc_summary.csv",
                ["parameter", "index1", "index2", "mean", "q05", "q50", "q95"], rows)

    write_theta_csv(gibbs.posterior_mean_theta(draws), out / "theta.csv")
    if draws.n_chains >= 2:
        rhat = gibbs.rhat_table(draws)
        rhat_rows = [("mu", "", f"{float(rhat['mu']):.6f}"),
                     ("sigma2", "", f"{float(rhat['sigma2']):.6f}")]
        for name in ("g", "e", "lam"):
            for k, v in enumerate(rhat[name]):
                rhat_rows.append((name, k + 1, f"{v:.6f}"))
        _write_rows(out / "rhat.csv", ["parameter", "index", "rhat"], rhat_rows)
    if args.save_draws:
        flat_rows = []
        for c in range(draws.n_chains):
            for t in range(draws.n_iter):
                flat_rows.append((c + 1, t + 1, repr(float(draws.mu[c, t])),
                                  repr(float(draws.sigma2[c, t]))))
        _write_rows(out / "draws_scalar.csv", ["chain", "iteration", "mu", "sigma2"],
                    flat_rows)
    print(f"wrote {out / 'mcmc_summary.csv'} ({draws.n_chains} chains x {draws.n_iter})")
    return 0


def run_predict(args) -> int:
    dataset = load_csv(args.input)
    result, _ = _fit_vi(args, dataset)
    summary = analysis.predict(result, dataset, n_draws=args.draws,
                               include_noise=args.include_noise, seed=args.seed)
    out = _outdir(args)
    paths = analysis.export_heatmap(summary, dataset, out / args.prefix)
    print("wrote " + ", ".join(paths))
    return 0


def run_compare(args) -> int:
    dataset = load_csv(args.input)
    config = _model_config(args, dataset)
    init = frequentist_fit(dataset, config.Q)
    vi_fit = vi.fit(dataset, config, init)
    mcmc_q = args.mcmc_q if args.mcmc_q is not None else args.q
    mcmc_config = ModelConfig(Q=mcmc_q, hyper=config.hyper,
                              max_iter=config.max_iter, tol=config.tol,
                              seed=config.seed)
    draws = gibbs.gibbs_fit(dataset, mcmc_config, n_chains=args.chains,
                            n_iter=args.iters, n_burn=args.burn)
    report = analysis.compare(vi_fit, draws, dataset)
    out = _outdir(args)
    report.to_csv(out / "compare.csv")
    (out / "compare.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())
    return 0


def run_init_study(args) -> int:
    scenario = _simmod.scenario_by_name(args.scenario)
    out = _outdir(args)
    rows = []
    from .model import mean_matrix
    for seed_offset in range(args.n_seeds):
        seed = args.seed + seed_offset
        dataset, truth = _simmod.simulate(_simmod.with_seed(scenario, seed))
        truth_cells = mean_matrix(truth)[dataset.rows, dataset.cols]
        config = ModelConfig(Q=scenario.Q, hyper=default_hyperparams(dataset),
                             max_iter=args.max_iter, tol=args.tol, seed=seed)
        inits = {
            "random": vi.random_theta(dataset, config.Q, np.random.default_rng(seed)),
            "freq": frequentist_fit(dataset, config.Q),
            "mcmc-short": mcmc_short_init(dataset, config),
        }
        for mode, init in inits.items():
            trace = []

            def record(sweep, state, mode=mode, trace=trace):
                theta = vi.posterior_mean_theta(state)
                fitted = mean_matrix(theta)[dataset.rows, dataset.cols]
                trace.append((sweep, analysis.rmse(fitted, dataset.y),
                              analysis.rmse(fitted, truth_cells)))

            vi.fit(dataset, config, init, callback=record)
            for sweep, r_obs, r_truth in trace:
                rows.append((seed, mode, sweep, f"{r_obs:.8f}", f"{r_truth:.8f}"))
    _write_rows(out / "init_study.csv",
                ["seed", "init", "iteration", "rmse_observed", "rmse_truth"], rows)
    print(f"wrote {out / 'init_study.csv'}")
    return 0


def benchmark_rows(group: str, q_values=(1, 2), smoke: bool = False, seed: int = 0):
    """Timing rows (name, I, J, Q, n, vi_time, mcmc_time, ratio) for one size group."""
    n_iter, n_burn = (100, 25) if smoke else (6000, 1000)
    rows = []
    for scenario in _simmod.scenario_grid():
        if not scenario.name.startswith(f"bench-{group}-"):
            continue
        if scenario.Q not in q_values:
            continue
        dataset, _ = _simmod.simulate(_simmod.with_seed(scenario, scenario.seed + seed))
        config = ModelConfig(Q=scenario.Q, hyper=default_hyperparams(dataset),
                             seed=seed)
        init = frequentist_fit(dataset, config.Q)
        t0 = time.perf_counter()
        vi.fit(dataset, config, init)
        vi_time = time.perf_counter() - t0
        t0 = time.perf_counter()
        gibbs.gibbs_fit(dataset, config, n_chains=4, n_iter=n_iter, n_burn=n_burn,
                        init=init)
        mcmc_time = time.perf_counter() - t0
        rows.append((scenario.name, scenario.I, scenario.J, scenario.Q,
                     dataset.n_obs, vi_time, mcmc_time, mcmc_time / vi_time))
    return rows


def run_benchmark(args) -> int:
    rows = benchmark_rows(args.group, q_values=tuple(int(q) for q in args.q_list.split(",")),
                          smoke=args.smoke, seed=args.seed)
    out = _outdir(args)
    _write_rows(out / f"benchmark_{args.group}.csv",
                ["scenario", "I", "J", "Q", "n", "vi_time", "mcmc_time", "ratio"],
                [(r[0], r[1], r[2], r[3], r[4], f"{r[5]:.4f}", f"{r[6]:.4f}",
                  f"{r[7]:.3f}") for r in rows])
    for r in rows:
        print(f"{r[0]}: n={r[4]} VI {r[5]:.2f}s MCMC {r[6]:.2f}s ratio {r[7]:.2f}")
    return 0


def _read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _add_common(p, with_fit=True):
    p.add_argument("--output-dir", default=".", help="directory for output files")
    p.add_argument("--seed", type=int, default=0)
    if with_fit:
        p.add_argument("--q", type=int, default=1, help="number of bilinear components")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--max-iter", type=int, default=1000)
        p.add_argument("--hyper", action="append", metavar="KEY=VALUE",
                       help="override a prior hyperparameter (repeatable)")


def build_parser(config_defaults: dict | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ammivi",
        description="Bayesian AMMI analysis of genotype-by-environment data "
                    "via variational inference and Gibbs sampling")
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = []

    def add_parser(*args, **kwargs):
        p = sub.add_parser(*args, **kwargs)
        subparsers.append(p)
        return p

    p = add_parser("simulate", help="generate a synthetic trial dataset")
    p.add_argument("--scenario", help="named scenario from the built-in grid")
    p.add_argument("--i", type=int, help="number of genotypes")
    p.add_argument("--j", type=int, help="number of environments")
    p.add_argument("--lambda", dest="lam", help="comma-separated singular values")
    p.add_argument("--sigma2-g", type=float, default=10.0)
    p.add_argument("--sigma2-e", type=float, default=10.0)
    p.add_argument("--sigma2-y", type=float, default=1.0)
    p.add_argument("--mu-mean", type=float, default=90.0)
    p.add_argument("--missing", type=float, default=0.0)
    p.add_argument("--output-dir", default=".")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=run_simulate)

    p = add_parser("fit-freq", help="frequentist multi-stage fit")
    p.add_argument("--input", required=True)
    _add_common(p)
    p.set_defaults(func=run_fit_freq)

    p = add_parser("fit-vi", help="coordinate-ascent variational fit")
    p.add_argument("--input", required=True)
    p.add_argument("--init", choices=["freq", "random", "file", "mcmc-short"],
                   default="freq")
    p.add_argument("--init-file")
    _add_common(p)
    p.set_defaults(func=run_fit_vi)

    p = add_parser("fit-mcmc", help="Gibbs sampler fit")
    p.add_argument("--input", required=True)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--burn", type=int, default=1000)
    p.add_argument("--save-draws", action="store_true")
    _add_common(p)
    p.set_defaults(func=run_fit_mcmc)

    p = add_parser("predict", help="fit VI and export predictive quantile heatmaps")
    p.add_argument("--input", required=True)
    p.add_argument("--init", choices=["freq", "random", "file", "mcmc-short"],
                   default="freq")
    p.add_argument("--init-file")
    p.add_argument("--draws", type=int, default=4000)
    p.add_argument("--include-noise", action="store_true")
    p.add_argument("--prefix", default="predict")
    _add_common(p)
    p.set_defaults(func=run_predict)

    p = add_parser("compare", help="fit both ways and compare posteriors")
    p.add_argument("--input", required=True)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--burn", type=int, default=1000)
    p.add_argument("--mcmc-q", type=int, default=None,
                   help="Q for the MCMC side (default: same as --q)")
    _add_common(p)
    p.set_defaults(func=run_compare)

    p = add_parser("init-study", help="per-iteration RMSE for three init modes")
    p.add_argument("--scenario", default="init-study")
    p.add_argument("--n-seeds", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=run_init_study)

    p = add_parser("benchmark", help="VI vs MCMC wall-time table")
    p.add_argument("--group", choices=["small", "large"], required=True)
    p.add_argument("--q-list", default="1,2")
    p.add_argument("--smoke", action="store_true",
                   help="reduced-iteration mode (100 Gibbs iterations per chain)")
    _add_common(p, with_fit=False)
    p.set_defaults(func=run_benchmark)

    if config_defaults:
        # string defaults are re-parsed by argparse with each flag's type,
        # so config values get the same conversion as command-line values;
        # explicit flags still override because they are parsed afterwards
        for p in subparsers:
            known = {a.dest for a in p._actions}
            p.set_defaults(**{k: v for k, v in config_defaults.items()
                              if k in known})
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    config_defaults = None
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            config_defaults = _read_config_file(cfg_path)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    parser = build_parser(config_defaults)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except analysis.DimensionMismatchError as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except vi.DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
