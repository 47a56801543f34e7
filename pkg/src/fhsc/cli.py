"""Command line interface: ``fhsc direct|cluster|fit|simulate``.

Settings come from built-in defaults, then an optional TOML file (section
named after the command), then command-line flags. Exit codes: 0 success,
2 invalid input, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import io
from .cluster import ExternalCovariates, cluster_areas, sweep_clusters
from .estimators import BenchmarkConstraint, estimate_table
from .model import VARIANT_NAMES, ModelVariant
from .sampler import AreaData, McmcConfig, Priors, run_chains
from .selection import selection_report
from .sim import FHScenario, FHSCScenario, run_fh_study, run_fhsc_study
from .survey import fit_gvf, hajek_direct, select_gvf, smooth_variances

logger = logging.getLogger("fhsc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "direct": {"gvf": "auto", "floor": 1e-8},
    "cluster": {
        "clusters": 3,
        "k_neighbors": None,
        "alpha": None,
        "sigma2_s": 1.0,
        "seed": 0,
        "sweep": None,
    },
    "fit": {
        "variant": "FH-SC1",
        "chains": 2,
        "iters": 50000,
        "burn_in": 10000,
        "thin": 4,
        "seed": 0,
        "kappa": 0.5,
        "rho_target": "projected",
        "gamma_hat": None,
        "ridge": 1e-8,
        "rho_prior": [1.1, 1.1],
        "precision_prior": [1.0, 1.0],
        "intercept": True,
        "benchmark": None,
        "target": None,
        "rho_summary": "mean",
    },
    "simulate": {
        "study": "fh",
        "m": None,
        "reps": None,
        "cor": 0.2,
        "rho": 0.1,
        "beta1_rule": "printed",
        "seed": 2024,
        "fast": True,
        "iters": None,
        "burn_in": None,
        "chains": 2,
    },
}


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fhsc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="TOML file with per-command settings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("direct", help="direct estimates and GVF-smoothed variances from microdata")
    p.add_argument("microdata", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--gvf", choices=["GVF1", "GVF2", "auto"])
    p.add_argument("--floor", type=float, help="floor for zero direct variances before the log")

    p = sub.add_parser("cluster", help="spectral clustering of areas")
    p.add_argument("direct", type=Path)
    p.add_argument("covariates", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--clusters", type=int)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--alpha", type=_float_list, help="comma separated mixing weights")
    p.add_argument("--sigma2-s", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sweep", type=_int_list, help="comma separated cluster counts for the WSS sweep")

    p = sub.add_parser("fit", help="MCMC fit, estimates, benchmarking and model selection")
    p.add_argument("direct", type=Path)
    p.add_argument("covariates", type=Path)
    p.add_argument("clustering", type=Path, nargs="?")
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.add_argument("--variant", choices=[v.lower() for v in VARIANT_NAMES] + list(VARIANT_NAMES))
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--kappa", type=float, help="initial SD of the log-scale rho proposal")
    p.add_argument("--rho-target", choices=["projected", "likelihood"])
    p.add_argument("--gamma-hat", type=float)
    p.add_argument("--ridge", type=float)
    p.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
    p.add_argument("--benchmark", type=Path, help="CSV area_id,w of benchmark weights")
    p.add_argument("--target", type=float, help="benchmark total p in w'theta = p")
    p.add_argument("--rho-summary", choices=["mean", "median"])

    p = sub.add_parser("simulate", help="Monte Carlo studies")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--study", choices=["fh", "fhsc"])
    p.add_argument("--m", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--cor", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--beta1-rule", choices=["printed", "standard"])
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burn-in", type=int)
    speed = p.add_mutually_exclusive_group()
    speed.add_argument("--fast", dest="fast", action="store_const", const=True)
    speed.add_argument("--full", dest="fast", action="store_const", const=False)
    return parser


def effective_settings(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    if args.config is not None:
        with open(args.config, "rb") as fh:
            cfg = tomllib.load(fh)
        section = cfg.get(command, {})
        unknown = set(section) - set(settings)
        if unknown:
            raise io.InputError(f"unknown setting(s) in [{command}]: {sorted(unknown)}")
        settings.update(section)
    for key in settings:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    for key, val in settings.items():
        if isinstance(val, Path):
            settings[key] = str(val)
    return settings


# --------------------------------------------------------------------------
# commands


def cmd_direct(args, s: dict) -> None:
    micro = io.read_microdata(args.microdata)
    direct = hajek_direct(micro)
    floor = s["floor"]
    if s["gvf"] == "auto":
        model, models = select_gvf(direct, floor=floor)
    else:
        model = fit_gvf(direct, s["gvf"], floor=floor)
        models = [model]
    D = smooth_variances(model, direct)
    io.write_table(io.direct_frame(direct, D), args.out)
    meta = io.run_metadata("direct", s)
    meta["gvf"] = {
        g.variant: {"coefficients": g.coefficients, "residual_mse": g.residual_mse} for g in models
    }
    meta["gvf_selected"] = model.variant
    io.write_json(meta, args.out.with_suffix(".json"))


def cmd_cluster(args, s: dict) -> None:
    direct = io.read_direct(args.direct)
    ids, xs, cols = io.read_covariates(args.covariates)
    io.check_same_areas(direct["area_id"], ids, str(args.covariates))
    cov = ExternalCovariates(xs, s["alpha"], s["sigma2_s"])
    y = direct["y"].to_numpy(float)
    res = cluster_areas(y, cov, s["clusters"], s["k_neighbors"], seed=s["seed"])
    io.write_table(pd.DataFrame({"area_id": direct["area_id"], "cluster": res.assignment}), args.out)
    grid = s["sweep"] or [s["clusters"]]
    subsets = [tuple(range(len(cols)))] + ([(j,) for j in range(len(cols))] if len(cols) > 1 else [])
    sweep = sweep_clusters(y, cov, grid, subsets, s["k_neighbors"], seed=s["seed"])
    for row in sweep:
        row["covariates"] = [cols[j] for j in row["subset"]]
    side = io.run_metadata("cluster", s, {"kmeans": s["seed"]})
    side.update(sizes=res.sizes, total_wss=res.total_wss, sweep=sweep, covariates=cols)
    io.write_json(side, args.out.with_suffix(".json"))


def cmd_fit(args, s: dict) -> None:
    direct = io.read_direct(args.direct)
    ids = direct["area_id"].to_numpy(str)
    cov_ids, xs, cols = io.read_covariates(args.covariates)
    io.check_same_areas(ids, cov_ids, str(args.covariates))
    X = np.column_stack([np.ones(len(ids)), xs]) if s["intercept"] else xs
    variant = ModelVariant.from_name(s["variant"], gamma_hat=s["gamma_hat"], ridge=s["ridge"])
    clustering = None
    if args.clustering is not None:
        cl_ids, clustering = io.read_clustering(args.clustering)
        io.check_same_areas(ids, cl_ids, str(args.clustering))
    elif variant.name != "FH":
        raise io.InputError(f"variant {variant.name} needs a clustering file")
    data = AreaData(direct["y"].to_numpy(float), direct["D"].to_numpy(float), X, clustering, ids)
    config = McmcConfig(
        total_iters=s["iters"],
        burn_in=s["burn_in"],
        thin=s["thin"],
        chains=s["chains"],
        seed=s["seed"],
        kappa_init=s["kappa"],
        rho_target=s["rho_target"],
    )
    priors = Priors(tuple(s["rho_prior"]), tuple(s["precision_prior"]))
    constraint = None
    if (s["benchmark"] is None) != (s["target"] is None):
        raise io.InputError("--benchmark and --target must be given together")
    if s["benchmark"] is not None:
        w_ids, w = io.read_weights(s["benchmark"])
        io.check_same_areas(ids, w_ids, str(s["benchmark"]))
        constraint = BenchmarkConstraint.scalar(w, s["target"])

    store = run_chains(data, variant, priors, config)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    store.save(out / "draws")
    table, summary = estimate_table(store, data.y, data.D, constraint, ids, s["rho_summary"])
    io.write_table(table, out / "estimates.csv")
    rows = selection_report(store, data.y, data.D, constraint, seed=s["seed"])
    summary.update(acceptance_rate=store.acceptance_rate, covariates=cols)
    io.write_json({"selection": rows, "summary": summary}, out / "selection.json")
    io.write_json(io.run_metadata("fit", s, {"mcmc": s["seed"], "chains": store.metadata["chain_seeds"]}),
                  out / "metadata.json")


def cmd_simulate(args, s: dict) -> None:
    kw = {"total_iters": s["iters"], "burn_in": s["burn_in"]}
    kw = {k: v for k, v in kw.items() if v is not None}
    mcmc = McmcConfig.fast(chains=s["chains"], **kw) if s["fast"] else McmcConfig(chains=s["chains"], **kw)
    if s["study"] == "fh":
        scen = FHScenario(
            m=s["m"] or 50,
            reps=s["reps"] or (25 if s["fast"] else 100),
            cor=s["cor"],
            beta1_rule=s["beta1_rule"],
            seed=s["seed"],
            mcmc=mcmc,
        )
        report = run_fh_study(scen)
    else:
        scen = FHSCScenario(
            m=s["m"] or 100,
            reps=s["reps"] or (25 if s["fast"] else 100),
            rho=s["rho"],
            seed=s["seed"],
            mcmc=mcmc,
        )
        report = run_fhsc_study(scen)
    io.write_table(report.to_frame(), args.out)
    series = pd.DataFrame({f"diff_{k}": v for k, v in report.diff_series.items()})
    series.insert(0, "area", np.arange(len(series)))
    io.write_table(series, args.out.with_name(args.out.stem + "_diff.csv"))
    io.write_json(io.run_metadata("simulate", s, {"scenario": s["seed"]}), args.out.with_suffix(".json"))


COMMANDS = {"direct": cmd_direct, "cluster": cmd_cluster, "fit": cmd_fit, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = effective_settings(args.command, args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, settings)
    except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        print(f"fhsc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        # LinAlgError subclasses ValueError, so it is caught first
        print(f"fhsc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError, tomllib.TOMLDecodeError) as exc:
        print(f"fhsc: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
