"""Monte Carlo studies of CPMSE accuracy and clustering gains.

Two designs are provided:

* an FH study, where data follow the classical area-level model with one
  covariate and the benchmarked FH estimator is evaluated, and
* an FH-SC study, where data follow the clustered model with a known
  three-cluster partition and FH and FH-SC1 fits are compared.

Replicate ``r`` of a scenario with seed ``s`` draws its data from
``SeedSequence([s, r])``, so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .cluster import Clustering, canonical_labels
from .estimators import BenchmarkConstraint, apply_A_inv_areas, cpmse, rb_benchmarked, rb_estimate
from .model import ModelVariant
from .sampler import AreaData, McmcConfig, Priors, n_workers, run_chains

logger = logging.getLogger(__name__)


def _design_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2**31 - 1, tag]))


def _rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def _rep_mcmc_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep, 1]).generate_state(1)[0])


@dataclass(frozen=True)
class FHScenario:
    """Classical area-level design with ``D`` equally spaced on ``D_range``.

    ``beta1_rule="printed"`` uses ``sqrt(12 (Dbar + s2) / (1 - cor^2))``;
    ``"standard"`` multiplies the numerator by ``cor^2`` so that the
    population correlation of x and y equals ``cor``.
    """

    m: int = 50
    reps: int = 100
    cor: float = 0.2
    beta0: float = 1.0
    sigma2: float = 0.25
    D_range: tuple[float, float] = (0.1, 1.0)
    beta1_rule: str = "printed"
    seed: int = 2024
    mcmc: McmcConfig = field(default_factory=McmcConfig.fast)
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if self.m < 3 or self.reps < 1:
            raise ValueError("need m >= 3 and at least one replicate")
        if self.sigma2 < 0 or not 0 <= self.cor < 1:
            raise ValueError("need sigma2 >= 0 and 0 <= cor < 1")
        if self.beta1_rule not in ("printed", "standard"):
            raise ValueError("beta1_rule must be 'printed' or 'standard'")
        if not 0 <= self.D_range[0] < self.D_range[1]:
            raise ValueError("D_range must be strictly increasing and nonnegative")

    @property
    def D(self) -> np.ndarray:
        return np.linspace(self.D_range[0], self.D_range[1], self.m)

    @property
    def beta1(self) -> float:
        num = 12.0 * (self.D.mean() + self.sigma2)
        if self.beta1_rule == "standard":
            num *= self.cor**2
        return float(np.sqrt(num / (1.0 - self.cor**2)))

    def covariate(self) -> np.ndarray:
        """Fixed across replicates for a given (seed, m)."""
        return _design_rng(self.seed, self.m).uniform(0.0, 1.0, self.m)


@dataclass(frozen=True)
class FHSCScenario:
    """Clustered design: three near-equal clusters and a synthetic covariate.

    The sampling variances and benchmark weights are drawn once per seed and
    held fixed across replicates.
    """

    m: int = 100
    reps: int = 25
    rho: float = 0.1
    beta: tuple[float, float] = (0.5, -0.01)
    sigma2_u: float = 7.0
    clusters: int = 3
    x_range: tuple[float, float] = (0.0, 40.0)
    D_range: tuple[float, float] = (0.004, 0.036)
    target: float = 0.418
    seed: int = 2024
    mcmc: McmcConfig = field(default_factory=McmcConfig.fast)
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.clusters < 1 or self.m < 2 * self.clusters:
            raise ValueError("need at least two areas per cluster")
        if self.sigma2_u < 0 or self.D_range[0] <= 0:
            raise ValueError("variances must be positive")

    def design(self):
        """``(X, D, clustering, w)`` shared by all replicates."""
        rng = _design_rng(self.seed, self.m)
        x = rng.uniform(*self.x_range, self.m)
        D = rng.uniform(*self.D_range, self.m)
        labels = np.array_split(rng.permutation(self.m), self.clusters)
        assignment = np.empty(self.m, dtype=int)
        for c, idx in enumerate(labels):
            assignment[idx] = c + 1
        # population shares: lognormal sizes normalized to one
        size = rng.lognormal(mean=0.0, sigma=1.0, size=self.m)
        w = size / size.sum()
        X = np.column_stack([np.ones(self.m), x])
        return X, D, Clustering(canonical_labels(assignment)), w


def generate_fh_dataset(scenario: FHScenario, rep: int):
    """Data and true ``theta`` of one replicate of the FH study."""
    rng = _rep_rng(scenario.seed, rep)
    x = scenario.covariate()
    D = scenario.D
    theta = scenario.beta0 + scenario.beta1 * x + np.sqrt(scenario.sigma2) * rng.standard_normal(scenario.m)
    y = theta + np.sqrt(D) * rng.standard_normal(scenario.m)
    X = np.column_stack([np.ones(scenario.m), x])
    return y, D, X, theta


def generate_fhsc_dataset(scenario: FHSCScenario, rep: int, design=None):
    """One replicate: ``theta ~ N(X beta, s2 I)`` and ``y ~ N(A^-1 theta, D)``.

    Returns ``(AreaData, theta_fhsc_true, w)``.
    """
    X, D, clustering, w = design or scenario.design()
    rng = _rep_rng(scenario.seed, rep)
    theta = X @ np.asarray(scenario.beta) + np.sqrt(scenario.sigma2_u) * rng.standard_normal(scenario.m)
    truth = apply_A_inv_areas(theta, scenario.rho, clustering.blocks())
    y = truth + np.sqrt(D) * rng.standard_normal(scenario.m)
    return AreaData(y, D, X, clustering), truth, w


@dataclass
class SimReport:
    """Per-estimator averages and per-area CPMSE minus MSE series."""

    rows: list
    diff_series: dict
    failed: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)


def evaluate_replicates(estimates, cpmses, truths) -> dict:
    """Monte Carlo MSE and mean CPMSE per area, and their area averages.

    Parameters
    ----------
    estimates, cpmses, truths : ndarray, shape (reps, m)

    Returns
    -------
    dict
        ``mse``, ``cpmse`` and ``diff`` per area; ``mse_avg``, ``cpmse_avg``,
        ``abs_diff_avg``; and ``aad``/``asd``, the replicate averages of the
        mean absolute and mean squared errors.
    """
    est = np.asarray(estimates, dtype=float)
    err = est - np.asarray(truths, dtype=float)
    mse = np.mean(err**2, axis=0)
    cp = np.mean(np.asarray(cpmses, dtype=float), axis=0)
    return {
        "mse": mse,
        "cpmse": cp,
        "diff": cp - mse,
        "mse_avg": float(mse.mean()),
        "cpmse_avg": float(cp.mean()),
        "abs_diff_avg": float(abs(cp.mean() - mse.mean())),
        "aad": float(np.mean(np.abs(err))),
        "asd": float(np.mean(err**2)),
    }


def _fh_replicate(scenario: FHScenario, rep: int):
    y, D, X, theta = generate_fh_dataset(scenario, rep)
    data = AreaData(y, D, X)
    config = replace(scenario.mcmc, seed=_rep_mcmc_seed(scenario.seed, rep))
    store = run_chains(data, ModelVariant.from_name("FH"), scenario.priors, config)
    constraint = BenchmarkConstraint.scalar(np.full(scenario.m, 1.0 / scenario.m), theta.mean())
    rb = rb_estimate(store)
    rbb = rb_benchmarked(store, constraint)
    return theta, {"FH": (rb, cpmse(store, rb)), "FH-B": (rbb, cpmse(store, rb, rbb))}


def _fhsc_replicate(scenario: FHSCScenario, rep: int, design):
    data, truth, w = generate_fhsc_dataset(scenario, rep, design)
    constraint = BenchmarkConstraint.scalar(w, scenario.target)
    config = replace(scenario.mcmc, seed=_rep_mcmc_seed(scenario.seed, rep))
    out = {}
    for name in ("FH", "FH-SC1"):
        fit_data = data if name == "FH-SC1" else AreaData(data.y, data.D, data.X)
        store = run_chains(fit_data, ModelVariant.from_name(name), scenario.priors, config)
        rb = rb_estimate(store)
        rbb = rb_benchmarked(store, constraint)
        out[name] = (rb, cpmse(store, rb))
        out[name + "-B"] = (rbb, cpmse(store, rb, rbb))
        out[name + "-rho"] = float(store.rho.mean())
    return truth, out


def _safe(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # one bad replicate must not sink the study
        logger.warning("replicate failed: %s", exc)
        return None


def _collect(results, labels, scenario_fields: dict) -> SimReport:
    ok = [r for r in results if r is not None]
    failed = len(results) - len(ok)
    if not ok:
        raise RuntimeError("every replicate failed")
    rows, series = [], {}
    truths = np.array([r[0] for r in ok])
    for name in labels:
        ev = evaluate_replicates([r[1][name][0] for r in ok], [r[1][name][1] for r in ok], truths)
        row = dict(scenario_fields, estimator=name, reps_ok=len(ok), failed=failed)
        row.update({k: v for k, v in ev.items() if np.isscalar(v)})
        rows.append(row)
        series[name] = ev["diff"]
    return SimReport(rows, series, failed)


def run_fh_study(scenario: FHScenario) -> SimReport:
    """Replicates of the FH study; reports the FH and benchmarked FH estimators."""
    jobs = n_workers(scenario.reps)
    results = Parallel(n_jobs=jobs)(delayed(_safe)(_fh_replicate, scenario, r) for r in range(scenario.reps))
    fields = {"study": "fh", "m": scenario.m, "cor": scenario.cor}
    return _collect(results, ("FH", "FH-B"), fields)


def run_fhsc_study(scenario: FHSCScenario) -> SimReport:
    """Replicates of the clustered study; FH and FH-SC1 with and without benchmarking."""
    design = scenario.design()
    jobs = n_workers(scenario.reps)
    results = Parallel(n_jobs=jobs)(
        delayed(_safe)(_fhsc_replicate, scenario, r, design) for r in range(scenario.reps)
    )
    fields = {"study": "fhsc", "m": scenario.m, "rho": scenario.rho}
    report = _collect(results, ("FH", "FH-SC1", "FH-B", "FH-SC1-B"), fields)
    ok = [r for r in results if r is not None]
    rho_hat = float(np.mean([r[1]["FH-SC1-rho"] for r in ok]))
    for row in report.rows:
        row["rho_hat_fhsc1"] = rho_hat
    return report
