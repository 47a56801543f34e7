import numpy as np
import pytest

import fhsc.sampler as _sampler
from fhsc.estimators import BenchmarkConstraint, cpmse, rb_benchmarked, rb_estimate

# Every fit made during the session passes through this wrapper, which checks
# the CPMSE structure on the resulting draws (acceptance criterion 7). It is
# installed before any test module imports ``run_chains``. Fits run inside
# worker processes (SAE_THREADS > 1) are not recorded.
CPMSE_RUNS = []
ACCEPTANCE_LINES = {}
_run_chains = _sampler.run_chains


def cpmse_structure(store) -> dict:
    rb = rb_estimate(store)
    m = rb.size
    w = np.full(m, 1.0 / m)
    rbb = rb_benchmarked(store, BenchmarkConstraint.scalar(w, w @ rb + 0.05))
    base = cpmse(store, rb)
    bench = cpmse(store, rb, rbb)
    return {
        "variant": store.variant.name,
        "m": m,
        "gap_error": float(np.max(np.abs(bench - base - (rbb - rb) ** 2))),
        "above_variance": float(np.min(base - store.cond_var_fhsc.mean(axis=0))),
        "min_cpmse": float(min(base.min(), bench.min())),
    }


def _recording_run_chains(*args, **kwargs):
    store = _run_chains(*args, **kwargs)
    CPMSE_RUNS.append(cpmse_structure(store))
    return store


_sampler.run_chains = _recording_run_chains

from fhsc.cluster import Clustering  # noqa: E402
from fhsc.model import ModelVariant  # noqa: E402
from fhsc.sampler import AreaData, McmcConfig, Priors, run_chains  # noqa: E402


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_collection_modifyitems(items):
    # the CPMSE audit must see every fit of the session, so it runs last
    last = [it for it in items if it.get_closest_marker("after_all")]
    items[:] = [it for it in items if not it.get_closest_marker("after_all")] + last


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def clustered_data():
    """Synthetic clustered area data, m = 24 in three clusters."""
    rng = np.random.default_rng(7)
    m = 24
    assignment = np.repeat([1, 2, 3], 8)
    rng.shuffle(assignment)
    X = np.column_stack([np.ones(m), rng.uniform(0, 1, m)])
    D = rng.uniform(0.01, 0.05, m)
    theta = X @ np.array([0.3, 0.4]) + 0.2 * rng.standard_normal(m)
    y = theta + np.sqrt(D) * rng.standard_normal(m)
    return AreaData(y, D, X, Clustering(assignment))


@pytest.fixture(scope="session")
def short_config():
    return McmcConfig(total_iters=1500, burn_in=500, thin=2, chains=2, seed=3)


@pytest.fixture(scope="session")
def sc1_store(clustered_data, short_config):
    return run_chains(clustered_data, ModelVariant.from_name("FH-SC1"), Priors(), short_config)
