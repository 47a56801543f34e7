"""Model comparison by DIC and expected predictive deviance (EPD)."""

from __future__ import annotations

import numpy as np

from .estimators import BenchmarkConstraint, projected_draws, rb_benchmarked, rb_estimate
from .sampler import DrawStore


def _check_D(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise ValueError("sampling variances must be positive")
    return D


def dic(draws: np.ndarray, y, D, point_estimate) -> float:
    """``2 mean_l sum_j (y - theta_l)^2 / D - sum_j (y - theta_hat)^2 / D``."""
    D = _check_D(D)
    y = np.asarray(y, dtype=float)
    dev = np.sum((y - np.asarray(draws)) ** 2 / D, axis=1)
    return float(2.0 * dev.mean() - np.sum((y - np.asarray(point_estimate)) ** 2 / D))


def posterior_predictive_draw(theta_b, D, rng: np.random.Generator) -> np.ndarray:
    """One replicate ``y_j ~ N(theta_j, D_j)`` per area."""
    D = np.asarray(D, dtype=float)
    return np.asarray(theta_b, dtype=float) + np.sqrt(D) * rng.standard_normal(D.shape)


def epd(draws: np.ndarray, y, D, measure: str, rng: np.random.Generator) -> float:
    """Expected predictive deviance with one predictive replicate per draw.

    ``measure`` is ``"AAD"`` (sum of absolute deviations) or ``"ASD"``
    (sum of squared deviations), averaged over draws.
    """
    D = np.asarray(D, dtype=float)
    draws = np.asarray(draws, dtype=float)
    ytilde = draws + np.sqrt(D) * rng.standard_normal(draws.shape)
    resid = np.asarray(y, dtype=float) - ytilde
    if measure == "AAD":
        return float(np.mean(np.sum(np.abs(resid), axis=1)))
    if measure == "ASD":
        return float(np.mean(np.sum(resid * resid, axis=1)))
    raise ValueError("measure must be 'AAD' or 'ASD'")


def selection_report(
    store: DrawStore,
    y,
    D,
    constraint: BenchmarkConstraint | None = None,
    seed: int = 0,
) -> list[dict]:
    """DIC and EPD rows for the unbenchmarked and (optionally) benchmarked fit."""
    D = _check_D(D)
    rng = np.random.default_rng(seed)
    name = store.variant.name
    rows = []
    theta = store.theta_fhsc
    rows.append(
        {
            "variant": name,
            "benchmarked": False,
            "dic": dic(theta, y, D, rb_estimate(store)),
            "epd_asd": epd(theta, y, D, "ASD", rng),
            "epd_aad": epd(theta, y, D, "AAD", rng),
        }
    )
    if constraint is not None:
        proj = projected_draws(store, constraint)
        rows.append(
            {
                "variant": name,
                "benchmarked": True,
                "dic": dic(proj, y, D, rb_benchmarked(store, constraint)),
                "epd_asd": epd(proj, y, D, "ASD", rng),
                "epd_aad": epd(proj, y, D, "AAD", rng),
            }
        )
    return rows
