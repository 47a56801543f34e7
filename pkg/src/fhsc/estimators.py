"""Point estimates, benchmarking by posterior projection, and CPMSE.

A benchmarked value is the closest point to ``theta`` on ``{W t = p}`` in the
metric induced by ``A_rho``:

    theta_B = theta + A^-1 W' (W A^-1 W')^-1 (p - W theta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .cluster import Clustering
from .model import apply_A_inv, gamma_weight
from .sampler import DrawStore


@dataclass(frozen=True)
class BenchmarkConstraint:
    """Linear constraint ``W theta = p`` with ``W`` of full row rank."""

    W: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if p.shape != (W.shape[0],):
            raise ValueError(f"W has {W.shape[0]} rows but p has {p.size} entries")
        if W.shape[0] > W.shape[1] or np.linalg.matrix_rank(W) < W.shape[0]:
            raise ValueError("benchmark matrix W must have full row rank k <= m")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "p", p)

    @classmethod
    def scalar(cls, w, p: float) -> "BenchmarkConstraint":
        return cls(np.asarray(w, dtype=float)[None, :], np.array([p]))

    @property
    def m(self) -> int:
        return self.W.shape[1]


def _blocks(assignment) -> list[np.ndarray]:
    if assignment is None:
        return None
    return Clustering(np.asarray(assignment)).blocks()


def apply_A_inv_areas(v: np.ndarray, rho: float, blocks=None) -> np.ndarray:
    """``A^-1 v`` over all areas; ``blocks=None`` means a single cluster."""
    v = np.asarray(v, dtype=float)
    if rho == 1.0:
        return v.copy()
    if blocks is None:
        return apply_A_inv(v, rho)
    out = np.empty_like(v)
    for idx in blocks:
        out[idx] = apply_A_inv(v[idx], rho)
    return out


def ergodic_mean(draws: DrawStore) -> np.ndarray:
    """Average of the smoothed-parameter draws."""
    return draws.theta_fhsc.mean(axis=0)


def rb_estimate(draws: DrawStore) -> np.ndarray:
    """Rao-Blackwell estimate: average of the per-draw conditional means."""
    cm = draws.cond_mean_fhsc
    if cm is None or not np.all(np.isfinite(cm)):
        raise ValueError("draw store lacks per-draw conditional means")
    return cm.mean(axis=0)


def project_draw(theta, rho: float, constraint: BenchmarkConstraint, blocks=None) -> np.ndarray:
    """Project ``theta`` onto ``W t = p`` in the ``A_rho`` metric.

    Parameters
    ----------
    theta : array_like, shape (m,)
    rho : float
    constraint : BenchmarkConstraint
    blocks : list of index arrays, optional
        Cluster membership; a single cluster when omitted.
    """
    theta = np.asarray(theta, dtype=float)
    return _project_rows(theta[None, :], rho, constraint, blocks)[0]


def _checked_metric(W, AW) -> np.ndarray:
    """``W A^-1 W'``, rejected when numerically singular relative to ``W W'``."""
    M = W @ AW
    M = 0.5 * (M + M.T)
    scale = np.linalg.eigvalsh(W @ W.T).max()
    if not np.linalg.eigvalsh(M).min() > 1e-13 * scale:
        raise ValueError("W A^-1 W' is numerically singular; check the rank of W and rho")
    return M


def _project_rows(X, rho: float, constraint: BenchmarkConstraint, blocks) -> np.ndarray:
    """:func:`project_draw` applied to every row of ``X`` at a shared rho."""
    W, p = constraint.W, constraint.p
    AW = apply_A_inv_areas(W.T, rho, blocks)
    M = _checked_metric(W, AW)
    out = X + np.linalg.solve(M, p[:, None] - W @ X.T).T @ AW.T
    # one refinement step recovers the accuracy lost when W A^-1 W' is ill-conditioned
    return out + np.linalg.solve(M, p[:, None] - W @ out.T).T @ AW.T


def rb_benchmarked(draws: DrawStore, constraint: BenchmarkConstraint) -> np.ndarray:
    """Average over draws of the projected conditional means, each at its own rho."""
    blocks = draws.blocks()
    cm = draws.cond_mean_fhsc
    rho = draws.rho
    out = np.zeros(cm.shape[1])
    # draws sharing a rho value (always the case when rho is fixed) share one projector
    for r in np.unique(rho):
        sel = rho == r
        out += _project_rows(cm[sel], float(r), constraint, blocks).sum(axis=0)
    return out / cm.shape[0]


def projected_draws(draws: DrawStore, constraint: BenchmarkConstraint, source: str = "theta_fhsc") -> np.ndarray:
    """Every stored draw of ``source`` projected with its own rho."""
    blocks = draws.blocks()
    x = getattr(draws, source)
    out = np.empty_like(x)
    for r in np.unique(draws.rho):
        sel = draws.rho == r
        out[sel] = _project_rows(x[sel], float(r), constraint, blocks)
    return out


def rho_point(draws: DrawStore, how: str = "mean") -> float:
    if how == "mean":
        return float(np.mean(draws.rho))
    if how == "median":
        return float(np.median(draws.rho))
    raise ValueError("rho summary must be 'mean' or 'median'")


def benchmark_point(estimate, rho_hat: float, constraint: BenchmarkConstraint, blocks=None) -> np.ndarray:
    """Plug-in projection of a point estimate at a single ``rho_hat``."""
    if not 0.0 < rho_hat <= 1.0:
        raise ValueError("rho_hat must lie in (0, 1]")
    return project_draw(estimate, rho_hat, constraint, blocks)


def scalar_benchmark_coefficients(w, rho: float, assignment) -> np.ndarray:
    """Correction vector ``a`` with ``theta_B = theta + a (p - w' theta)``.

    ``a = A^-1 w / (w' A^-1 w)``. Within cluster c the numerator is
    ``gamma_c w_c + (1 - gamma_c) mean(w_c)``; the denominator pools all
    clusters so the constraint holds exactly.
    """
    w = np.asarray(w, dtype=float)
    Aw = apply_A_inv_areas(w, rho, _blocks(assignment))
    denom = float(w @ Aw)
    if denom == 0.0:
        raise ValueError("benchmark weights are all zero")
    return Aw / denom


def cluster_benchmark_coefficients(w, rho: float, assignment) -> np.ndarray:
    """Per-cluster coefficients with a cluster-local denominator.

    ``a_c = (gamma_c w_c + (1 - gamma_c) wbar_c 1) /
    (gamma_c sum w_c^2 + (1 - gamma_c) n_c wbar_c^2)``. Equal to
    :func:`scalar_benchmark_coefficients` when there is one cluster.
    """
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    for idx in _blocks(assignment):
        wc = w[idx]
        g = gamma_weight(rho, idx.size)
        wbar = wc.mean()
        denom = g * np.sum(wc * wc) + (1.0 - g) * idx.size * wbar**2
        if denom == 0.0:
            raise ValueError("benchmark weights are all zero in a cluster")
        out[idx] = (g * wc + (1.0 - g) * wbar) / denom
    return out


def cpmse(draws: DrawStore, theta_hat, theta_hat_b=None) -> np.ndarray:
    """Conditional posterior mean square error per area.

    ``mean_l V_l + mean_l (E_l - theta_hat)^2``, plus ``(theta_hat_b - theta_hat)^2``
    for a benchmarked estimate.
    """
    cm, cv = draws.cond_mean_fhsc, draws.cond_var_fhsc
    if cm is None or cv is None:
        raise ValueError("draw store lacks per-draw conditional moments")
    theta_hat = np.asarray(theta_hat, dtype=float)
    base = cv.mean(axis=0) + np.mean((cm - theta_hat) ** 2, axis=0)
    if theta_hat_b is None:
        return base
    return (np.asarray(theta_hat_b) - theta_hat) ** 2 + base


def pmse(draws: DrawStore, ergodic, ergodic_b) -> np.ndarray:
    """Squared benchmarking gap plus the marginal posterior variance of the draws."""
    gap = np.asarray(ergodic_b, dtype=float) - np.asarray(ergodic, dtype=float)
    return gap**2 + draws.theta_fhsc.var(axis=0)


def coefficient_of_variation(estimate, cpmse_values) -> np.ndarray:
    """``sqrt(CPMSE) / estimate``; NaN where the estimate is zero."""
    est = np.asarray(estimate, dtype=float)
    root = np.sqrt(np.asarray(cpmse_values, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(est != 0.0, root / np.where(est != 0.0, est, 1.0), np.nan)


def standardized_residuals(y, D, estimate) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise ValueError("sampling variances must be positive")
    return (np.asarray(y, dtype=float) - np.asarray(estimate, dtype=float)) / np.sqrt(D)


def credible_intervals(samples: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Equal-tailed empirical quantiles over the draw axis."""
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [tail, 1.0 - tail], axis=0)
    return lo, hi


def estimate_table(
    draws: DrawStore,
    y,
    D,
    constraint: BenchmarkConstraint | None = None,
    area_id=None,
    rho_summary: str = "mean",
    level: float = 0.95,
):
    """Per-area estimates and uncertainty, plus a summary dict.

    Returns
    -------
    table : pandas.DataFrame
    summary : dict
        Includes the benchmark slack ``max |W theta_B - p|`` of the
        Rao-Blackwell benchmarked estimate.
    """
    m = draws.theta_fhsc.shape[1]
    area_id = np.arange(m).astype(str) if area_id is None else np.asarray(area_id).astype(str)
    erg = ergodic_mean(draws)
    rb = rb_estimate(draws)
    cp = cpmse(draws, rb)
    lo, hi = credible_intervals(draws.theta_fhsc, level)
    cols = {
        "area_id": area_id,
        "ergodic_mean": erg,
        "rb_estimate": rb,
        "cpmse": cp,
        "cv": coefficient_of_variation(rb, cp),
        "standardized_residual": standardized_residuals(y, D, rb),
        "lower": lo,
        "upper": hi,
    }
    summary = {"rho_mean": float(np.mean(draws.rho)), "rho_median": float(np.median(draws.rho))}
    if constraint is not None:
        rbb = rb_benchmarked(draws, constraint)
        cpb = cpmse(draws, rb, rbb)
        rho_hat = rho_point(draws, rho_summary)
        erg_b = benchmark_point(erg, rho_hat, constraint, draws.blocks())
        proj = projected_draws(draws, constraint)
        lob, hib = credible_intervals(proj, level)
        cols.update(
            rb_benchmarked=rbb,
            cpmse_benchmarked=cpb,
            pmse_benchmarked=pmse(draws, erg, erg_b),
            cv_benchmarked=coefficient_of_variation(rbb, cpb),
            ergodic_benchmarked=erg_b,
            lower_benchmarked=lob,
            upper_benchmarked=hib,
        )
        summary.update(
            rho_hat=rho_hat,
            benchmark_slack=float(np.max(np.abs(constraint.W @ rbb - constraint.p))),
        )
    return pd.DataFrame(cols), summary
