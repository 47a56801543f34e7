"""Area-level direct estimation from household microdata.

Hajek ratio estimates of a binary indicator per area, their design variance,
and generalized variance function (GVF) smoothing on the log scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GVF_VARIANTS = ("GVF1", "GVF2", "CONST")


@dataclass(frozen=True)
class Microdata:
    """Household records: area id, binary outcome and design weight."""

    area_id: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        area_id = np.asarray(self.area_id).astype(str)
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if not (area_id.shape == y.shape == w.shape) or y.ndim != 1:
            raise ValueError("area_id, y and w must be 1-d arrays of equal length")
        if y.size == 0:
            raise ValueError("microdata has no records")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            bad = area_id[~(np.isfinite(w) & (w > 0))]
            raise ValueError(f"nonpositive sample weight in area {bad[0]!r}")
        if not np.all(np.isin(y, (0.0, 1.0))):
            bad = area_id[~np.isin(y, (0.0, 1.0))]
            raise ValueError(f"outcome must be 0/1; area {bad[0]!r} has another value")
        object.__setattr__(self, "area_id", area_id)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class DirectEstimates:
    """Per-area direct estimates, sorted by ``area_id``."""

    area_id: np.ndarray
    y: np.ndarray
    raw_var: np.ndarray
    n: np.ndarray
    nhat: np.ndarray

    @property
    def m(self) -> int:
        return len(self.area_id)


@dataclass(frozen=True)
class GvfModel:
    variant: str
    coefficients: np.ndarray
    residual_mse: float


def hajek_direct(micro: Microdata) -> DirectEstimates:
    """Hajek estimate of the area proportion and its design variance.

    For area i with households h, ``nhat_i = sum_h w_ih``,
    ``y_i = sum_h w_ih y_ih / nhat_i`` and
    ``var_i = sum_h w_ih (w_ih - 1) (y_ih - y_i)^2 / nhat_i^2``.
    """
    areas, inverse = np.unique(micro.area_id, return_inverse=True)
    m = len(areas)
    n = np.bincount(inverse, minlength=m)
    if np.any(n == 0):
        raise ValueError(f"area {areas[np.argmin(n)]!r} has no records")
    nhat = np.bincount(inverse, weights=micro.w, minlength=m)
    y = np.bincount(inverse, weights=micro.w * micro.y, minlength=m) / nhat
    dev2 = (micro.y - y[inverse]) ** 2
    raw_var = np.bincount(inverse, weights=micro.w * (micro.w - 1.0) * dev2, minlength=m)
    raw_var = raw_var / nhat**2
    # weights below one give w(w-1) < 0; the estimator is not defined for them
    raw_var = np.maximum(raw_var, 0.0)
    return DirectEstimates(area_id=areas, y=y, raw_var=raw_var, n=n, nhat=nhat)


def gvf_design(y: np.ndarray, n: np.ndarray, variant: str) -> np.ndarray:
    """Regressors of the log-variance model.

    GVF1 uses intercept, y, sqrt(n) and y*sqrt(n); GVF2 drops the interaction;
    CONST is intercept only.
    """
    y = np.asarray(y, dtype=float)
    sn = np.sqrt(np.asarray(n, dtype=float))
    one = np.ones_like(y)
    if variant == "GVF1":
        return np.column_stack([one, y, sn, y * sn])
    if variant == "GVF2":
        return np.column_stack([one, y, sn])
    if variant == "CONST":
        return one[:, None]
    raise ValueError(f"unknown GVF variant {variant!r}; expected one of {GVF_VARIANTS}")


def fit_gvf(direct: DirectEstimates, variant: str = "GVF2", floor: float | None = 1e-8) -> GvfModel:
    """Ordinary least squares of ``log(raw_var)`` on the variant's regressors.

    Zero variances (areas whose households all share the outcome) are floored
    at ``floor`` with a warning. With ``floor=None`` they are rejected.
    """
    raw = np.asarray(direct.raw_var, dtype=float)
    zero = raw <= 0
    if np.any(zero):
        ids = list(np.asarray(direct.area_id)[zero])
        if floor is None:
            raise ValueError(f"zero direct variance in areas {ids}; cannot take logs")
        warnings.warn(
            f"flooring {len(ids)} zero direct variance(s) at {floor:g}: {ids[:5]}",
            stacklevel=2,
        )
        raw = np.where(zero, floor, raw)
    X = gvf_design(direct.y, direct.n, variant)
    if X.shape[0] <= X.shape[1]:
        raise ValueError(f"{variant} needs more than {X.shape[1]} areas, got {X.shape[0]}")
    z = np.log(raw)
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    resid = z - X @ coef
    return GvfModel(variant=variant, coefficients=coef, residual_mse=float(np.mean(resid**2)))


def smooth_variances(model: GvfModel, direct: DirectEstimates) -> np.ndarray:
    """Smoothed variances ``D_i = exp(fitted log variance)``; no bias correction."""
    X = gvf_design(direct.y, direct.n, model.variant)
    if X.shape[1] != len(model.coefficients):
        raise ValueError(
            f"model has {len(model.coefficients)} coefficients, design has {X.shape[1]} columns"
        )
    return np.exp(X @ model.coefficients)


def select_gvf(direct: DirectEstimates, variants=("GVF1", "GVF2"), floor: float | None = 1e-8):
    """Fit each variant and return ``(best, all_models)`` by residual MSE."""
    models = [fit_gvf(direct, v, floor=floor) for v in variants]
    best = min(models, key=lambda g: g.residual_mse)
    for g in models:
        logger.info("GVF %s residual mse %.5f", g.variant, g.residual_mse)
    return best, models
