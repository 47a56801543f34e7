"""Model family, smoothing matrix and closed-form conditional moments.

Within cluster c the smoothing matrix is ``A = I + ((1 - rho) / rho) L_c``
with ``L_c = n_c I - 1 1'``. Its inverse has the compound-symmetric form
``gamma_c I + ((1 - gamma_c) / n_c) 1 1'`` with
``gamma_c = rho / ((1 - rho) n_c + rho)``, so products with ``A`` and ``A^-1``
cost O(n_c).

The prior covariance of the cluster parameter ``theta_c`` is always of the
form ``sigma2 * (b I + a 1 1')``:

============================  =====  ======
random-effect structure        a      b
============================  =====  ======
identity                       0      1
common effect (plus ridge)     1      ridge
cluster plus area              g      1
============================  =====  ======

which also commutes with ``A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

VARIANT_NAMES = ("FH", "FH-C1", "FH-C2", "FH-SC1", "FH-SC2", "FH-SC3")

_TABLE = {
    # name: (beta_sharing, variance_sharing, z_structure, rho_mode)
    "FH": ("common", "common", "identity", "fixed_1"),
    "FH-C1": ("common", "per_cluster", "common_effect", "fixed_1"),
    "FH-C2": ("per_cluster", "per_cluster", "cluster_plus_area", "fixed_1"),
    "FH-SC1": ("common", "common", "identity", "free"),
    "FH-SC2": ("common", "per_cluster", "common_effect", "free"),
    "FH-SC3": ("per_cluster", "per_cluster", "cluster_plus_area", "free"),
}


@dataclass(frozen=True)
class ModelVariant:
    """One row of the model table.

    Parameters
    ----------
    name : str
        One of ``FH``, ``FH-C1``, ``FH-C2``, ``FH-SC1``, ``FH-SC2``, ``FH-SC3``.
    gamma_hat : float, optional
        Known ratio of cluster-effect to area-effect variance. Required by the
        cluster-plus-area variants.
    ridge : float
        Relative ridge added to the rank-one common-effect covariance so it
        can be inverted.
    """

    name: str
    beta_sharing: str
    variance_sharing: str
    z_structure: str
    rho_mode: str
    gamma_hat: float | None = None
    ridge: float = 1e-8

    @classmethod
    def from_name(cls, name: str, gamma_hat: float | None = None, ridge: float = 1e-8) -> "ModelVariant":
        key = name.upper()
        if key not in _TABLE:
            raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANT_NAMES}")
        beta, var, z, rho = _TABLE[key]
        if z == "cluster_plus_area":
            if gamma_hat is None or not gamma_hat > 0:
                raise ValueError(f"{key} needs a positive gamma_hat")
        if not ridge > 0:
            raise ValueError("ridge must be positive")
        return cls(key, beta, var, z, rho, None if gamma_hat is None else float(gamma_hat), float(ridge))

    @property
    def rho_free(self) -> bool:
        return self.rho_mode == "free"

    @property
    def prior_shape(self) -> tuple[float, float]:
        """Coefficients ``(a, b)`` of the covariance ``sigma2 (b I + a 1 1')``."""
        if self.z_structure == "identity":
            return 0.0, 1.0
        if self.z_structure == "common_effect":
            return 1.0, self.ridge
        return float(self.gamma_hat), 1.0


# --------------------------------------------------------------------------
# smoothing matrix


def check_rho(rho: float) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return rho


def gamma_weight(rho: float, n: int | np.ndarray) -> float | np.ndarray:
    """Cluster smoothing weight ``rho / ((1 - rho) n + rho)``."""
    rho = check_rho(rho)
    return rho / ((1.0 - rho) * np.asarray(n, dtype=float) + rho)


def apply_A_inv(v: np.ndarray, rho: float) -> np.ndarray:
    """``A^-1 v`` for a single cluster; works column-wise on matrices."""
    v = np.asarray(v, dtype=float)
    g = gamma_weight(rho, v.shape[0])
    return g * v + (1.0 - g) * v.mean(axis=0)


def apply_A(v: np.ndarray, rho: float) -> np.ndarray:
    """``A v`` for a single cluster; works column-wise on matrices."""
    v = np.asarray(v, dtype=float)
    rho = check_rho(rho)
    n = v.shape[0]
    return v + ((1.0 - rho) / rho) * (n * v - v.sum(axis=0))


def smoothing_matrix(rho: float, n: int) -> np.ndarray:
    """Dense ``A = I + ((1 - rho)/rho) (n I - 1 1')``."""
    rho = check_rho(rho)
    return np.eye(n) + ((1.0 - rho) / rho) * (n * np.eye(n) - np.ones((n, n)))


def smoothing_inverse(rho: float, n: int) -> np.ndarray:
    """Dense ``A^-1 = gamma I + ((1 - gamma)/n) 1 1'``."""
    g = gamma_weight(rho, n)
    return g * np.eye(n) + ((1.0 - g) / n) * np.ones((n, n))


def logdet_A_inv(rho: float, n: int) -> float:
    """``log|A^-1| = (n - 1) log gamma``; eigenvalues are 1 and gamma."""
    return (n - 1) * float(np.log(gamma_weight(rho, n)))


def apply_blocks(fn, v: np.ndarray, rho: float, blocks) -> np.ndarray:
    """Apply a per-cluster operator to an area-indexed vector or matrix."""
    out = np.empty_like(np.asarray(v, dtype=float))
    for idx in blocks:
        out[idx] = fn(v[idx], rho)
    return out


# --------------------------------------------------------------------------
# compound-symmetric prior covariance


def prior_covariance(n: int, sigma2: float, a: float, b: float) -> np.ndarray:
    return sigma2 * (b * np.eye(n) + a * np.ones((n, n)))


def prior_precision_apply(v: np.ndarray, sigma2: float, a: float, b: float) -> np.ndarray:
    """``[sigma2 (b I + a 1 1')]^-1 v`` in O(n), column-wise."""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    return (v - (a / (b + a * n)) * v.sum(axis=0)) / (sigma2 * b)


def prior_quadratic(r: np.ndarray, a: float, b: float) -> float:
    """``r' (b I + a 1 1')^-1 r``; the scale-free sum of squares."""
    r = np.asarray(r, dtype=float)
    n = r.shape[0]
    s = r.sum()
    return float((r @ r - (a / (b + a * n)) * s * s) / b)


def prior_logdet(n: int, sigma2: float, a: float, b: float) -> float:
    return n * float(np.log(sigma2 * b)) + float(np.log1p(a * n / b))


def random_effect_covariance(Z: np.ndarray, G: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """``Z G Z'`` plus an optional ridge scaled by the largest diagonal of G."""
    S = Z @ G @ Z.T
    if ridge:
        S = S + ridge * float(np.max(np.diag(G))) * np.eye(S.shape[0])
    return S


# --------------------------------------------------------------------------
# conditional moments


@dataclass(frozen=True)
class ClusterBlock:
    y: np.ndarray
    D: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        D = np.asarray(self.D, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if D.shape != y.shape or X.shape[0] != y.shape[0]:
            raise ValueError("y, D and X have inconsistent dimensions")
        if np.any(D <= 0):
            raise ValueError("sampling variances must be positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class ConditionalMoments:
    mean_theta: np.ndarray
    cov_theta: np.ndarray
    mean_fhsc: np.ndarray
    cov_fhsc: np.ndarray


def safe_cholesky(P: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor, falling back to eigenvalue clipping."""
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(0.5 * (P + P.T))
        w = np.maximum(w, floor * max(1.0, float(np.max(np.abs(w)))))
        _, R = np.linalg.qr((U * np.sqrt(w)).T)
        R = R * np.sign(np.diag(R))[:, None]
        return R.T


def conditional_precision(block: ClusterBlock, prior_cov: np.ndarray, rho: float) -> np.ndarray:
    """``A^-1 D^-1 A^-1 + Sigma^-1``, the inverse of the conditional covariance."""
    Ainv = smoothing_inverse(rho, block.n)
    Sinv = np.linalg.inv(prior_cov)
    return (Ainv / block.D) @ Ainv + 0.5 * (Sinv + Sinv.T)


def conditional_moments(block: ClusterBlock, delta: np.ndarray, prior_cov: np.ndarray, rho: float) -> ConditionalMoments:
    """Normal full conditional of ``theta_c`` and of ``A^-1 theta_c``.

    With ``y_c ~ N(A^-1 theta_c, D_c)`` and ``theta_c ~ N(X_c delta, Sigma_c)``,

    .. math::

        V = (A^{-1} D^{-1} A^{-1} + \\Sigma^{-1})^{-1}, \\quad
        E = V (A^{-1} D^{-1} y + \\Sigma^{-1} X \\delta).

    The smoothed parameter has mean ``A^-1 E`` and covariance ``A^-1 V A^-1``.

    Parameters
    ----------
    block : ClusterBlock
    delta : ndarray
        Fixed-effect coefficients for this cluster.
    prior_cov : ndarray
        Positive definite ``Sigma_c = Z G Z'``.
    rho : float

    Returns
    -------
    ConditionalMoments
    """
    S = np.asarray(prior_cov, dtype=float)
    try:
        cS = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("prior covariance Z G Z' is singular; add a ridge") from exc
    Ainv = smoothing_inverse(rho, block.n)
    P = (Ainv / block.D) @ Ainv + scipy.linalg.cho_solve(cS, np.eye(block.n))
    P = 0.5 * (P + P.T)
    rhs = Ainv @ (block.y / block.D) + scipy.linalg.cho_solve(cS, block.X @ np.asarray(delta, dtype=float))
    L = safe_cholesky(P)
    V = scipy.linalg.cho_solve((L, True), np.eye(block.n))
    V = 0.5 * (V + V.T)
    E = V @ rhs
    cov_fhsc = Ainv @ V @ Ainv
    return ConditionalMoments(E, V, Ainv @ E, 0.5 * (cov_fhsc + cov_fhsc.T))


def fh_conditional(y, D, X, beta, sigma2):
    """Classical Fay-Herriot shrinkage: mean and variance of ``theta | y``.

    ``E = g y + (1 - g) X beta`` and ``V = g D`` with ``g = sigma2 / (sigma2 + D)``.
    """
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    g = sigma2 / (sigma2 + D)
    return g * y + (1.0 - g) * (np.asarray(X) @ np.asarray(beta)), g * D


def fhsc_mean_decomposition(mean_theta: np.ndarray, rho: float) -> np.ndarray:
    """``gamma E + (1 - gamma) mean(E) 1``: trade-off between area and cluster average."""
    m = np.asarray(mean_theta, dtype=float)
    g = gamma_weight(rho, m.shape[0])
    return g * m + (1.0 - g) * m.mean()


def scalar_variance_decomposition(cov_theta: np.ndarray, rho: float) -> np.ndarray:
    """Published scalar form ``gamma V_jj + (1 - gamma^2) mean_j V_jj``.

    Reported for comparison only. It differs from the exact diagonal of
    ``A^-1 V A^-1`` (see :func:`sandwich_diagonal`) except at ``rho = 1``.
    """
    d = np.diag(np.asarray(cov_theta, dtype=float))
    g = gamma_weight(rho, d.shape[0])
    return g * d + (1.0 - g) * (1.0 + g) * d.mean()


def sandwich_diagonal(cov_theta: np.ndarray, rho: float) -> np.ndarray:
    """Exact ``diag(A^-1 V A^-1)`` without forming the product."""
    V = np.asarray(cov_theta, dtype=float)
    n = V.shape[0]
    g = gamma_weight(rho, n)
    h = (1.0 - g) / n
    return g * g * np.diag(V) + 2.0 * g * h * V.sum(axis=1) + h * h * V.sum()
