"""Spectral clustering of areas driven by external covariates.

Builds a kernel similarity between each area's covariate values and the
direct estimates, sparsifies it into a k-nearest-neighbour graph, embeds the
areas with the eigenvectors of the unnormalized Laplacian and runs k-means in
the embedding. The resulting partition defines the block Laplacian used by
the smoothing matrix of the model.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExternalCovariates:
    """Covariates ``x_star`` (m x p*), mixing weights and kernel bandwidth."""

    x_star: np.ndarray
    alpha: np.ndarray | None = None
    sigma2_s: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.x_star, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] == 0:
            raise ValueError("x_star must be an m x p matrix with p >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("external covariates contain non-finite values")
        p = x.shape[1]
        alpha = np.full(p, 1.0 / p) if self.alpha is None else np.asarray(self.alpha, dtype=float)
        if alpha.shape != (p,):
            raise ValueError(f"alpha has {alpha.size} entries for {p} covariates")
        if np.any(alpha < 0) or not np.isclose(alpha.sum(), 1.0, atol=1e-10):
            raise ValueError("alpha must be nonnegative and sum to 1")
        if not self.sigma2_s > 0:
            raise ValueError("sigma2_s must be positive")
        object.__setattr__(self, "x_star", x)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma2_s", float(self.sigma2_s))

    @property
    def m(self) -> int:
        return self.x_star.shape[0]

    def subset(self, columns) -> "ExternalCovariates":
        """Covariates restricted to ``columns`` with equal mixing weights."""
        cols = list(columns)
        return ExternalCovariates(self.x_star[:, cols], None, self.sigma2_s)


@dataclass(frozen=True)
class SimilarityGraph:
    weights: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray


@dataclass(frozen=True)
class Clustering:
    """Partition of areas with labels ``1..C`` in the input area order."""

    assignment: np.ndarray
    sizes: np.ndarray = field(init=False)
    total_wss: float = float("nan")

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("assignment must be a nonempty 1-d array")
        C = int(a.max())
        if a.min() < 1:
            raise ValueError("cluster labels must start at 1")
        sizes = np.bincount(a, minlength=C + 1)[1:]
        if np.any(sizes == 0):
            raise ValueError(f"cluster(s) {list(np.flatnonzero(sizes == 0) + 1)} are empty")
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def m(self) -> int:
        return len(self.assignment)

    def members(self, c: int) -> np.ndarray:
        """Area indices (ascending) of cluster ``c`` (1-based)."""
        return np.flatnonzero(self.assignment == c)

    def blocks(self) -> list[np.ndarray]:
        return [self.members(c) for c in range(1, self.n_clusters + 1)]

    @classmethod
    def single(cls, m: int) -> "Clustering":
        return cls(np.ones(m, dtype=int))


def similarity(y: np.ndarray, cov: ExternalCovariates) -> np.ndarray:
    """Per-covariate kernel matrices, shape (p*, m, m).

    ``S[k, i, j] = exp(-(y_j - x*_ik)^2 / (2 sigma2_s))``. The kernel compares
    the covariate of area i with the direct estimate of area j, so each
    ``S[k]`` is in general not symmetric.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (cov.m,):
        raise ValueError(f"y has length {y.size}, covariates have {cov.m} rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("direct estimates contain non-finite values")
    diff = y[None, None, :] - cov.x_star.T[:, :, None]
    return np.exp(-(diff**2) / (2.0 * cov.sigma2_s))


def knn_graph(sim: np.ndarray, cov: ExternalCovariates, k_neighbors: int) -> SimilarityGraph:
    """Symmetric k-nearest-neighbour graph on the combined similarity.

    The combined kernel ``sum_k alpha_k S_k`` is symmetrized as
    ``(eta + eta.T) / 2``. An edge (i, j) is kept when j is among the
    ``k_neighbors`` most similar areas of i or vice versa; ties are broken by
    lower area index.
    """
    eta = np.tensordot(cov.alpha, sim, axes=1)
    eta = 0.5 * (eta + eta.T)
    m = eta.shape[0]
    if not 1 <= k_neighbors < m:
        raise ValueError(f"k_neighbors must be in [1, {m - 1}], got {k_neighbors}")
    score = eta.copy()
    np.fill_diagonal(score, -np.inf)
    # stable sort on the negated score keeps lower indices first among ties
    order = np.argsort(-score, axis=1, kind="stable")[:, :k_neighbors]
    keep = np.zeros((m, m), dtype=bool)
    keep[np.repeat(np.arange(m), k_neighbors), order.ravel()] = True
    keep |= keep.T
    np.fill_diagonal(keep, False)
    W = np.where(keep, eta, 0.0)
    degree = W.sum(axis=1)
    if np.any(degree <= 0):
        warnings.warn(
            f"{int(np.sum(degree <= 0))} area(s) have zero degree in the similarity graph",
            stacklevel=2,
        )
    return SimilarityGraph(weights=W, degree=degree, laplacian=np.diag(degree) - W)


def canonical_labels(raw: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered 1..C by first appearance."""
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(order.size, dtype=int)
    relabel[order] = np.arange(1, order.size + 1)
    return relabel[np.searchsorted(np.unique(raw), raw)]


def spectral_embedding(graph: SimilarityGraph, C: int) -> np.ndarray:
    """Eigenvectors of the C smallest Laplacian eigenvalues, sign-fixed."""
    _, vecs = np.linalg.eigh(graph.laplacian)
    U = vecs[:, :C].copy()
    for j in range(C):
        nz = np.flatnonzero(np.abs(U[:, j]) > 1e-12)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return U


def spectral_assign(graph: SimilarityGraph, C: int, seed: int = 0, max_retries: int = 10) -> Clustering:
    """k-means on the spectral embedding; labels canonicalized by first occurrence."""
    m = graph.laplacian.shape[0]
    if not 1 <= C <= m:
        raise ValueError(f"number of clusters must be in [1, {m}], got {C}")
    if C == 1:
        return Clustering(np.ones(m, dtype=int))
    if C == m:
        return Clustering(np.arange(1, m + 1))
    U = spectral_embedding(graph, C)
    for attempt in range(max_retries):
        km = KMeans(
            n_clusters=C,
            init="k-means++",
            n_init=10,
            max_iter=300,
            algorithm="lloyd",
            random_state=seed + attempt,
        )
        with warnings.catch_warnings():
            # duplicate embedding rows trigger a convergence warning, handled below
            warnings.simplefilter("ignore")
            raw = km.fit_predict(U)
        if np.unique(raw).size == C:
            return Clustering(canonical_labels(raw))
        logger.info("k-means produced an empty cluster; retry %d", attempt + 1)
    raise RuntimeError(f"k-means returned an empty cluster after {max_retries} attempts")


def block_laplacian(clustering: Clustering) -> np.ndarray:
    """``L_SC`` in area order: ``n_c - 1`` on the diagonal, ``-1`` within clusters."""
    a = clustering.assignment
    same = (a[:, None] == a[None, :]).astype(float)
    return np.diag(clustering.sizes[a - 1].astype(float)) - same


def total_wss(y: np.ndarray, clustering: Clustering) -> float:
    """Total within-cluster sum of squared deviations from the cluster mean."""
    y = np.asarray(y, dtype=float)
    idx = clustering.assignment - 1
    means = np.bincount(idx, weights=y) / clustering.sizes
    return float(np.sum((y - means[idx]) ** 2))


def cluster_areas(
    y: np.ndarray,
    cov: ExternalCovariates,
    clusters: int,
    k_neighbors: int | None = None,
    seed: int = 0,
) -> Clustering:
    """Full pipeline: similarity, kNN graph, spectral assignment and WSS."""
    m = cov.m
    if clusters in (1, m):
        base = Clustering.single(m) if clusters == 1 else Clustering(np.arange(1, m + 1))
    else:
        k = clusters if k_neighbors is None else k_neighbors
        graph = knn_graph(similarity(y, cov), cov, min(k, m - 1))
        base = spectral_assign(graph, clusters, seed=seed)
    return Clustering(base.assignment, total_wss=total_wss(y, base))


def sweep_clusters(y, cov: ExternalCovariates, C_grid, covariate_subsets=None, k_neighbors=None, seed=0):
    """Total WSS for every (covariate subset, C) combination.

    Returns a list of dicts with keys ``subset``, ``C`` and ``total_wss``.
    A non-monotone WSS in C is only logged since k-means is a heuristic.
    """
    if covariate_subsets is None:
        covariate_subsets = [tuple(range(cov.x_star.shape[1]))]
    C_grid = list(C_grid)
    if not C_grid or not covariate_subsets:
        raise ValueError("sweep grids must be nonempty")
    rows = []
    for subset, C in itertools.product(covariate_subsets, C_grid):
        sub = ExternalCovariates(cov.x_star[:, list(subset)], None, cov.sigma2_s)
        res = cluster_areas(y, sub, C, k_neighbors=k_neighbors, seed=seed)
        rows.append({"subset": list(map(int, subset)), "C": int(C), "total_wss": res.total_wss})
    for subset in covariate_subsets:
        wss = [r["total_wss"] for r in rows if r["subset"] == list(map(int, subset))]
        if np.any(np.diff(wss) > 1e-12) and list(C_grid) == sorted(C_grid):
            logger.warning("total WSS not monotone in C for covariates %s", subset)
    return rows
