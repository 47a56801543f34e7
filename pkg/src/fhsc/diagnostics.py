"""Convergence diagnostics for pooled chains."""

from __future__ import annotations

import numpy as np


def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction factor of one scalar.

    Parameters
    ----------
    chains : ndarray, shape (n_chains, n_draws)

    Returns
    -------
    float
        ``sqrt(var_plus / W)`` after splitting each chain in half. A constant
        trace gives 1.0.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("need an (n_chains, n_draws) array with at least 4 draws per chain")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    W = parts.var(axis=1, ddof=1).mean()
    B = n * parts.mean(axis=1).var(ddof=1)
    if W == 0.0:
        return 1.0 if B == 0.0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def store_rhat(store) -> dict:
    """Split R-hat of every scalar parameter (rho, sigma2, delta) in a store."""
    out = {}
    if np.ptp(store.rho) > 0:
        out["rho"] = split_rhat(store.by_chain("rho"))
    for name in ("sigma2", "delta"):
        arr = store.by_chain(name)
        for j in range(arr.shape[2]):
            out[f"{name}[{j}]"] = split_rhat(arr[:, :, j])
    return out
