"""Adaptive Metropolis-within-Gibbs sampler for the model family.

Each iteration updates, in order, the smoothing parameter ``rho`` (random
walk on ``log rho``), the cluster parameters ``theta`` (exact normal
conditional), the fixed effects and the variance components. The step size
of the ``rho`` walk is tuned in windows during burn-in and frozen afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed

from .cluster import Clustering
from .model import ModelVariant

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence.spawn"


@dataclass(frozen=True)
class Priors:
    """Beta prior on rho and Gamma(shape, rate) priors on each precision."""

    rho_beta: tuple[float, float] = (1.1, 1.1)
    precision_gamma: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if min(self.rho_beta) <= 0 or min(self.precision_gamma) <= 0:
            raise ValueError("prior hyperparameters must be positive (proper priors)")


@dataclass(frozen=True)
class McmcConfig:
    """Run length, thinning, seeding and adaptation settings.

    ``kappa_init`` is the standard deviation of the log-scale proposal.
    ``rho_target`` selects the conditional used for the ``rho`` update:
    ``"projected"`` holds the smoothed parameter fixed, ``"likelihood"`` holds
    ``theta`` fixed; both leave the posterior invariant.
    """

    total_iters: int = 50000
    burn_in: int = 10000
    thin: int = 4
    chains: int = 2
    seed: int = 0
    kappa_init: float = 0.5
    adapt_window: int = 100
    adapt_low: float = 0.40
    adapt_high: float = 0.60
    adapt_factor: float = 1.1
    rho_init: float = 0.5
    rho_target: str = "projected"

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iters:
            raise ValueError("burn-in must be nonnegative and smaller than the total iterations")
        if self.thin < 1 or self.chains < 1 or self.adapt_window < 1:
            raise ValueError("thin, chains and adapt_window must be at least 1")
        if not 0 < self.adapt_low < self.adapt_high < 1:
            raise ValueError("need 0 < adapt_low < adapt_high < 1")
        if not (self.kappa_init > 0 and self.adapt_factor > 1):
            raise ValueError("kappa_init must be positive and adapt_factor above 1")
        if not 0 < self.rho_init < 1:
            raise ValueError("rho_init must lie in (0, 1)")
        if self.rho_target not in ("projected", "likelihood"):
            raise ValueError("rho_target must be 'projected' or 'likelihood'")

    @classmethod
    def fast(cls, **kw) -> "McmcConfig":
        kw.setdefault("total_iters", 10000)
        kw.setdefault("burn_in", 2000)
        return cls(**kw)

    @property
    def draws_per_chain(self) -> int:
        return len(range(self.burn_in, self.total_iters, self.thin))


@dataclass(frozen=True)
class AreaData:
    """Direct estimates, sampling variances, covariates and clustering."""

    y: np.ndarray
    D: np.ndarray
    X: np.ndarray
    clustering: Clustering | None = None
    area_id: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        D = np.asarray(self.D, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        m = y.size
        if y.ndim != 1 or D.shape != (m,) or X.shape[0] != m:
            raise ValueError("y, D and X must describe the same areas")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(D)) and np.all(np.isfinite(X))):
            raise ValueError("area data contain non-finite values")
        if np.any(D <= 0):
            raise ValueError("sampling variances D must be positive")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise ValueError("design matrix X is rank deficient")
        clustering = self.clustering or Clustering.single(m)
        if clustering.m != m:
            raise ValueError("clustering does not match the number of areas")
        area_id = np.arange(m).astype(str) if self.area_id is None else np.asarray(self.area_id).astype(str)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "clustering", clustering)
        object.__setattr__(self, "area_id", area_id)

    @property
    def m(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class DrawStore:
    """Thinned post-burn-in draws pooled over chains (chain-major order)."""

    variant: ModelVariant
    theta: np.ndarray
    theta_fhsc: np.ndarray
    delta: np.ndarray
    sigma2: np.ndarray
    rho: np.ndarray
    cond_mean_fhsc: np.ndarray
    cond_var_fhsc: np.ndarray
    chain: np.ndarray
    assignment: np.ndarray
    window_acceptance: np.ndarray
    acceptance_rate: np.ndarray
    kappa_final: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    @property
    def n_chains(self) -> int:
        return int(self.chain.max()) + 1

    def blocks(self) -> list[np.ndarray]:
        return Clustering(self.assignment).blocks()

    def by_chain(self, name: str) -> np.ndarray:
        """Draws of ``name`` reshaped to (chains, draws_per_chain, ...)."""
        x = getattr(self, name)
        return x.reshape((self.n_chains, -1) + x.shape[1:])

    _ARRAYS = (
        "theta", "theta_fhsc", "delta", "sigma2", "rho", "cond_mean_fhsc", "cond_var_fhsc",
        "chain", "assignment", "window_acceptance", "acceptance_rate", "kappa_final",
    )

    def save(self, path) -> None:
        """Write ``<path>.npz`` with the arrays and ``<path>.json`` with metadata."""
        path = os.fspath(path)
        base = path[:-4] if path.endswith(".npz") else path
        np.savez_compressed(base + ".npz", **{k: getattr(self, k) for k in self._ARRAYS})
        meta = dict(self.metadata, variant=asdict(self.variant))
        with open(base + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def load(cls, path) -> "DrawStore":
        path = os.fspath(path)
        base = path[:-4] if path.endswith(".npz") else path
        with np.load(base + ".npz") as z:
            arrays = {k: z[k] for k in cls._ARRAYS}
        with open(base + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        variant = ModelVariant(**meta.pop("variant"))
        return cls(variant=variant, metadata=meta, **arrays)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def n_workers(requested: int | None = None) -> int:
    """Worker cap from ``SAE_THREADS`` (default 1)."""
    cap = int(os.environ.get("SAE_THREADS", "1") or 1)
    return max(1, min(cap, requested or cap))


# --------------------------------------------------------------------------
# chain state and individual updates


@dataclass
class ChainState:
    theta: np.ndarray
    theta_fhsc: np.ndarray
    delta: np.ndarray  # (C, p); rows identical when beta is shared
    sigma2: np.ndarray  # (C,); entries identical when the variance is shared
    rho: float
    kappa: float
    accepted: int = 0
    proposed: int = 0
    mu: np.ndarray | None = None  # X delta in model order, refreshed after each delta update


class _Model:
    """Vectorized per-cluster bookkeeping for one fit.

    Areas are held internally in cluster-sorted order so cluster sums are a
    single ``reduceat``. Given ``(delta, sigma2, rho)`` the smoothed
    parameter ``phi = A^-1 theta`` has prior precision ``A Sigma^-1 A``, which
    is compound symmetric, hence the conditional precision of ``phi`` is
    ``diag(q) + beta 1 1'`` within each cluster and every update is O(m).
    """

    def __init__(self, data: AreaData, variant: ModelVariant, priors: Priors, rho_target: str = "projected"):
        self.data = data
        self.variant = variant
        self.priors = priors
        self.rho_target = rho_target
        lab = data.clustering.assignment - 1
        self.order = np.argsort(lab, kind="stable")
        self.inverse = np.argsort(self.order)
        self.lab = lab[self.order]
        self.C = data.clustering.n_clusters
        self.ns = data.clustering.sizes.astype(float)
        self.starts = np.concatenate([[0], np.cumsum(data.clustering.sizes)[:-1]])
        self.y = data.y[self.order]
        self.D = data.D[self.order]
        self.X = data.X[self.order]
        self.a, self.b = variant.prior_shape
        self.shrink = self.a / (self.b + self.a * self.ns)  # Sigma^-1 = (I - shrink 1 1') / (sigma2 b)
        self.XtX = np.stack([self.X[i].T @ self.X[i] for i in self._slices()])
        self.Xsum = self.csum(self.X)
        self.Xsum_outer = np.einsum("ci,cj->cij", self.Xsum, self.Xsum)
        self.common_beta = variant.beta_sharing == "common"
        self.common_var = variant.variance_sharing == "common"
        if not self.common_beta:
            for c, i in enumerate(self._slices()):
                if np.linalg.matrix_rank(self.X[i]) < self.X.shape[1]:
                    raise ValueError(
                        f"cluster {c + 1} design is rank deficient; per-cluster fixed effects "
                        f"need at least {self.X.shape[1]} areas with independent covariates"
                    )

    def _slices(self):
        ends = np.append(self.starts[1:], self.lab.size)
        return [slice(s, e) for s, e in zip(self.starts, ends)]

    def csum(self, v):
        return np.add.reduceat(v, self.starts, axis=0)

    def cmean(self, v):
        s = self.csum(v)
        return s / self.ns.reshape((-1,) + (1,) * (s.ndim - 1))

    def gammas(self, rho):
        return rho / ((1.0 - rho) * self.ns + rho)

    def A(self, v, rho):
        if rho == 1.0:
            return v
        k = (1.0 - rho) / rho
        return v + k * (self.ns[self.lab] * v - self.csum(v)[self.lab])

    def A_inv(self, v, rho):
        if rho == 1.0:
            return v
        g = self.gammas(rho)[self.lab]
        return g * v + (1.0 - g) * self.cmean(v)[self.lab]

    def mu(self, delta):
        return np.einsum("ij,ij->i", self.X, delta[self.lab])

    def quad(self, r):
        """Per-cluster ``r' (b I + a 1 1')^-1 r``."""
        return (self.csum(r * r) - self.shrink * self.csum(r) ** 2) / self.b

    # ---- theta ----------------------------------------------------------
    def phi_conditional(self, st: ChainState):
        """Diagonal part, rank-one weight and mean of the conditional of phi."""
        rho = st.rho
        g = self.gammas(rho)
        sb = st.sigma2 * self.b
        alpha = 1.0 / (g * g * sb)
        tau = 1.0 / (st.sigma2 * (self.b + self.a * self.ns))
        d = 1.0 / self.D
        q = d + alpha[self.lab]
        # 1 + beta * sum(1/q), written to avoid cancellation when alpha is large
        w_bar = self.cmean(d / q)
        denom = w_bar + (tau / alpha) * (1.0 - w_bar)
        beta = (tau - alpha) / self.ns
        coef = beta / denom  # Sherman-Morrison weight per cluster
        r = self.y * d + self.A(self.sigma_inv(st.mu, st.sigma2), rho)
        rq = r / q
        mean = rq - coef[self.lab] * self.csum(rq)[self.lab] / q
        return q, coef, denom, beta, mean

    def sigma_inv(self, v, sigma2):
        return (v - self.shrink[self.lab] * self.csum(v)[self.lab]) / (sigma2 * self.b)[self.lab]

    def draw_theta(self, st: ChainState, rng, record):
        if st.rho == 1.0 and self.a == 0.0:
            # independent areas: classical shrinkage, no cluster coupling
            inv_s2 = 1.0 / (st.sigma2[self.lab] if self.C > 1 else st.sigma2[0])
            q = 1.0 / self.D + inv_s2
            mean = (self.y / self.D + st.mu * inv_s2) / q
            st.theta = mean + rng.standard_normal(self.lab.size) / np.sqrt(q)
            st.theta_fhsc = st.theta
            return (mean, 1.0 / q) if record else (None, None)
        q, coef, denom, beta, mean = self.phi_conditional(st)
        eps = rng.standard_normal(self.lab.size)
        s = self.csum(1.0 / q)
        u = 1.0 / np.sqrt(q)
        c = (1.0 / np.sqrt(denom) - 1.0) / s
        phi = mean + u * (eps + c[self.lab] * u * self.csum(u * eps)[self.lab])
        st.theta_fhsc = phi
        st.theta = self.A(phi, st.rho)
        if not record:
            return None, None
        var = 1.0 / q - coef[self.lab] / (q * q)
        return mean, var

    # ---- rho ------------------------------------------------------------
    def log_rho_target(self, rho, st: ChainState) -> float:
        """Log conditional of rho up to a constant, without the Jacobian."""
        a, b = self.priors.rho_beta
        out = (a - 1.0) * np.log(rho) + (b - 1.0) * np.log1p(-rho)
        if self.rho_target == "projected":
            r = self.A(st.theta_fhsc, rho) - st.mu
            out -= 0.5 * np.sum(self.quad(r) / st.sigma2)
            out -= np.sum((self.ns - 1.0) * np.log(self.gammas(rho)))
        else:
            r = self.y - self.A_inv(st.theta, rho)
            out -= 0.5 * np.sum(r * r / self.D)
        return float(out)

    def mh_rho(self, st: ChainState, rng) -> bool:
        prop = st.rho * np.exp(st.kappa * rng.standard_normal())
        u = rng.uniform()
        st.proposed += 1
        if not 0.0 < prop < 1.0:
            return False
        log_ratio = self.log_rho_target(prop, st) - self.log_rho_target(st.rho, st)
        log_ratio += np.log(prop) - np.log(st.rho)
        if not np.isfinite(log_ratio):
            warnings.warn("non-finite rho acceptance ratio; proposal rejected", RuntimeWarning, stacklevel=2)
            return False
        if np.log(u) >= log_ratio:
            return False
        st.rho = float(prop)
        if self.rho_target == "projected":
            st.theta = self.A(st.theta_fhsc, prop)
        else:
            st.theta_fhsc = self.A_inv(st.theta, prop)
        st.accepted += 1
        return True

    # ---- fixed effects --------------------------------------------------
    def beta_moments(self, st: ChainState):
        """GLS precision pieces per cluster: ``X' Sigma^-1 X`` and ``X' Sigma^-1 theta``."""
        scale = 1.0 / (st.sigma2 * self.b)
        XSX = scale[:, None, None] * (self.XtX - self.shrink[:, None, None] * self.Xsum_outer)
        Xt = self.csum(self.X * st.theta[:, None])
        XSt = scale[:, None] * (Xt - self.shrink[:, None] * self.Xsum * self.csum(st.theta)[:, None])
        return XSX, XSt

    def draw_beta(self, st: ChainState, rng):
        XSX, XSt = self.beta_moments(st)
        if self.common_beta:
            XSX, XSt = XSX.sum(axis=0, keepdims=True), XSt.sum(axis=0, keepdims=True)
        Vb = np.linalg.inv(XSX)
        Vb = 0.5 * (Vb + np.swapaxes(Vb, 1, 2))
        L = np.linalg.cholesky(Vb)
        z = rng.standard_normal(XSt.shape)
        draw = np.einsum("kij,kj->ki", Vb, XSt) + np.einsum("kij,kj->ki", L, z)
        st.delta[:] = draw  # broadcasts the shared row when beta is common
        st.mu = self.mu(st.delta)

    # ---- variances ------------------------------------------------------
    def ssb(self, st: ChainState) -> np.ndarray:
        q = self.quad(st.theta - st.mu)
        if q.min() < 0:
            warnings.warn("negative sum of squares clamped to zero", RuntimeWarning, stacklevel=2)
            q = np.maximum(q, 0.0)
        return q

    def variance_shape_rate(self, st: ChainState):
        """Gamma shape and rate of each precision given the current state."""
        a0, b0 = self.priors.precision_gamma
        ssb = self.ssb(st)
        if self.common_var:
            return np.array([self.data.m / 2.0 + a0]), np.array([ssb.sum() / 2.0 + b0])
        extra = 0.5 if self.variant.z_structure == "cluster_plus_area" else 0.0
        return self.ns / 2.0 + extra + a0, ssb / 2.0 + b0

    def draw_sigma2(self, st: ChainState, rng):
        shape, rate = self.variance_shape_rate(st)
        st.sigma2[:] = 1.0 / rng.gamma(shape, 1.0 / rate)

    # ---- initial values -------------------------------------------------
    def initial_state(self, config: McmcConfig) -> ChainState:
        v0 = float(np.var(self.y)) if np.var(self.y) > 0 else 1.0
        p = self.X.shape[1]
        XVX = np.empty((self.C, p, p))
        XVy = np.empty((self.C, p))
        for c, i in enumerate(self._slices()):
            n = int(self.ns[c])
            V = np.diag(self.D[i]) + v0 * (self.b * np.eye(n) + self.a * np.ones((n, n)))
            VX = np.linalg.solve(V, self.X[i])
            XVX[c] = self.X[i].T @ VX
            XVy[c] = VX.T @ self.y[i]
        if self.common_beta:
            delta = np.tile(np.linalg.solve(XVX.sum(0), XVy.sum(0)), (self.C, 1))
        else:
            delta = np.linalg.solve(XVX, XVy[..., None])[..., 0]
        resid = self.y - self.mu(delta)
        s2 = max(float(np.mean(resid**2 - self.D)), 1e-6)
        rho = config.rho_init if self.variant.rho_free else 1.0
        theta = self.y.copy()
        st = ChainState(theta, self.A_inv(theta, rho), delta, np.full(self.C, s2), rho, config.kappa_init)
        st.mu = self.mu(delta)
        return st

    def packed_delta(self, st):
        return st.delta[0].copy() if self.common_beta else st.delta.ravel().copy()

    def packed_sigma2(self, st):
        return st.sigma2[:1].copy() if self.common_var else st.sigma2.copy()


def adapt_tuning(st: ChainState, config: McmcConfig) -> float:
    """Rescale kappa from the window acceptance rate and reset the counters."""
    rate = st.accepted / st.proposed if st.proposed else np.nan
    if rate < config.adapt_low:
        st.kappa /= config.adapt_factor
    elif rate > config.adapt_high:
        st.kappa *= config.adapt_factor
    st.accepted = 0
    st.proposed = 0
    return rate


def _run_chain(model: _Model, config: McmcConfig, seed_seq, chain_id: int):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    st = model.initial_state(config)
    nd = config.draws_per_chain
    m = model.data.m
    out = {
        "theta": np.empty((nd, m)),
        "theta_fhsc": np.empty((nd, m)),
        "cond_mean_fhsc": np.empty((nd, m)),
        "cond_var_fhsc": np.empty((nd, m)),
        "delta": np.empty((nd, model.packed_delta(st).size)),
        "sigma2": np.empty((nd, model.packed_sigma2(st).size)),
        "rho": np.empty(nd),
    }
    windows = []
    post_acc = post_prop = 0
    k = 0
    free = model.variant.rho_free
    for it in range(config.total_iters):
        keep = it >= config.burn_in and (it - config.burn_in) % config.thin == 0
        try:
            if free:
                acc = model.mh_rho(st, rng)
                if it >= config.burn_in:
                    post_acc += acc
                    post_prop += 1
            mean_f, var_f = model.draw_theta(st, rng, keep)
            model.draw_beta(st, rng)
            model.draw_sigma2(st, rng)
        except Exception as exc:
            raise RuntimeError(f"chain {chain_id} failed at iteration {it}: {exc}") from exc
        if free and (it + 1) % config.adapt_window == 0:
            if it < config.burn_in:
                windows.append(adapt_tuning(st, config))
            else:
                windows.append(st.accepted / max(st.proposed, 1))
                st.accepted = st.proposed = 0
        if keep:
            inv = model.inverse
            out["theta"][k] = st.theta[inv]
            out["theta_fhsc"][k] = st.theta_fhsc[inv]
            out["cond_mean_fhsc"][k] = mean_f[inv]
            out["cond_var_fhsc"][k] = var_f[inv]
            out["delta"][k] = model.packed_delta(st)
            out["sigma2"][k] = model.packed_sigma2(st)
            out["rho"][k] = st.rho
            k += 1
    rate = post_acc / post_prop if post_prop else np.nan
    return out, np.asarray(windows, dtype=float), rate, st.kappa


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_chains(
    data: AreaData,
    variant: ModelVariant,
    priors: Priors | None = None,
    config: McmcConfig | None = None,
) -> DrawStore:
    """Run independent chains and pool their thinned post-burn-in draws.

    Chain ``i`` uses the ``i``-th child of ``SeedSequence(config.seed)``, so
    the result does not depend on how chains are scheduled.
    """
    priors = priors or Priors()
    config = config or McmcConfig()
    model = _Model(data, variant, priors, config.rho_target)
    children = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = n_workers(config.chains)
    if jobs > 1:
        results = Parallel(n_jobs=jobs)(
            delayed(_run_chain)(model, config, s, i) for i, s in enumerate(children)
        )
    else:
        results = [_run_chain(model, config, s, i) for i, s in enumerate(children)]
    pooled = {k: np.concatenate([r[0][k] for r in results]) for k in results[0][0]}
    nd = config.draws_per_chain
    meta = {
        "priors": asdict(priors),
        "config": asdict(config),
        "rng": RNG_ALGORITHM,
        "numpy": np.__version__,
        "chain_seeds": [{"entropy": config.seed, "spawn_key": list(s.spawn_key)} for s in children],
        "config_hash": config_hash({"priors": asdict(priors), "config": asdict(config), "variant": asdict(variant)}),
    }
    return DrawStore(
        variant=variant,
        chain=np.repeat(np.arange(config.chains), nd),
        assignment=data.clustering.assignment.copy(),
        window_acceptance=np.array([r[1] for r in results]),
        acceptance_rate=np.array([r[2] for r in results]),
        kappa_final=np.array([r[3] for r in results]),
        metadata=meta,
        **pooled,
    )

