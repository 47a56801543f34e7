import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhsc.cluster import Clustering, block_laplacian
from fhsc.model import (
    VARIANT_NAMES,
    ClusterBlock,
    ModelVariant,
    apply_A,
    apply_A_inv,
    apply_blocks,
    check_rho,
    conditional_moments,
    conditional_precision,
    fh_conditional,
    fhsc_mean_decomposition,
    gamma_weight,
    logdet_A_inv,
    prior_covariance,
    prior_logdet,
    prior_precision_apply,
    prior_quadratic,
    random_effect_covariance,
    safe_cholesky,
    sandwich_diagonal,
    scalar_variance_decomposition,
    smoothing_inverse,
    smoothing_matrix,
)

rhos = st.floats(1e-3, 1.0)


def _block(rng, n, p=2):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    return ClusterBlock(rng.normal(size=n), rng.uniform(0.1, 1.0, n), X)


@pytest.mark.parametrize(
    "name, z, rho_free",
    [
        ("FH", "identity", False),
        ("fh-c1", "common_effect", False),
        ("FH-C2", "cluster_plus_area", False),
        ("FH-SC1", "identity", True),
        ("FH-SC2", "common_effect", True),
        ("FH-SC3", "cluster_plus_area", True),
    ],
)
def test_variant_table(name, z, rho_free):
    v = ModelVariant.from_name(name, gamma_hat=0.5)
    assert v.z_structure == z and v.rho_free == rho_free
    assert v.name in VARIANT_NAMES


def test_variant_errors_and_shapes():
    with pytest.raises(ValueError, match="unknown model variant"):
        ModelVariant.from_name("FH-SC9")
    with pytest.raises(ValueError, match="gamma_hat"):
        ModelVariant.from_name("FH-SC3")
    with pytest.raises(ValueError, match="ridge"):
        ModelVariant.from_name("FH-C1", ridge=0.0)
    assert ModelVariant.from_name("FH").prior_shape == (0.0, 1.0)
    assert ModelVariant.from_name("FH-SC2", ridge=1e-6).prior_shape == (1.0, 1e-6)
    assert ModelVariant.from_name("FH-SC3", gamma_hat=2.0).prior_shape == (2.0, 1.0)


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5, np.nan])
def test_check_rho_rejects(rho):
    with pytest.raises(ValueError, match="rho"):
        check_rho(rho)


# [DERIVED] dense construction from the block Laplacian
@pytest.mark.parametrize("n", [1, 2, 5, 13])
@pytest.mark.parametrize("rho", [0.01, 0.3, 0.99, 1.0])
def test_smoothing_matrix_dense(n, rho):
    L = block_laplacian(Clustering(np.ones(n, dtype=int)))
    A = np.eye(n) + (1 - rho) / rho * L
    np.testing.assert_allclose(smoothing_matrix(rho, n), A, atol=1e-13)
    np.testing.assert_allclose(smoothing_inverse(rho, n), np.linalg.inv(A), atol=1e-10)
    assert logdet_A_inv(rho, n) == pytest.approx(-np.linalg.slogdet(A)[1], abs=1e-9)


# [TRIVIAL] rho = 1 gives the identity
def test_rho_one_identity():
    np.testing.assert_array_equal(smoothing_inverse(1.0, 4), np.eye(4))
    assert gamma_weight(1.0, 7) == 1.0


@settings(max_examples=60, deadline=None)
@given(rhos, st.integers(1, 25), st.integers(0, 10_000))
def test_fast_products_match_dense(rho, n, seed):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    np.testing.assert_allclose(apply_A_inv(v, rho), smoothing_inverse(rho, n) @ v, atol=1e-10)
    np.testing.assert_allclose(apply_A(v, rho), smoothing_matrix(rho, n) @ v, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(apply_A(apply_A_inv(v, rho), rho), v, rtol=1e-8, atol=1e-8)


def test_apply_blocks(rng):
    cl = Clustering(np.array([1, 2, 1, 2, 2]))
    v = rng.normal(size=5)
    out = apply_blocks(apply_A_inv, v, 0.4, cl.blocks())
    for idx in cl.blocks():
        np.testing.assert_allclose(out[idx], smoothing_inverse(0.4, idx.size) @ v[idx])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.0, 3.0), st.floats(1e-3, 3.0), st.floats(0.1, 5.0), st.integers(0, 999))
def test_prior_helpers_match_dense(n, a, b, s2, seed):
    r = np.random.default_rng(seed).normal(size=n)
    S = prior_covariance(n, s2, a, b)
    np.testing.assert_allclose(prior_precision_apply(r, s2, a, b), np.linalg.solve(S, r), rtol=1e-8, atol=1e-10)
    assert prior_quadratic(r, a, b) == pytest.approx(s2 * r @ np.linalg.solve(S, r), rel=1e-8, abs=1e-10)
    assert prior_logdet(n, s2, a, b) == pytest.approx(np.linalg.slogdet(S)[1], rel=1e-9, abs=1e-9)


def test_random_effect_covariance_forms():
    n = 4
    Z = np.ones((n, 1))
    S = random_effect_covariance(Z, np.array([[2.0]]), ridge=1e-3)
    np.testing.assert_allclose(S, 2.0 * (np.ones((n, n)) + 1e-3 * np.eye(n)))
    Z2 = np.column_stack([np.ones(n), np.eye(n)])
    G = np.diag([0.5] + [1.0] * n)
    np.testing.assert_allclose(random_effect_covariance(Z2, G), prior_covariance(n, 1.0, 0.5, 1.0))


def test_cluster_block_validation():
    with pytest.raises(ValueError, match="inconsistent"):
        ClusterBlock(np.zeros(3), np.ones(2), np.ones((3, 1)))
    with pytest.raises(ValueError, match="positive"):
        ClusterBlock(np.zeros(2), np.array([1.0, 0.0]), np.ones(2))


def test_safe_cholesky_fallback():
    P = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = safe_cholesky(P)
    np.testing.assert_allclose(L @ L.T, P, atol=1e-10)
    assert np.all(np.diag(L) > 0)


# [DERIVED] joint-normal oracle: condition the stacked (theta, y) Gaussian
@pytest.mark.parametrize("n", [1, 3, 8])
@pytest.mark.parametrize("rho", [0.05, 0.5, 1.0])
def test_conditional_moments_joint_normal(rng, n, rho):
    blk = _block(rng, n)
    delta = rng.normal(size=2)
    S = prior_covariance(n, 0.7, 0.3, 1.0)
    Ai = smoothing_inverse(rho, n)
    mu = blk.X @ delta
    Syy = Ai @ S @ Ai + np.diag(blk.D)
    Sty = S @ Ai
    E = mu + Sty @ np.linalg.solve(Syy, blk.y - Ai @ mu)
    V = S - Sty @ np.linalg.solve(Syy, Sty.T)
    cm = conditional_moments(blk, delta, S, rho)
    np.testing.assert_allclose(cm.mean_theta, E, atol=1e-10)
    np.testing.assert_allclose(cm.cov_theta, V, atol=1e-10)
    np.testing.assert_allclose(cm.mean_fhsc, Ai @ E, atol=1e-10)
    np.testing.assert_allclose(cm.cov_fhsc, Ai @ V @ Ai, atol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(conditional_precision(blk, S, rho)), V, atol=1e-10)


def test_conditional_moments_rejects_singular_prior(rng):
    blk = _block(rng, 3)
    with pytest.raises(ValueError, match="singular"):
        conditional_moments(blk, np.zeros(2), np.ones((3, 3)), 0.5)


# [DERIVED] at rho = 1 with identity prior it is the FH shrinkage
def test_fh_conditional_matches_general(rng):
    blk = _block(rng, 6)
    beta = rng.normal(size=2)
    E, V = fh_conditional(blk.y, blk.D, blk.X, beta, 0.4)
    cm = conditional_moments(blk, beta, 0.4 * np.eye(6), 1.0)
    np.testing.assert_allclose(E, cm.mean_theta, atol=1e-12)
    np.testing.assert_allclose(V, np.diag(cm.cov_theta), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(rhos, st.integers(1, 15), st.integers(0, 999))
def test_mean_decomposition_and_sandwich(rho, n, seed):
    r = np.random.default_rng(seed)
    E = r.normal(size=n)
    np.testing.assert_allclose(fhsc_mean_decomposition(E, rho), smoothing_inverse(rho, n) @ E, atol=1e-12)
    M = r.normal(size=(n, n))
    V = M @ M.T + np.eye(n)
    Ai = smoothing_inverse(rho, n)
    np.testing.assert_allclose(sandwich_diagonal(V, rho), np.diag(Ai @ V @ Ai), rtol=1e-10, atol=1e-12)


def test_scalar_decomposition_exact_at_rho_one_only(rng):
    M = rng.normal(size=(5, 5))
    V = M @ M.T + np.eye(5)
    np.testing.assert_allclose(scalar_variance_decomposition(V, 1.0), np.diag(V))
    assert not np.allclose(scalar_variance_decomposition(V, 0.3), sandwich_diagonal(V, 0.3))
