import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box

from geodose.mesh import build_mesh
from geodose.sparse import NotPositiveDefiniteError, SparseCholesky
from geodose.spde import MaternParams, assemble_fem, build_precision


@pytest.fixture(scope="module")
def Q_small():
    m = build_mesh(box(0, 0, 12_000, 12_000), 1500, 2000, 28, extension=3000)
    assert m.n_nodes <= 200
    return build_precision(assemble_fem(m), MaternParams(5000, 0.7))


def test_solve_matches_dense(Q_small, rng):
    b = rng.standard_normal(Q_small.shape[0])
    x = SparseCholesky(Q_small).solve(b)
    ref = np.linalg.solve(Q_small.toarray(), b)
    assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)


def test_logdet_matches_dense(Q_small):
    sign, ref = np.linalg.slogdet(Q_small.toarray())
    assert sign == 1
    assert SparseCholesky(Q_small).logdet() == pytest.approx(ref, rel=1e-10)


def test_inverse_quadratic_diagonal(Q_small, rng):
    n = Q_small.shape[0]
    B = sp.random(40, n, density=0.05, random_state=3, format="csr")
    ref = np.diag(B.toarray() @ np.linalg.inv(Q_small.toarray()) @ B.toarray().T)
    np.testing.assert_allclose(SparseCholesky(Q_small).inv_quadratic_diag(B, tile=7), ref, rtol=1e-9)


def test_sample_is_exact_linear_map(Q_small):
    # x = S z with S S' = Q^-1: push the identity through and compare covariance
    n = Q_small.shape[0]
    S = SparseCholesky(Q_small).sample(np.eye(n))
    np.testing.assert_allclose(S @ S.T, np.linalg.inv(Q_small.toarray()), rtol=1e-8, atol=1e-12)


def test_sample_vector_shape(Q_small, rng):
    ch = SparseCholesky(Q_small)
    assert ch.sample(rng.standard_normal(Q_small.shape[0])).shape == (Q_small.shape[0],)


def test_interior_marginal_variance_near_sigma2():
    m = build_mesh(box(0, 0, 40_000, 40_000), 900, 1100, 31, extension=25_000)
    p = MaternParams(10_000, 0.5)
    ch = SparseCholesky(build_precision(assemble_fem(m), p))
    k = int(np.argmin(np.linalg.norm(m.nodes - 20_000, axis=1)))
    e = sp.csr_matrix(([1.0], ([0], [k])), shape=(1, m.n_nodes))
    assert ch.inv_quadratic_diag(e)[0] == pytest.approx(p.sigma**2, rel=0.15)


def test_indefinite_rejected():
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(sp.diags([1.0, -1.0, 2.0]).tocsc())
    with pytest.raises(NotPositiveDefiniteError):
        SparseCholesky(sp.csc_matrix((3, 3)))


def test_empty_matrix():
    ch = SparseCholesky(sp.csc_matrix((0, 0)))
    assert ch.logdet() == 0.0
    assert ch.solve(np.zeros(0)).shape == (0,)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_random_spd_logdet_and_solve(n, seed):
    r = np.random.default_rng(seed)
    A = sp.random(n, n, density=0.2, random_state=seed)
    Q = (A @ A.T + sp.identity(n) * (0.5 + r.random())).tocsc()
    ch = SparseCholesky(Q)
    Qd = Q.toarray()
    assert ch.logdet() == pytest.approx(np.linalg.slogdet(Qd)[1], rel=1e-9, abs=1e-9)
    b = r.standard_normal(n)
    np.testing.assert_allclose(Qd @ ch.solve(b), b, atol=1e-9)
