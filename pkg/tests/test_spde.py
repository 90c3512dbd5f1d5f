import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_fem_oracle
from scipy import special

from geodose.mesh import MeshQuality, TriMesh
from geodose.spde import (
    MaternParams,
    assemble_fem,
    bessel_k1,
    build_precision,
    matern_correlation,
    matern_cov,
    precision_structure,
    write_matrix_market,
)


def one_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return TriMesh(nodes, np.array([[0, 1, 2]]), np.ones(3, bool), MeshQuality(1, 1, 30))


def test_single_triangle_lumped_mass():
    fem = assemble_fem(one_triangle())
    np.testing.assert_allclose(fem.c_diag, [1 / 6] * 3, rtol=1e-15)


def test_constants_in_stiffness_kernel(small_mesh):
    fem = assemble_fem(small_mesh)
    scale = abs(fem.G).max()
    assert np.abs(fem.G @ np.ones(fem.n)).max() <= 1e-12 * scale


def test_mass_sums_to_area(small_mesh):
    fem = assemble_fem(small_mesh)
    assert math.isclose(fem.c_diag.sum(), small_mesh.area, rel_tol=1e-9)


def test_fem_matches_dense_quadrature(mesh_20):
    fem = assemble_fem(mesh_20)
    C, G = dense_fem_oracle(mesh_20)
    np.testing.assert_allclose(fem.c_diag, C, rtol=1e-8)
    Gs = fem.G.toarray()
    np.testing.assert_allclose(Gs, G, rtol=1e-8, atol=1e-8 * np.abs(G).max())


def test_precision_formula_one_triangle():
    fem = assemble_fem(one_triangle())
    K = precision_structure(fem, 1.0).toarray()
    C = np.diag(fem.c_diag)
    G = fem.G.toarray()
    np.testing.assert_allclose(K, C + 2 * G + G @ np.linalg.inv(C) @ G, rtol=1e-13)


def test_tau_one_kappa_one():
    fem = assemble_fem(one_triangle())
    p = MaternParams.from_kappa_tau(1.0, 1.0)
    assert math.isclose(p.kappa, 1.0) and math.isclose(p.tau, 1.0)
    C = np.diag(fem.c_diag)
    G = fem.G.toarray()
    np.testing.assert_allclose(build_precision(fem, p).toarray(), C + 2 * G + G @ np.linalg.inv(C) @ G, rtol=1e-12)


def test_doubling_sigma_quarters_precision(small_mesh):
    fem = assemble_fem(small_mesh)
    Q1 = build_precision(fem, MaternParams(5000, 0.4))
    Q2 = build_precision(fem, MaternParams(5000, 0.8))
    np.testing.assert_allclose(Q2.toarray(), Q1.toarray() / 4, rtol=1e-13)


def test_precision_symmetric_positive_definite(small_mesh):
    Q = build_precision(assemble_fem(small_mesh), MaternParams(4000, 0.3)).toarray()
    np.testing.assert_allclose(Q, Q.T, rtol=1e-13, atol=0)
    assert np.linalg.eigvalsh(Q).min() > 0


def test_parametrization_identities():
    p = MaternParams(13_900.0, 0.383)
    assert math.isclose(p.kappa, math.sqrt(8) / 13_900.0)
    marg = 1.0 / (4 * math.pi * p.kappa**2 * p.tau**2)
    assert math.isclose(marg, 0.383**2, rel_tol=1e-14)
    q = MaternParams.from_kappa_tau(p.kappa, p.tau)
    assert math.isclose(q.rho, p.rho) and math.isclose(q.sigma, p.sigma)
    with pytest.raises(ValueError):
        MaternParams(-1.0, 1.0)


@pytest.mark.parametrize("x", [1e-8, 1e-3, 0.1, 0.5, 1.0, 1.9, 2.0, 2.1, 5.0, 12.0, 29.9, 30.0, 31.0, 80.0, 600.0])
def test_bessel_k1_against_scipy(x):
    assert math.isclose(float(bessel_k1(x)), special.k1(x), rel_tol=1e-10)


def test_bessel_k1_vectorized_large_input():
    x = np.geomspace(1e-4, 200, 40_000)
    np.testing.assert_allclose(bessel_k1(x), special.k1(x), rtol=1e-10)


def test_matern_at_zero_is_variance():
    p = MaternParams(15_000, 0.4)
    assert matern_cov(0.0, p) == pytest.approx(0.16, rel=1e-15)


def test_matern_at_range():
    x = math.sqrt(8.0)
    expected = x * special.kv(1, x)
    assert expected == pytest.approx(0.1396674740, abs=1e-9)
    assert float(matern_correlation(15_000.0, 15_000.0)) == pytest.approx(expected, rel=1e-12)


def test_matern_table_values():
    p = MaternParams(13_900.0, 0.383)
    x = math.sqrt(8.0)
    assert float(matern_cov(13_900.0, p)) == pytest.approx(x * special.kv(1, x) * 0.383**2, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 1e5), st.floats(0.0, 5e5), st.floats(0.0, 5e5))
def test_matern_correlation_monotone_and_bounded(rho, d1, d2):
    lo, hi = sorted([d1, d2])
    c_lo, c_hi = matern_correlation(np.array([lo, hi]), rho)
    assert 0.0 <= c_hi <= c_lo <= 1.0


def test_matrix_market_export(tmp_path, small_mesh):
    Q = build_precision(assemble_fem(small_mesh), MaternParams(4000, 0.3))
    p = tmp_path / "q.mtx"
    write_matrix_market(Q, p)
    from scipy.io import mmread

    np.testing.assert_array_equal(sp.csr_matrix(mmread(str(p))).toarray(), Q.toarray())
