import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from hcdefect.eigensolver import (SymmetricFactor, count_below, count_in_window, eigs_in_window, eigs_sliced,
                                  lowest_eigenpairs, m_orthonormalize, window_slices)
from hcdefect.fem import assemble_operator, build_mesh


@pytest.fixture(scope="module")
def square_pi():
    return assemble_operator(build_mesh((0, np.pi, 0, np.pi), np.pi / 128), None)


@pytest.fixture(scope="module")
def small():
    op = assemble_operator(build_mesh((0, 1, 0, 1), 1 / 12), None)
    lam = la.eigh(op.K.toarray(), op.M.toarray(), eigvals_only=True)
    return op, lam


def test_window_around_two_and_five(square_pi):
    res = eigs_in_window(square_pi, (1.5, 5.5))
    assert res.complete and res.count == 3
    assert np.allclose(res.eigenvalues, [2, 5, 5], rtol=1e-3)
    assert count_in_window(square_pi, (0, 3)) == 1
    G = res.eigenvectors.T @ (square_pi.M @ res.eigenvectors)
    assert np.allclose(G, np.eye(3), atol=1e-8)


def test_inertia_matches_dense_counts(small):
    op, lam = small
    for s in (10.0, 50.0, 100.0, 400.0, 1000.0):
        assert count_below(op, s) == np.count_nonzero(lam < s)


@given(a=st.floats(0, 600), w=st.floats(1, 300))
def test_window_counts_and_values(small, a, w):
    op, lam = small
    b = a + w
    exact = lam[(lam > a) & (lam < b)]
    # skip windows whose ends sit on an eigenvalue
    if np.min(np.abs(lam - a)) < 1e-6 or np.min(np.abs(lam - b)) < 1e-6:
        return
    res = eigs_in_window(op, (a, b), k_max=200)
    assert res.count == len(exact)
    assert np.allclose(np.sort(res.eigenvalues), exact, rtol=1e-8)


def test_incomplete_window_is_flagged(small):
    op, lam = small
    res = eigs_in_window(op, (0, 500), k_max=5)
    assert not res.complete and len(res) == 5 and res.count > 5


def test_slices_cover_the_window(small):
    op, lam = small
    sl = window_slices(op, (0, 900), slice_max=7)
    assert all(c <= 7 for _, _, c in sl)
    assert sum(c for _, _, c in sl) == np.count_nonzero(lam < 900)
    got = np.concatenate([r.eigenvalues for r in eigs_sliced(op, (0, 900), slice_max=7)])
    assert np.allclose(np.sort(got), lam[lam < 900], rtol=1e-8)


def test_lowest_pairs(small):
    op, lam = small
    w, V = lowest_eigenpairs(op.K, op.M, 6)
    assert np.allclose(w, lam[:6], rtol=1e-8)
    assert np.allclose(V.T @ (op.M @ V), np.eye(6), atol=1e-8)


def test_m_orthonormalize_handles_degenerate_pairs():
    M = sp.diags(np.linspace(1, 2, 6)).tocsr()
    V = np.random.default_rng(0).standard_normal((6, 3))
    lam, W = m_orthonormalize(M, np.array([1.0, 1.0, 3.0]), V)
    assert np.allclose(W[:, :2].T @ (M @ W[:, :2]), np.eye(2))


def test_symmetric_factor_inertia_and_solve():
    A = sp.diags([1.0, -2.0, 3.0, -4.0, 5.0]) + sp.eye(5, k=1) * 0.1 + sp.eye(5, k=-1) * 0.1
    f = SymmetricFactor(A.tocsc())
    assert f.inertia()[0] == 2
    b = np.arange(5.0)
    assert np.allclose(A @ f.solve(b), b)
