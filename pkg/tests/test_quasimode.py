import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given
from hypothesis import strategies as st

from hcdefect.errors import ConfigurationError, ConvergenceError, DomainError
from hcdefect.eigensolver import count_in_window, eigs_in_window
from hcdefect.fem import assemble_operator, build_mesh
from hcdefect.geometry import DefectSpec, RandomMediumSpec, sample_realization, scale_and_filter
from hcdefect.quasimode import (build_quasimode, cutoff_eta, cutoff_xi, decay_fit, harmonic_extension,
                                match_eigenvector, projection_estimate, projection_mass, quasimode_report,
                                realize_b_eps, resolvent_image, transfer, two_scale_diagnostics)
from hcdefect.spectral import b_integral, dirichlet_modes


@pytest.fixture(scope="module")
def small():
    op = assemble_operator(build_mesh((0, 1, 0, 1), 1 / 10), None)
    lam, V = la.eigh(op.K.toarray(), op.M.toarray())
    return op, lam, V


@pytest.fixture(scope="module")
def eps_problem():
    spec = RandomMediumSpec(radius_law=(0.3, 0.3), buffer_gap=0.05)
    real = sample_realization(spec, (-2, 2, -2, 2))
    eps = 0.5
    geom = scale_and_filter(real, eps, DefectSpec(0.3, 9.0 * np.eye(2)))
    op = assemble_operator(build_mesh((-1, 1, -1, 1), eps / 16), geom, A1=4 * np.eye(2))
    return geom, op


def test_cutoffs():
    r = np.linspace(0, 5, 501)
    eta, xi = cutoff_eta(r, 2.0), cutoff_xi(r, 0.5, 0.5)
    assert np.all(eta[r <= 1] == 1) and np.all(eta[r >= 2] == 0)
    assert np.all(xi[r <= 1] == 0) and np.all(xi[r >= 1.5] == 1)
    assert np.all(np.diff(eta) <= 0) and np.all(np.diff(xi) >= 0)
    assert np.abs(np.diff(xi) / np.diff(r)).max() <= 1.5 / 0.5 + 1e-9


def test_exact_eigenvector_has_zero_certificate(small):
    op, lam, V = small
    u = V[:, 3]
    uh = resolvent_image(op, u, lam[3])
    q = quasimode_report(op, u, uh, lam[3])
    assert q.certificate < 1e-8 * lam[3] and q.radius < 1e-8 * lam[3]


@given(seed=st.integers(0, 10_000), k=st.integers(0, 20), noise=st.floats(1e-3, 0.3))
def test_certificate_encloses_an_eigenvalue(small, seed, k, noise):
    op, lam, V = small
    u = V[:, k] + noise * np.random.default_rng(seed).standard_normal(op.n)
    lam0 = lam[k] * (1 + noise)
    q = quasimode_report(op, u, resolvent_image(op, u, lam0), lam0)
    if np.isfinite(q.radius):
        assert np.min(np.abs(lam - lam0)) <= q.radius * (1 + 1e-9)


@given(seed=st.integers(0, 10_000), k=st.integers(0, 20), noise=st.floats(1e-4, 0.05), factor=st.floats(2, 8))
def test_projection_lower_bound(small, seed, k, noise, factor):
    # ‖E_(λ0-δ, λ0+δ) q‖ ≥ 1 - 2ρ/δ for unit q with residual ρ
    op, lam, V = small
    rng = np.random.default_rng(seed)
    lam0 = lam[k] + noise * lam[k] * rng.uniform(-1, 1)
    u = V[:, k] + noise * rng.standard_normal(op.n)
    uh = resolvent_image(op, u, lam0)
    q = quasimode_report(op, u, uh, lam0)
    delta = factor * q.lemma_residual
    c = V.T @ (op.M @ uh)
    inside = np.abs(lam - lam0) < delta
    mass = np.linalg.norm(c[inside]) / np.linalg.norm(c)
    assert mass >= 1 - 2 / factor - 1e-12


def test_projection_estimate_exact_and_lower_bound(small):
    op, lam, V = small
    u = np.random.default_rng(3).standard_normal(op.n)
    c = V.T @ (op.M @ u)
    nu = np.linalg.norm(c)
    win = (50.0, 900.0)
    inside = (lam > win[0]) & (lam < win[1])
    exact = np.linalg.norm(c[inside]) / nu
    n = int(inside.sum())
    pe = projection_estimate(op, u, win, n, pairs=n + 5)
    assert pe.exact and pe.mass == pytest.approx(exact, rel=1e-8)
    lb = projection_estimate(op, u, win, n, pairs=10)
    assert not lb.exact and lb.mass <= exact + 1e-10
    w = eigs_in_window(op, win, k_max=200)
    assert projection_mass(op, u, w) == pytest.approx(exact, rel=1e-8)
    with pytest.raises(ConvergenceError):
        projection_mass(op, u, eigs_in_window(op, win, k_max=3))


@given(seed=st.integers(0, 10_000), k=st.integers(0, 10), factor=st.floats(1.0, 6.0), pairs=st.integers(2, 12))
def test_energy_bound_is_a_lower_bound(small, seed, k, factor, pairs):
    op, lam, V = small
    rng = np.random.default_rng(seed)
    lam0 = lam[k] * (1 + 0.05 * rng.uniform(-1, 1))
    u = V[:, k] + 0.05 * rng.standard_normal(op.n)
    uh = resolvent_image(op, u, lam0)
    delta = factor * quasimode_report(op, u, uh, lam0).lemma_residual
    win = (lam0 - delta, lam0 + delta)
    inside = (lam > win[0]) & (lam < win[1])
    c = V.T @ (op.M @ uh)
    exact = np.linalg.norm(c[inside]) / np.linalg.norm(c)
    pe = projection_estimate(op, uh, win, int(inside.sum()), pairs=pairs)
    assert pe.mass <= exact + 1e-9
    if pe.exact:
        assert pe.mass == pytest.approx(exact, rel=1e-8)


def test_match_eigenvector(small):
    op, lam, V = small
    # ground state is simple; higher square modes come in degenerate pairs
    w = eigs_in_window(op, (1.0, lam[3] + 1), k_max=50)
    u = V[:, 0] + 0.01 * V[:, 1]
    k, ov = match_eigenvector(op, u, w)
    assert w.eigenvalues[k] == pytest.approx(lam[0]) and ov[k] > 0.99


def test_b_eps_matches_the_scaled_table(eps_problem):
    geom, op = eps_problem
    table = dirichlet_modes("disk", 0.3, 1 / 16, min_elements=8)
    mesh = op.mesh
    for lam0 in (0.0, 30.0):
        b = realize_b_eps(op, geom, lam0, table)
        # every inclusion fully inside the mesh box contributes eps^2 ∫ b_lam0 over the reference shape
        c = geom.centers
        inside = np.all(np.abs(c) + geom.radii[:, None] < 1 - 1e-9, axis=1)
        ref = table.moments[0] if lam0 == 0 else b_integral(table, lam0).value
        total = float(np.ones(op.n) @ (op.M @ b))
        assert total == pytest.approx(inside.sum() * geom.epsilon**2 * ref, rel=1e-8)
        assert mesh.h == pytest.approx(geom.epsilon / 16)


def test_b_eps_torsion_closed_form(eps_problem):
    geom, op = eps_problem
    b = realize_b_eps(op, geom, 0.0)
    inside = np.all(np.abs(geom.centers) + geom.radii[:, None] < 1 - 1e-9, axis=1)
    r = geom.radii[inside]
    # -ε²Δb = 1 on a disk of radius εr: ∫b = π (εr)^4 / (8 ε²); staircase disk at 4.8 elements per radius
    exact = np.sum(np.pi * r**4 / (8 * geom.epsilon**2))
    assert float(np.ones(op.n) @ (op.M @ b)) == pytest.approx(exact, rel=0.1)


def test_harmonic_extension_and_transfer(eps_problem):
    geom, op = eps_problem
    src = build_mesh((-1, 1, -1, 1), 1 / 8)
    fn = lambda x, y: (1 - x * x) * (1 - y * y)
    v, g = transfer(src, src.interpolate(fn), op, gradient=True)
    assert v.shape == (op.n,) and len(g) == 2
    ext = harmonic_extension(op, v)
    assert np.allclose(harmonic_extension(op, ext), ext)


def test_build_quasimode_checks(eps_problem):
    geom, op = eps_problem
    z = np.zeros(op.n)
    with pytest.raises(ConfigurationError):
        build_quasimode(op, geom, z, [z, z], 50.0, z, L=0.5, rho=0.25)
    parts = build_quasimode(op, geom, z + 1, [z, z], 50.0, z, correctors=[z, z], L=1.5, rho=0.4)
    assert np.allclose(parts.u_lc, 1.0)
    with pytest.raises(DomainError):
        quasimode_report(op, z, z, 50.0)


def test_decay_fit_recovers_a_known_rate():
    m = build_mesh((-3, 3, -3, 3), 1 / 32)
    u = m.interpolate(lambda x, y: np.exp(-3 * np.hypot(x, y)))
    f = decay_fit(m, u, 0.5, 2.5, 0.125, beta_inf=-36.0, gamma=4.0)
    assert f.alpha_fit == pytest.approx(3.0, rel=1e-2)
    assert f.bound == pytest.approx(3.0) and f.ratio == pytest.approx(1.0, rel=1e-2)
    with pytest.raises(ConfigurationError):
        decay_fit(m, u, 0.5, 0.7, 0.125)


def test_two_scale_diagnostics_sign_and_identity(eps_problem):
    geom, op = eps_problem
    src = build_mesh((-1, 1, -1, 1), 1 / 8)
    u0 = transfer(src, src.interpolate(lambda x, y: np.cos(np.pi * x / 2) * np.cos(np.pi * y / 2)), op)
    z = np.zeros(op.n)
    scale = float(np.sqrt(u0 @ (op.M @ u0)))
    a = two_scale_diagnostics(op, geom, u0, 10.0, u0, 10.0, z, scale)
    b = two_scale_diagnostics(op, geom, -u0, 10.0, u0, 10.0, z, scale)
    assert a.matrix_error < 1e-12 and a.as_row() == b.as_row()
    assert a.n_inclusions == count_inclusions(geom, op)


def count_inclusions(geom, op):
    from hcdefect.geometry import PHASE_INCLUSION

    idx = geom.inclusion_index(op.mesh.midpoints())
    return len(np.unique(idx[(op.phases == PHASE_INCLUSION) & (idx >= 0)]))


def test_eigenvalue_inside_certified_radius(eps_problem):
    geom, op = eps_problem
    w = eigs_in_window(op, (20.0, 60.0), k_max=40)
    assert w.count == count_in_window(op, (20.0, 60.0))
    if len(w):
        u = w.eigenvectors[:, 0] + 1e-3 * np.random.default_rng(0).standard_normal(op.n)
        q = quasimode_report(op, u, resolvent_image(op, u, w.eigenvalues[0]), w.eigenvalues[0])
        assert count_in_window(op, (w.eigenvalues[0] - q.radius - 1e-9, w.eigenvalues[0] + q.radius + 1e-9)) >= 1
