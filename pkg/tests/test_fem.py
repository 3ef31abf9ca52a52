import numpy as np
import pytest
import scipy.sparse.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from hcdefect.errors import ConfigurationError, ConstraintViolation
from hcdefect.fem import (assemble_matrices, assemble_operator, assemble_reference_shape, build_mesh,
                          coefficient_field, element_masses, evaluate, l2_norm, load_vector)
from hcdefect.geometry import PHASE_DEFECT, PHASE_INCLUSION, PHASE_MATRIX, DefectSpec, RandomMediumSpec
from hcdefect.geometry import sample_realization, scale_and_filter


def test_mesh_numbering_and_counts():
    m = build_mesh((0, 2, 0, 1), 0.25)
    assert (m.nx, m.ny, m.n_nodes, m.n_elements) == (8, 4, 45, 32)
    E = m.elements()
    # first element: lower-left, lower-right, upper-right, upper-left
    assert list(E[0]) == [0, 1, 10, 9]
    assert m.n_dofs == 7 * 3
    assert m.area == pytest.approx(2.0)


def test_h_must_divide_the_box():
    with pytest.raises(ConfigurationError):
        build_mesh((0, 1, 0, 1), 0.3)
    with pytest.raises(ConfigurationError):
        build_mesh((0, 1, 0, 1), 0.25, bc="robin")


def test_mass_integrates_constants_and_stiffness_kills_them():
    m = build_mesh((0, 1, 0, 2), 0.125, bc="none")
    K, M = assemble_matrices(m, np.tile([2.0, 0.3, 1.0], (m.n_elements, 1)))
    one = np.ones(K.shape[0])
    assert one @ (M @ one) == pytest.approx(2.0)
    assert np.abs(K @ one).max() < 1e-12
    x, y = m.nodes().T
    u = 3 * x - y
    # energy of a linear field: grad^T A grad * area
    g = np.array([3.0, -1.0])
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert u @ (K @ u) == pytest.approx(g @ A @ g * 2.0)
    assert np.allclose(load_vector(m), M @ one)


def test_square_dirichlet_eigenvalues():
    # side pi: exact spectrum m^2 + n^2, lowest {2, 5, 5, 8}
    m = build_mesh((0, np.pi, 0, np.pi), np.pi / 128)
    op = assemble_operator(m, None)
    lam = np.sort(sla.eigsh(op.K, k=4, M=op.M, sigma=0, which="LM")[0])
    assert np.allclose(lam, [2, 5, 5, 8], rtol=1e-3)
    assert np.all(lam >= [2, 5, 5, 8])  # conforming elements bound from above


def test_torsion_function_of_the_square():
    # -Δv = 1 on (0,1)^2: ∫v = 0.0351442...
    m = build_mesh((0, 1, 0, 1), 1 / 64)
    op = assemble_operator(m, None)
    F = load_vector(m)
    v = sla.spsolve(op.K.tocsc(), F)
    assert F @ v == pytest.approx(0.035144, rel=2e-3)


def test_reference_disk_torsion():
    # -Δv = 1 on a disk of radius r: ∫v = pi r^4 / 8
    op = assemble_reference_shape("disk", 1.0, 1 / 64)
    F = op.info["load"]
    v = sla.spsolve(op.K.tocsc(), F)
    assert F @ v == pytest.approx(np.pi / 8, rel=1e-2)


def test_reference_shape_resolution_floor():
    with pytest.raises(ConstraintViolation):
        assemble_reference_shape("disk", 0.3, 0.1)
    assemble_reference_shape("disk", 0.3, 0.3 / 4, min_elements=8)


def test_coefficient_field_by_phase():
    ph = np.array([PHASE_MATRIX, PHASE_INCLUSION, PHASE_DEFECT], dtype=np.int8)
    c = coefficient_field(ph, 0.25, 4 * np.eye(2), np.diag([7.0, 9.0]))
    assert np.allclose(c, [[4, 0, 4], [0.0625, 0, 0.0625], [7, 0, 9]])
    with pytest.raises(ConstraintViolation):
        coefficient_field(ph, 0.25, -np.eye(2))


def test_assemble_operator_checks():
    spec = RandomMediumSpec(radius_law=(0.3, 0.3), buffer_gap=0.05)
    real = sample_realization(spec, (-2, 2, -2, 2))
    geom = scale_and_filter(real, 0.5, DefectSpec(0.4))
    with pytest.raises(ConstraintViolation):
        assemble_operator(build_mesh((-1, 1, -1, 1), 0.125), geom)   # too coarse
    with pytest.raises(ConstraintViolation):
        assemble_operator(build_mesh((-2, 2, -2, 2), 0.5 / 16), geom)  # outside the region
    op = assemble_operator(build_mesh((-1, 1, -1, 1), 0.5 / 16), geom, A1=4 * np.eye(2))
    assert set(np.unique(op.phases)) == {PHASE_MATRIX, PHASE_INCLUSION, PHASE_DEFECT}
    assert op.n == 63 * 63
    assert abs(op.K - op.K.T).max() < 1e-12


@given(a=st.floats(-2, 2), b=st.floats(-2, 2), c=st.floats(-2, 2), d=st.floats(-2, 2))
def test_bilinear_fields_are_reproduced_exactly(a, b, c, d):
    m = build_mesh((-1, 1, -1, 1), 0.25, bc="none")
    fn = lambda x, y: a + b * x + c * y + d * x * y
    u = m.interpolate(fn)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    val, grad = evaluate(m, u, pts, gradient=True)
    assert np.allclose(val, fn(pts[:, 0], pts[:, 1]), atol=1e-12)
    assert np.allclose(grad[:, 0], b + d * pts[:, 1], atol=1e-12)
    assert np.allclose(grad[:, 1], c + d * pts[:, 0], atol=1e-12)


def test_element_masses_sum_to_the_l2_norm():
    m = build_mesh((0, 1, 0, 1), 1 / 64, bc="none")
    u = m.interpolate(lambda x, y: np.sin(3 * x) * y)
    assert element_masses(m, u).sum() == pytest.approx(l2_norm(m, u) ** 2)
    exact = (0.5 - np.sin(6) / 12) / 3
    assert l2_norm(m, u) ** 2 == pytest.approx(exact, rel=1e-3)


def test_coo_export(tmp_path):
    op = assemble_operator(build_mesh((0, 1, 0, 1), 0.25), None)
    op.export_coo(tmp_path / "op.txt")
    text = (tmp_path / "op.txt").read_text()
    assert text.count("\n") >= op.K.nnz + op.M.nnz
