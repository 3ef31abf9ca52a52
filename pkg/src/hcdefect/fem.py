"""Bilinear finite elements on uniform rectangular grids.

Nodes and elements are numbered lexicographically with x running fastest:
node ``(i, j)`` has id ``j * (nx + 1) + i`` and element ``(i, j)`` has id
``j * nx + i`` with local nodes ordered counter-clockwise from the lower-left
corner.  Coefficients are constant per element, sampled at the midpoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ConstraintViolation
from .geometry import PHASE_DEFECT, PHASE_INCLUSION, PHASE_MATRIX, ScaledGeometry

_GP = 0.5 + np.array([-1.0, 1.0]) / (2.0 * np.sqrt(3.0))
GAUSS_XI = np.array([[_GP[a], _GP[b]] for b in range(2) for a in range(2)])
GAUSS_W = np.full(4, 0.25)
_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _shape(xi):
    x, y = xi[..., 0], xi[..., 1]
    return np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y], -1)


def _shape_grad(xi):
    x, y = xi[..., 0], xi[..., 1]
    gx = np.stack([-(1 - y), (1 - y), y, -y], -1)
    gy = np.stack([-(1 - x), -x, x, (1 - x)], -1)
    return gx, gy


def _reference_matrices():
    N = _shape(GAUSS_XI)
    gx, gy = _shape_grad(GAUSS_XI)
    w = GAUSS_W[:, None, None]
    kxx = (w * gx[:, :, None] * gx[:, None, :]).sum(0)
    kyy = (w * gy[:, :, None] * gy[:, None, :]).sum(0)
    kxy = (w * (gx[:, :, None] * gy[:, None, :] + gy[:, :, None] * gx[:, None, :])).sum(0)
    m = (w * N[:, :, None] * N[:, None, :]).sum(0)
    sym = lambda a: 0.5 * (a + a.T)
    return sym(kxx), sym(kyy), sym(kxy), sym(m)


KXX, KYY, KXY, MREF = _reference_matrices()
SHAPE_AT_GAUSS = _shape(GAUSS_XI)
# integral of the reference basis gradients over the unit element
GRAD_INT = np.array([[-0.5, 0.5, 0.5, -0.5], [-0.5, -0.5, 0.5, 0.5]])


@dataclass(frozen=True)
class Mesh:
    box: tuple[float, float, float, float]
    h: float
    nx: int
    ny: int
    bc: str = "dirichlet"

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Node array shape ``(ny + 1, nx + 1)``."""
        return self.ny + 1, self.nx + 1

    @property
    def area(self) -> float:
        return self.nx * self.ny * self.h**2

    def node_axes(self):
        x0, _, y0, _ = self.box
        return x0 + self.h * np.arange(self.nx + 1), y0 + self.h * np.arange(self.ny + 1)

    def nodes(self) -> np.ndarray:
        xs, ys = self.node_axes()
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        return np.stack([X.ravel(), Y.ravel()], -1)

    def elements(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        n0 = (j * (self.nx + 1) + i).ravel()
        return np.stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1], -1).astype(np.int64)

    def midpoints(self) -> np.ndarray:
        x0, _, y0, _ = self.box
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        return np.stack([x0 + (i.ravel() + 0.5) * self.h, y0 + (j.ravel() + 0.5) * self.h], -1)

    def gauss_points(self) -> np.ndarray:
        """(n_elements, 4, 2) physical 2x2 Gauss points; each carries weight h^2/4."""
        x0, _, y0, _ = self.box
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        corner = np.stack([x0 + i.ravel() * self.h, y0 + j.ravel() * self.h], -1)
        return corner[:, None, :] + self.h * GAUSS_XI[None, :, :]

    @property
    def dirichlet_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        if self.bc == "dirichlet":
            m[0, :] = m[-1, :] = True
            m[:, 0] = m[:, -1] = True
        return m.ravel()

    def dof_map(self) -> np.ndarray:
        """Node -> dof index (-1 for eliminated Dirichlet nodes)."""
        if self.bc == "periodic":
            i, j = np.meshgrid(np.arange(self.nx + 1) % self.nx, np.arange(self.ny + 1) % self.ny, indexing="xy")
            return (j * self.nx + i).ravel().astype(np.int64)
        if self.bc == "none":
            return np.arange(self.n_nodes, dtype=np.int64)
        dof = -np.ones(self.n_nodes, dtype=np.int64)
        free = ~self.dirichlet_mask
        dof[free] = np.arange(int(free.sum()))
        return dof

    @property
    def n_dofs(self) -> int:
        if self.bc == "periodic":
            return self.nx * self.ny
        if self.bc == "none":
            return self.n_nodes
        return (self.nx - 1) * (self.ny - 1)

    def to_nodes(self, vec, dofs=None) -> np.ndarray:
        """Scatter a dof vector to a node array of shape ``mesh.shape`` (zero on eliminated nodes)."""
        dofs = self.dof_map() if dofs is None else dofs
        out = np.zeros(self.n_nodes, dtype=np.result_type(vec, float))
        ok = dofs >= 0
        out[ok] = np.asarray(vec)[dofs[ok]]
        return out.reshape(self.shape)

    def from_nodes(self, arr, dofs=None) -> np.ndarray:
        dofs = self.dof_map() if dofs is None else dofs
        n = int(dofs.max()) + 1 if dofs.size and dofs.max() >= 0 else 0
        out = np.zeros(n, dtype=np.result_type(arr, float))
        ok = dofs >= 0
        out[dofs[ok]] = np.asarray(arr).ravel()[ok]
        return out

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn(x, y)`` as a node array."""
        p = self.nodes()
        return np.asarray(fn(p[:, 0], p[:, 1]), dtype=float).reshape(self.shape)


def build_mesh(box, h: float, bc: str = "dirichlet") -> Mesh:
    x0, x1, y0, y1 = (float(v) for v in box)
    if bc not in ("dirichlet", "periodic", "none"):
        raise ConfigurationError(f"unknown boundary condition {bc!r}")
    counts = []
    for side in (x1 - x0, y1 - y0):
        n = side / h
        if side <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigurationError(f"h={h} does not divide box side {side}")
        counts.append(int(round(n)))
    if bc == "periodic" and min(counts) < 2:
        raise ConfigurationError("periodic mesh needs at least 2 elements per side")
    return Mesh(box=(x0, x1, y0, y1), h=float(h), nx=counts[0], ny=counts[1], bc=bc)


@dataclass
class OperatorPair:
    """Sparse stiffness/mass pair on the free dofs of a mesh."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    mesh: Mesh
    dofs: np.ndarray
    phases: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def to_nodes(self, vec) -> np.ndarray:
        return self.mesh.to_nodes(vec, self.dofs)

    def from_nodes(self, arr) -> np.ndarray:
        out = np.zeros(self.n)
        ok = self.dofs >= 0
        out[self.dofs[ok]] = np.asarray(arr).ravel()[ok]
        return out

    def export_coo(self, path) -> None:
        """Write ``K`` then ``M`` as ``row col value`` lines, one block each."""
        path = Path(path)
        with path.open("w") as fh:
            for name, A in (("K", self.K), ("M", self.M)):
                C = A.tocoo()
                fh.write(f"# {name} {A.shape[0]} {A.shape[1]} {C.nnz}\n")
                np.savetxt(fh, np.column_stack([C.row, C.col, C.data]), fmt=["%d", "%d", "%.17g"])


def element_stiffness(coeff: np.ndarray) -> np.ndarray:
    """(n_el, 4, 4) element stiffness blocks for per-element tensors ``coeff = [c00, c01, c11]``."""
    c = np.asarray(coeff, dtype=float)
    return c[:, 0, None, None] * KXX + c[:, 2, None, None] * KYY + c[:, 1, None, None] * KXY


def _sum_blocks(E, blocks, dofs, n):
    rows = dofs[np.repeat(E, 4, axis=1)].ravel()
    cols = dofs[np.tile(E, (1, 4))].ravel()
    data = blocks.reshape(-1)
    ok = (rows >= 0) & (cols >= 0) & (data != 0)
    rows, cols, data = rows[ok], cols[ok], data[ok]
    key = rows * n + cols
    uniq, inv = np.unique(key, return_inverse=True)
    vals = np.bincount(inv, weights=data, minlength=len(uniq))
    A = sp.csr_matrix((vals, (uniq // n, uniq % n)), shape=(n, n))
    A.sort_indices()
    return A


def assemble_matrices(mesh: Mesh, coeff, mass_weight=None, dofs=None, element_mask=None):
    """Stiffness and mass matrices for per-element coefficients.

    ``coeff`` is ``(n_el, 3)`` holding ``[c00, c01, c11]``; ``mass_weight`` an
    optional per-element factor on the mass; ``element_mask`` restricts the
    assembly to a subset of elements.
    """
    dofs = mesh.dof_map() if dofs is None else dofs
    n = int(dofs.max()) + 1 if dofs.size else 0
    E = mesh.elements()
    coeff = np.asarray(coeff, dtype=float)
    mw = np.ones(mesh.n_elements) if mass_weight is None else np.asarray(mass_weight, dtype=float)
    if element_mask is not None:
        E, coeff, mw = E[element_mask], coeff[element_mask], mw[element_mask]
    K = _sum_blocks(E, element_stiffness(coeff), dofs, n)
    M = _sum_blocks(E, (mesh.h**2 * mw)[:, None, None] * MREF, dofs, n)
    return K, M


def _tensor_row(A) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(2, 2)
    if not np.allclose(A, A.T) or np.linalg.eigvalsh(A).min() <= 0:
        raise ConstraintViolation("coefficient matrices must be symmetric positive definite")
    return np.array([A[0, 0], 0.5 * (A[0, 1] + A[1, 0]), A[1, 1]])


def element_phases(mesh: Mesh, geom: ScaledGeometry | None) -> np.ndarray:
    if geom is None:
        return np.full(mesh.n_elements, PHASE_MATRIX, dtype=np.int8)
    return geom.phases(mesh.midpoints())


def coefficient_field(phases, epsilon: float, A1, A2=None) -> np.ndarray:
    """Per-element ``[c00, c01, c11]`` of chi1*A1 + chi0*eps^2*Id + chi2*A2."""
    out = np.empty((len(phases), 3))
    out[:] = _tensor_row(A1)
    out[phases == PHASE_INCLUSION] = [epsilon**2, 0.0, epsilon**2]
    if np.any(phases == PHASE_DEFECT):
        out[phases == PHASE_DEFECT] = _tensor_row(np.eye(2) if A2 is None else A2)
    return out


def required_h(geom: ScaledGeometry) -> float:
    """Resolution floor: at least four elements across the smallest inclusion radius."""
    if geom.n_kept == 0:
        return np.inf
    return geom.epsilon * float(geom.realization.radii[geom.keep].min()) / 4.0


def assemble_operator(mesh: Mesh, geom: ScaledGeometry | None, A1=np.eye(2), A2=None,
                      check_resolution: bool = True) -> OperatorPair:
    """Discretise the form of the high-contrast operator on ``mesh``.

    With ``geom=None`` every element is matrix (homogeneous A1 medium).
    """
    if geom is not None:
        x0, x1, y0, y1 = mesh.box
        gx0, gx1, gy0, gy1 = geom.region
        tol = 1e-9 * max(1.0, abs(x1 - x0))
        if x0 < gx0 - tol or x1 > gx1 + tol or y0 < gy0 - tol or y1 > gy1 + tol:
            raise ConstraintViolation(f"mesh box {mesh.box} not inside geometry region {geom.region}")
        if check_resolution and mesh.h > required_h(geom) * (1 + 1e-12):
            raise ConstraintViolation(f"h={mesh.h:.4g} violates resolution floor; need h <= {required_h(geom):.4g}")
    phases = element_phases(mesh, geom)
    eps = geom.epsilon if geom is not None else 1.0
    A2 = geom.defect.A2 if (geom is not None and A2 is None) else A2
    coeff = coefficient_field(phases, eps, A1, A2)
    dofs = mesh.dof_map()
    K, M = assemble_matrices(mesh, coeff, dofs=dofs)
    return OperatorPair(K=K, M=M, mesh=mesh, dofs=dofs, phases=phases,
                        info={"epsilon": eps, "h": mesh.h, "n_dofs": K.shape[0]})


def shape_contains(kind: str, radius: float, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if kind == "disk":
        return pts[..., 0] ** 2 + pts[..., 1] ** 2 < radius**2
    if kind == "square":
        return (np.abs(pts[..., 0]) < radius) & (np.abs(pts[..., 1]) < radius)
    raise ConfigurationError(f"unknown shape {kind!r}")


def interior_nodes(mesh: Mesh, element_mask: np.ndarray) -> np.ndarray:
    """Boolean node mask: nodes all of whose four neighbouring elements are in ``element_mask``."""
    em = np.zeros((mesh.ny + 2, mesh.nx + 2), dtype=bool)
    em[1:-1, 1:-1] = np.asarray(element_mask).reshape(mesh.ny, mesh.nx)
    inside = em[:-1, :-1] & em[:-1, 1:] & em[1:, :-1] & em[1:, 1:]
    return inside.ravel()


def assemble_reference_shape(kind: str, radius: float, h: float, min_elements: float = 16.0) -> OperatorPair:
    """Dirichlet Laplacian on an inclusion shape centred at a grid node.

    The discrete shape is the union of elements whose midpoints lie inside it,
    and the unknowns are the nodes strictly interior to that union.  This is
    the same rule the high-contrast assembly uses, so the resulting spectrum is
    exactly the one seen by a grid-aligned inclusion of the ε-problem.

    ``min_elements`` is the resolution floor across the shape.  Tables meant
    to match an ε-grid exactly may lower it to that grid's own floor (8).
    """
    extent = radius
    if 2.0 * extent / h < min_elements - 1e-9:
        raise ConstraintViolation(
            f"h={h} too coarse: {2 * extent / h:.1f} < {min_elements:g} elements across the shape")
    m = int(np.ceil(extent / h)) + 1
    mesh = Mesh(box=(-m * h, m * h, -m * h, m * h), h=float(h), nx=2 * m, ny=2 * m, bc="none")
    inside = shape_contains(kind, radius, mesh.midpoints())
    free = interior_nodes(mesh, inside)
    dofs = -np.ones(mesh.n_nodes, dtype=np.int64)
    dofs[free] = np.arange(int(free.sum()))
    coeff = np.tile([1.0, 0.0, 1.0], (mesh.n_elements, 1))
    K, M = assemble_matrices(mesh, coeff, dofs=dofs, element_mask=inside)
    return OperatorPair(K=K, M=M, mesh=mesh, dofs=dofs,
                        phases=np.where(inside, PHASE_INCLUSION, PHASE_MATRIX).astype(np.int8),
                        info={"shape": kind, "radius": radius, "h": h,
                              "area": float(inside.sum()) * h * h,
                              "load": load_vector(mesh, dofs, element_mask=inside)})


def element_values(mesh: Mesh, u_nodes) -> np.ndarray:
    """(n_el, 4) corner values of a node field."""
    return np.asarray(u_nodes).ravel()[mesh.elements()]


def gauss_values(mesh: Mesh, u_nodes) -> np.ndarray:
    """(n_el, 4) values of the bilinear interpolant at the element Gauss points."""
    return element_values(mesh, u_nodes) @ SHAPE_AT_GAUSS.T


def element_gradient_at_center(mesh: Mesh, u_nodes) -> np.ndarray:
    ue = element_values(mesh, u_nodes)
    gx, gy = _shape_grad(np.array([0.5, 0.5]))
    return np.stack([ue @ gx, ue @ gy], -1) / mesh.h


def l2_norm(mesh: Mesh, u_nodes, element_mask=None) -> float:
    """Exact L2 norm of the bilinear interpolant (optionally over a subset of elements)."""
    ue = element_values(mesh, u_nodes)
    e2 = np.einsum("ea,ab,eb->e", ue, MREF, ue) * mesh.h**2
    if element_mask is not None:
        e2 = e2[element_mask]
    return float(np.sqrt(max(e2.sum(), 0.0)))


def element_energy(mesh: Mesh, u_nodes, coeff) -> np.ndarray:
    ue = element_values(mesh, u_nodes)
    return np.einsum("ea,eab,eb->e", ue, element_stiffness(coeff), ue)


def element_masses(mesh: Mesh, u_nodes) -> np.ndarray:
    """Exact per-element ∫ u² of the bilinear interpolant."""
    ue = element_values(mesh, u_nodes)
    return np.einsum("ea,ab,eb->e", ue, MREF, ue) * mesh.h**2


def evaluate(mesh: Mesh, u_nodes, pts, gradient: bool = False):
    """Bilinear field (and optionally its gradient) at arbitrary points inside the mesh box."""
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    x0, _, y0, _ = mesh.box
    s = (flat[:, 0] - x0) / mesh.h
    t = (flat[:, 1] - y0) / mesh.h
    i = np.clip(np.floor(s).astype(np.int64), 0, mesh.nx - 1)
    j = np.clip(np.floor(t).astype(np.int64), 0, mesh.ny - 1)
    xi, eta = s - i, t - j
    u = np.asarray(u_nodes, dtype=float).reshape(mesh.shape)
    u00, u10, u11, u01 = u[j, i], u[j, i + 1], u[j + 1, i + 1], u[j + 1, i]
    val = (u00 * (1 - xi) * (1 - eta) + u10 * xi * (1 - eta) + u11 * xi * eta + u01 * (1 - xi) * eta)
    val = val.reshape(pts.shape[:-1])
    if not gradient:
        return val
    gx = ((u10 - u00) * (1 - eta) + (u11 - u01) * eta) / mesh.h
    gy = ((u01 - u00) * (1 - xi) + (u11 - u10) * xi) / mesh.h
    return val, np.stack([gx, gy], -1).reshape(pts.shape)


def load_vector(mesh: Mesh, dofs=None, element_mask=None, weight=None) -> np.ndarray:
    """F_i = ∫ w ψ_i over the selected elements (w piecewise constant, default 1)."""
    dofs = mesh.dof_map() if dofs is None else dofs
    n = int(dofs.max()) + 1 if dofs.size else 0
    E = mesh.elements()
    w = np.ones(mesh.n_elements) if weight is None else np.asarray(weight, dtype=float)
    if element_mask is not None:
        E, w = E[element_mask], w[element_mask]
    d = dofs[E]
    vals = np.repeat(0.25 * mesh.h**2 * w, 4)
    ok = d.ravel() >= 0
    return np.bincount(d.ravel()[ok], weights=vals[ok], minlength=n)
