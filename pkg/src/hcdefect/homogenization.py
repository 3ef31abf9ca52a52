"""Homogenised coefficients, the nonlinear defect eigenproblem and its two-scale pieces."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy import optimize, special

from .eigensolver import SymmetricFactor
from .errors import ConfigurationError, ConvergenceError, DomainError
from .fem import (GRAD_INT, Mesh, _tensor_row, assemble_matrices, build_mesh, element_stiffness,
                  interior_nodes)
from .geometry import DefectSpec, InclusionRealization, RandomMediumSpec, sample_realization
from .spectral import DirichletModeTable

log = logging.getLogger(__name__)

DIRECT_LIMIT = 400_000
ROOT_TOL = 1e-8
MULTIPLICITY_TOL = 1e-6


# --------------------------------------------------------------------------- linear algebra


def solve_spd(A, b, tol: float = 1e-12):
    """Solve an SPD system: sparse LU when small, AMG-preconditioned CG otherwise."""
    A = sp.csr_matrix(A)
    B = np.atleast_2d(np.asarray(b, dtype=float).T).T
    if A.shape[0] <= DIRECT_LIMIT:
        f = SymmetricFactor(A)
        X = np.column_stack([f.solve(B[:, k]) for k in range(B.shape[1])])
    else:
        import pyamg

        # pyamg's smoother setup draws a start vector from the global numpy RNG; pin it for reproducible output
        state = np.random.get_state()
        np.random.seed(0)
        try:
            ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=500)
        finally:
            np.random.set_state(state)
        X = np.zeros_like(B)
        for k in range(B.shape[1]):
            res = []
            X[:, k] = ml.solve(B[:, k], tol=tol, accel="cg", maxiter=500, residuals=res)
            if res[-1] > 10 * tol * res[0]:
                raise ConvergenceError(f"AMG-CG stalled at relative residual {res[-1] / res[0]:.2e}")
    return X.reshape(np.shape(b))


def harmonic_fill(mesh: Mesh, u_nodes, element_mask) -> np.ndarray:
    """Replace ``u`` at nodes interior to ``element_mask`` by the discrete harmonic extension.

    Each connected patch of masked elements gets the Laplace solution whose
    boundary values are the unchanged nodes around it.
    """
    u = np.array(u_nodes, dtype=float).ravel()
    free = interior_nodes(mesh, element_mask)
    if not free.any():
        return u.reshape(mesh.shape)
    E = mesh.elements()[element_mask]
    touched = np.unique(E)
    loc = -np.ones(mesh.n_nodes, dtype=np.int64)
    loc[touched] = np.arange(len(touched))
    K = _lap_blocks(E, loc, len(touched))
    fi = free[touched]
    Kff = K[fi][:, fi]
    rhs = -K[fi][:, ~fi] @ u[touched[~fi]]
    u[touched[fi]] = solve_spd(Kff, rhs)
    return u.reshape(mesh.shape)


def _lap_blocks(E, loc, n):
    from .fem import _sum_blocks

    blocks = element_stiffness(np.tile([1.0, 0.0, 1.0], (len(E), 1)))
    return _sum_blocks(E, blocks, loc, n)


# --------------------------------------------------------------------------- correctors


def inclusion_element_mask(mesh: Mesh, real: InclusionRealization, scale: float = 1.0) -> np.ndarray:
    """Elements whose midpoint lies in an inclusion of ``real`` scaled by ``scale``."""
    mid = mesh.midpoints() / scale
    out = np.zeros(mesh.n_elements, dtype=bool)
    if len(real) == 0:
        return out
    ci = np.floor(mid[:, 0]).astype(np.int64)
    cj = np.floor(mid[:, 1]).astype(np.int64)
    i0, j0 = real.cells.min(0)
    i1, j1 = real.cells.max(0)
    table = -np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=np.int64)
    table[real.cells[:, 0] - i0, real.cells[:, 1] - j0] = np.arange(len(real))
    ok = (ci >= i0) & (ci <= i1) & (cj >= j0) & (cj <= j1)
    k = np.full(len(mid), -1, dtype=np.int64)
    k[ok] = table[ci[ok] - i0, cj[ok] - j0]
    has = k >= 0
    rel = mid[has] - real.centers[k[has]]
    r = real.radii[k[has]]
    if real.shape_kind == "disk":
        inside = rel[:, 0] ** 2 + rel[:, 1] ** 2 < r**2
    else:
        inside = (np.abs(rel[:, 0]) < r) & (np.abs(rel[:, 1]) < r)
    out[np.flatnonzero(has)[inside]] = True
    return out


@dataclass
class CorrectorField:
    direction: int
    mesh: Mesh
    N: np.ndarray
    matrix_mask: np.ndarray
    flux: np.ndarray
    residual: float
    mean: float

    @property
    def zero_mean(self) -> bool:
        return abs(self.mean) <= 1e-10 * max(1.0, np.abs(self.N).max())

    def gradient(self) -> np.ndarray:
        """Element-centre gradient p_j = ∇N_j, shape (n_el, 2)."""
        from .fem import element_gradient_at_center

        return element_gradient_at_center(self.mesh, self.N)


def _cell_rhs(mesh, dofs, n, A1row, j, mask):
    E = mesh.elements()[mask]
    Ae = np.array([[A1row[0], A1row[1]], [A1row[1], A1row[2]]])[:, j]
    vals = mesh.h * (Ae @ GRAD_INT)
    G = np.bincount(dofs[E].ravel(), weights=np.tile(vals, len(E)), minlength=n)
    return G


def cell_correctors(real: InclusionRealization, A1=np.eye(2), h: float = 1.0 / 16) -> list[CorrectorField]:
    """Both corrector fields of a periodised cell (the realization's region).

    The perforated equation is posed on the nodes touched by matrix elements,
    made definite by pinning one node, extended harmonically into the
    inclusions and shifted to zero cell mean.
    """
    mesh = build_mesh(real.region, h, bc="periodic")
    incl = inclusion_element_mask(mesh, real)
    matrix = ~incl
    if not matrix.any():
        raise ConfigurationError("cell has no matrix phase")
    dofs = mesh.dof_map()
    n = mesh.n_dofs
    row = _tensor_row(A1)
    K, M = assemble_matrices(mesh, np.tile(row, (mesh.n_elements, 1)), dofs=dofs, element_mask=matrix)
    _, Mfull = assemble_matrices(mesh, np.tile(row, (mesh.n_elements, 1)), dofs=dofs)
    act = np.zeros(n, dtype=bool)
    act[np.unique(dofs[mesh.elements()[matrix]])] = True
    idx = np.flatnonzero(act)
    free = idx[1:]  # first matrix dof pinned to zero; the mean is removed afterwards
    Kff = K[free][:, free]
    Gs = [_cell_rhs(mesh, dofs, n, row, j, matrix) for j in (0, 1)]
    X = solve_spd(Kff, np.column_stack([-G[free] for G in Gs]))
    out = []
    cell_area = mesh.area
    for j in (0, 1):
        Nd = np.zeros(n)
        Nd[free] = X[:, j]
        resid = float(np.linalg.norm((K @ Nd + Gs[j])[act]) / max(np.linalg.norm(Gs[j]), 1e-300))
        if not np.linalg.norm(Gs[j]) > 0:
            resid = 0.0
        nodes = mesh.to_nodes(Nd, dofs)
        nodes = harmonic_fill(mesh, nodes, incl)
        Nd = mesh.from_nodes(nodes, dofs)
        mean = float(np.ones(n) @ (Mfull @ Nd)) / cell_area
        Nd = Nd - mean
        mean_after = float(np.ones(n) @ (Mfull @ Nd)) / cell_area
        out.append(CorrectorField(direction=j, mesh=mesh, N=mesh.to_nodes(Nd, dofs), matrix_mask=matrix,
                                  flux=Gs[j], residual=resid, mean=mean_after))
    return out


def cell_tensor(correctors: list[CorrectorField], A1=np.eye(2)) -> np.ndarray:
    """(1/|cell|) ∫_matrix A1(e_i + ∇N_i)·(e_j + ∇N_j) for one cell."""
    mesh = correctors[0].mesh
    dofs = mesh.dof_map()
    A1 = np.asarray(A1, dtype=float)
    matrix = correctors[0].matrix_mask
    area_m = float(matrix.sum()) * mesh.h**2
    Nd = [mesh.from_nodes(c.N, dofs) for c in correctors]
    T = area_m * A1.copy()
    for i in range(2):
        for j in range(2):
            T[i, j] += correctors[i].flux @ Nd[j]
    T = 0.5 * (T + T.T)
    return T / mesh.area


def matrix_fraction(correctors: list[CorrectorField]) -> float:
    return float(correctors[0].matrix_mask.mean())


@dataclass
class HomogenizedTensor:
    A: np.ndarray
    samples: np.ndarray
    stderr: np.ndarray
    voigt: np.ndarray
    reuss: np.ndarray
    matrix_fractions: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def lam_max(self) -> float:
        return float(np.linalg.eigvalsh(self.A).max())

    @property
    def lam_min(self) -> float:
        return float(np.linalg.eigvalsh(self.A).min())

    def sandwich_ok(self, tol: float = 1e-12) -> bool:
        """reuss ≤ A ≤ voigt as quadratic forms."""
        lo = np.linalg.eigvalsh(self.A - self.reuss).min()
        hi = np.linalg.eigvalsh(self.voigt - self.A).min()
        scale = max(1.0, np.abs(self.voigt).max())
        return bool(lo >= -tol * scale and hi >= -tol * scale)


def homogenized_tensor(corrector_sets: list[list[CorrectorField]], A1=np.eye(2)) -> HomogenizedTensor:
    if not corrector_sets:
        raise ConfigurationError("need at least one corrector sample")
    A1 = np.asarray(A1, dtype=float)
    S = np.array([cell_tensor(c, A1) for c in corrector_sets])
    fr = np.array([matrix_fraction(c) for c in corrector_sets])
    A = S.mean(0)
    se = S.std(0, ddof=1) / np.sqrt(len(S)) if len(S) > 1 else np.zeros((2, 2))
    # arithmetic mean of the perforated medium; the harmonic mean vanishes with the soft phase dropped
    return HomogenizedTensor(A=A, samples=S, stderr=se, voigt=fr.mean() * A1, reuss=np.zeros((2, 2)),
                             matrix_fractions=fr)


def estimate_homogenized_tensor(spec: RandomMediumSpec, A1=np.eye(2), cell_side: int = 4, h: float = 1.0 / 16,
                                mc_cells: int = 8, seed: int = 0) -> HomogenizedTensor:
    """Monte-Carlo over independent periodised ``cell_side × cell_side`` cells."""
    sets = []
    for k in range(mc_cells):
        # each sample is a distinct block of the same counter-based field
        real = sample_realization(spec, (0.0, cell_side, 0.0, cell_side), seed=_sample_seed(seed, k))
        sets.append(cell_correctors(real, A1, h))
    ht = homogenized_tensor(sets, A1)
    ht.info.update({"cell_side": cell_side, "h": h, "mc_cells": mc_cells, "seed": seed})
    return ht


def _sample_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


# --------------------------------------------------------------------------- defect problem


@dataclass
class DefectEigenpair:
    lam0: float
    u0: np.ndarray
    mesh: Mesh
    multiplicity: int
    theta: float
    branch: int
    trace: list
    residual: float = 0.0
    energy_gap: float = 0.0

    def u0_nodes(self) -> np.ndarray:
        return self.mesh.to_nodes(self.u0)


class DefectPencil:
    """The λ-dependent pencil (K - β(λ) M_out) u = ν M_S2 u on a truncated box."""

    def __init__(self, mesh: Mesh, A_hom, defect: DefectSpec, beta_fn):
        if mesh.bc != "dirichlet":
            raise ConfigurationError("defect problem needs a Dirichlet-truncated mesh")
        self.mesh = mesh
        self.defect = defect
        self.beta_fn = beta_fn
        self.in_def = defect.contains(mesh.midpoints())
        coeff = np.empty((mesh.n_elements, 3))
        coeff[:] = _tensor_row(A_hom)
        coeff[self.in_def] = _tensor_row(defect.A2)
        self.K, M_def = assemble_matrices(mesh, coeff, mass_weight=self.in_def.astype(float))
        _, self.M_out = assemble_matrices(mesh, coeff, mass_weight=(~self.in_def).astype(float))
        self.M_def = M_def
        self.M = self.M_def + self.M_out
        self.trace: list = []
        if not self.in_def.any():
            raise ConfigurationError("defect not resolved by the macro mesh")

    def nus(self, lam: float, k: int):
        b = self.beta_fn(lam)
        if b >= 0:
            raise DomainError(f"beta({lam}) = {b} >= 0: outside a gap")
        A = (self.K - b * self.M_out).tocsc()
        f = SymmetricFactor(A)
        n = A.shape[0]
        # M_def is singular; the shift-invert mode only needs it semi-definite
        w, V = sla.eigsh(A, k=k, M=self.M_def, sigma=0.0, which="LM", OPinv=f.as_operator(),
                         v0=np.random.default_rng(7).standard_normal(n), tol=1e-13)
        o = np.argsort(w)
        w, V = w[o], V[:, o]
        self.trace.append((float(lam), float(b), [float(x) for x in w]))
        return w, V

    def residual(self, lam, u):
        b = self.beta_fn(lam)
        r = self.K @ u - b * (self.M_out @ u) - lam * (self.M_def @ u)
        return float(np.linalg.norm(r) / (max(abs(lam), 1.0) * np.linalg.norm(self.M @ u)))


def defect_eigenproblem(A_hom, defect: DefectSpec, beta_fn, gap, mesh: Mesh, m_max: int = 6,
                        n_grid: int = 9, A1_for_theta=None) -> list[DefectEigenpair]:
    """All λ0 in ``gap`` with ν_k(λ0) = λ0 for branches k < m_max.

    Each ν_k decreases in λ (β is increasing and enters with a minus sign),
    so ν_k(λ) - λ has at most one root per branch; it is bracketed on a grid
    and polished with Brent's bracketing method to ``ROOT_TOL``.
    """
    lo, hi = (float(v) for v in gap)
    pencil = DefectPencil(mesh, A_hom, defect, beta_fn)
    span = hi - lo
    grid = np.linspace(lo + 1e-3 * span, hi - 1e-3 * span, n_grid)
    k = min(m_max, pencil.K.shape[0] - 2)
    vals = np.array([pencil.nus(x, k)[0] for x in grid]) - grid[:, None]
    roots = []
    for br in range(k):
        g = vals[:, br]
        s = np.flatnonzero((g[:-1] > 0) & (g[1:] <= 0))
        for i in s:
            def f(lam, br=br):
                return pencil.nus(lam, k)[0][br] - lam

            r = optimize.brentq(f, grid[i], grid[i + 1], xtol=ROOT_TOL, rtol=4 * np.finfo(float).eps)
            roots.append((r, br))
    roots.sort()
    pairs = []
    theta_A = A_hom if A1_for_theta is None else A1_for_theta
    for r, br in roots:
        w, V = pencil.nus(r, k)
        same = np.flatnonzero(np.abs(w - r) <= MULTIPLICITY_TOL * max(1.0, abs(r)))
        if br not in same:
            same = np.array([br])
        u = V[:, br]
        nrm = np.sqrt(u @ (pencil.M @ u))
        u = u / nrm
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        bval = beta_fn(r)
        energy = u @ (pencil.K @ u)
        expect = bval * (u @ (pencil.M_out @ u)) + r * (u @ (pencil.M_def @ u))
        pairs.append(DefectEigenpair(lam0=float(r), u0=u, mesh=mesh, multiplicity=int(len(same)),
                                     theta=theta_bound(r, beta_fn, theta_A), branch=int(br),
                                     trace=list(pencil.trace), residual=pencil.residual(r, u),
                                     energy_gap=float(abs(energy - expect) / max(abs(energy), 1e-300))))
    return _dedupe(pairs)


def _dedupe(pairs):
    out = []
    for p in pairs:
        if out and abs(p.lam0 - out[-1].lam0) <= MULTIPLICITY_TOL * max(1.0, abs(p.lam0)):
            continue
        out.append(p)
    return out


def theta_bound(lam0: float, beta_fn, A_hom) -> float:
    b = float(beta_fn(lam0)) if callable(beta_fn) else float(beta_fn)
    if b >= 0:
        raise DomainError(f"beta({lam0}) = {b} >= 0")
    lmax = float(np.linalg.eigvalsh(np.asarray(A_hom, dtype=float)).max())
    return 0.95 * np.sqrt(-b / lmax)


# --------------------------------------------------------------------------- radial oracle


def radial_mismatch(lam: float, beta_val: float, a_hom: float, a2: float, R: float, m: int = 0) -> float:
    """Flux mismatch of the separable solution J_m inside / K_m outside a disk defect.

    Scaled so that the sign is meaningful between consecutive Bessel zeros.
    """
    k = np.sqrt(lam / a2)
    kap = np.sqrt(-beta_val / a_hom)
    jin = special.jv(m, k * R)
    djin = special.jvp(m, k * R)
    kout = special.kve(m, kap * R)
    dkout = special.kvp(m, kap * R) * np.exp(kap * R)
    return a2 * k * djin * kout - a_hom * kap * dkout * jin


def radial_defect_roots(beta_fn, a_hom: float, a2: float, R: float, gap, m_max: int = 3,
                        n_grid: int = 400) -> list[tuple[float, int]]:
    """Defect eigenvalues of the isotropic radial problem, (λ0, angular order m)."""
    lo, hi = gap
    span = hi - lo
    xs = np.linspace(lo + 1e-4 * span, hi - 1e-4 * span, n_grid)
    out = []
    for m in range(m_max):
        def f(lam, m=m):
            return radial_mismatch(lam, beta_fn(lam), a_hom, a2, R, m)

        fs = np.array([f(x) for x in xs])
        for i in np.flatnonzero(np.sign(fs[:-1]) * np.sign(fs[1:]) < 0):
            r = optimize.brentq(f, xs[i], xs[i + 1], xtol=1e-12)
            # discard sign flips caused by J_m zeros crossing (the function itself is continuous)
            if abs(f(r)) < 1e-6 * max(abs(fs[i]), abs(fs[i + 1])) + 1e-9:
                out.append((float(r), m))
    return sorted(out)


def tune_defect_coefficient(beta_fn, a_hom: float, R: float, target: float, bracket=(0.5, 50.0)) -> float:
    """a2 placing the ground radial defect mode (m = 0) at ``target``."""
    b = beta_fn(target)
    if b >= 0:
        raise DomainError("target outside a gap")

    def g(a2):
        return radial_mismatch(target, b, a_hom, a2, R, 0)

    a_lo, a_hi = bracket
    xs = np.geomspace(a_lo, a_hi, 200)
    gs = np.array([g(x) for x in xs])
    # the ground mode corresponds to the largest a2 at which the mismatch changes sign
    idx = np.flatnonzero(np.sign(gs[:-1]) * np.sign(gs[1:]) < 0)
    if not len(idx):
        raise ConvergenceError("no a2 places a defect mode at the target")
    i = idx[-1]
    return float(optimize.brentq(g, xs[i], xs[i + 1], xtol=1e-13))


# --------------------------------------------------------------------------- microscopic part


@dataclass
class MicroscopicComponent:
    """u1(x, y) = λ0 u0(x) b_λ0(y), stored separably."""

    lam0: float
    u0: np.ndarray
    table: DirichletModeTable | None
    coefficients: np.ndarray

    def b_mean(self) -> float:
        if self.table is None:
            return 0.0
        return float(self.coefficients @ self.table.field_integrals())

    def b_field(self) -> np.ndarray:
        if self.table is None:
            return np.zeros(0)
        return self.coefficients @ self.table.basis_fields()

    def evaluate(self, u0_value, b_value):
        return self.lam0 * np.asarray(u0_value) * np.asarray(b_value)

    def mean_rhs_factor(self, volume_density: float = 1.0) -> float:
        """λ0 + λ0² ⟨b⟩, the factor multiplying u0 on the right side of the macroscopic equation."""
        return self.lam0 + self.lam0 * self.lam0 * self.b_mean() * volume_density

    def norm_squared(self, u0_norm_sq: float) -> float:
        """‖u1‖² = λ0² ‖u0‖² ∫ b² (per unit cell)."""
        if self.table is None or self.lam0 == 0.0:
            return 0.0
        b = self.b_field()
        return self.lam0**2 * u0_norm_sq * float(b @ (self.table.op.M @ b))


def microscopic_component(u0, lam0: float, table: DirichletModeTable | None) -> MicroscopicComponent:
    if lam0 == 0.0 or table is None:
        return MicroscopicComponent(0.0 if table is None else float(lam0), np.asarray(u0), table,
                                    np.zeros(0 if table is None else table.moment_order + table.n_modes))
    table.check_pole(lam0)
    return MicroscopicComponent(float(lam0), np.asarray(u0), table, table.coefficients(lam0))


def macro_mesh(R_box: float, h: float) -> Mesh:
    return build_mesh((-R_box, R_box, -R_box, R_box), h, bc="dirichlet")


__all__ = [
    "CorrectorField", "DefectEigenpair", "DefectPencil", "HomogenizedTensor", "MicroscopicComponent",
    "cell_correctors", "cell_tensor", "defect_eigenproblem", "estimate_homogenized_tensor", "harmonic_fill",
    "homogenized_tensor", "inclusion_element_mask", "macro_mesh", "microscopic_component", "radial_defect_roots",
    "radial_mismatch", "solve_spd", "theta_bound", "tune_defect_coefficient",
]
