"""Dirichlet data of the inclusions, the β-function and its window-supremum variant.

``∫_O b_λ`` is evaluated from a truncated Dirichlet eigen-expansion whose
leading behaviour is carried by exact moments ``S_k = 1ᵀM(K⁻¹M)^k 1``:

    Σ_n m_n² / (λ_n - λ) = Σ_{k=1..K} λ^{k-1} S_k + λ^K Σ_n m_n² / (λ_n^K (λ_n - λ)),

which is an identity term by term, so truncating the last sum at N modes
leaves a tail of relative size ``(λ/λ_N)^K`` smaller than the plain sum's.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as sla

from .eigensolver import SymmetricFactor, lowest_eigenpairs, m_orthonormalize
from .errors import ConfigurationError, ConvergenceError, DomainError, PoleProximityError
from .fem import GAUSS_W, OperatorPair, assemble_reference_shape, gauss_values
from .geometry import InclusionRealization, RandomMediumSpec

POLE_EXCLUSION = 1e-6
MEAN_THRESHOLD = 1e-6
BISECTION_TOL = 1e-9
DENSE_LIMIT = 1200
# default reference-table resolution: elements per radius (half-side for squares)
ELEMENTS_PER_RADIUS = 64


def default_h(radius: float) -> float:
    return float(radius) / ELEMENTS_PER_RADIUS


@dataclass
class DirichletModeTable:
    shape: str
    radius: float
    h: float
    eigenvalues: np.ndarray
    means: np.ndarray
    modes: np.ndarray
    moments: np.ndarray
    moment_fields: np.ndarray
    load: np.ndarray
    unit_mass: float
    area: float
    op: OperatorPair
    richardson: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def moment_order(self) -> int:
        return len(self.moments)

    @property
    def lambda_1(self) -> float:
        return float(self.eigenvalues[0])

    def poles(self) -> np.ndarray:
        """Eigenvalues whose eigenfunctions have non-zero mean."""
        scale = np.sqrt(max(self.unit_mass, 1e-300))
        return self.eigenvalues[np.abs(self.means) > MEAN_THRESHOLD * scale]

    def check_pole(self, lam: float) -> None:
        d = np.abs(self.eigenvalues - lam)
        if d.min() <= POLE_EXCLUSION * self.lambda_1:
            n = int(np.argmin(d))
            raise PoleProximityError(f"lambda={lam} within {d[n]:.3g} of Dirichlet eigenvalue {self.eigenvalues[n]}")

    def coefficients(self, lam) -> np.ndarray:
        """Weights of ``[moment fields..., modes...]`` reproducing ``b_lam``; shape (..., K + N)."""
        lam = np.asarray(lam, dtype=float)
        K = self.moment_order
        pw = lam[..., None] ** np.arange(K)
        ln = self.eigenvalues
        modal = (lam[..., None] ** K) * self.means / (ln**K * (ln - lam[..., None]))
        return np.concatenate([pw, modal], axis=-1)

    def field_integrals(self) -> np.ndarray:
        """∫ of each basis field over the shape: S_1..S_K, then m_n."""
        return np.concatenate([self.moments, self.means])

    def basis_fields(self) -> np.ndarray:
        """(K + N, n_dofs) basis fields matching :meth:`coefficients`."""
        return np.vstack([self.moment_fields, self.modes])

    def b_field(self, lam: float) -> np.ndarray:
        self.check_pole(lam)
        return self.coefficients(lam) @ self.basis_fields()


def dirichlet_modes(shape: str, radius: float, h: float | None = None, n_modes: int = 40, moment_order: int = 2,
                    richardson: bool = False, min_elements: float = 16.0) -> DirichletModeTable:
    """First ``n_modes`` Dirichlet eigenpairs of a centred inclusion with their means."""
    h = default_h(radius) if h is None else float(h)
    op = assemble_reference_shape(shape, radius, h, min_elements=min_elements)
    n = op.n
    if n <= DENSE_LIMIT:
        # small shapes: the full spectrum is cheap, keep all of it so the expansion is exact
        n_modes = n
        w, Q = scipy.linalg.eigh(op.K.toarray(), op.M.toarray())
        lam, V = m_orthonormalize(op.M, w[:n_modes], Q[:, :n_modes])
    else:
        if n_modes > n // 4:
            raise ConfigurationError(f"{n_modes} modes requested but only {n} dofs (need N <= dof/4)")
        try:
            lam, V = lowest_eigenpairs(op.K, op.M, n_modes)
        except Exception as exc:  # ARPACK failures surface here
            raise ConvergenceError(f"Dirichlet solve failed: {exc}") from exc
    F = op.info["load"]
    means = V.T @ F
    sgn = np.where(means < -1e-14, -1.0, 1.0)
    V = V * sgn[None, :]
    means = means * sgn
    f = SymmetricFactor(op.K)
    fields, moments = [], []
    w = f.solve(F)
    for _ in range(moment_order):
        fields.append(w)
        moments.append(float(F @ w))
        w = f.solve(op.M @ w)
    info = {}
    if richardson:
        fine = assemble_reference_shape(shape, radius, h / 2, min_elements=min_elements)
        lf, _ = lowest_eigenpairs(fine.K, fine.M, 1)
        info = {"h2": h / 2, "lambda_1_h2": float(lf[0]),
                "lambda_1_richardson": float(2 * lf[0] - lam[0])}
    return DirichletModeTable(shape=shape, radius=float(radius), h=float(h), eigenvalues=lam, means=means,
                              modes=V.T.copy(), moments=np.array(moments),
                              moment_fields=np.array(fields).reshape(moment_order, n), load=F,
                              unit_mass=float(F @ sla.spsolve(op.M.tocsc(), F)), area=float(op.info["area"]), op=op,
                              richardson=info)


@dataclass(frozen=True)
class BIntegral:
    value: float
    tail_bound: float


def b_integral(table: DirichletModeTable, lam: float) -> BIntegral:
    table.check_pole(lam)
    lam = float(lam)
    value = float(table.coefficients(lam) @ table.field_integrals())
    K = table.moment_order
    lN = table.eigenvalues[-1]
    rest = max(table.unit_mass - float(np.sum(table.means**2)), 0.0)
    if lam < lN:
        tail = abs(lam) ** K * rest / (lN**K * (lN - lam))
    else:
        tail = np.inf
    return BIntegral(value, float(tail))


def b_integral_direct(table: DirichletModeTable, lam: float) -> float:
    """Independent check: solve (K - lam M) b = F on the shape and integrate."""
    op = table.op
    b = sla.spsolve((op.K - lam * op.M).tocsc(), op.info["load"])
    return float(op.info["load"] @ b)


def b_square_integral(table: DirichletModeTable, lam: float) -> float:
    """∫_O b_lam² from the field (used for the two-scale norm)."""
    b = table.b_field(lam)
    return float(b @ (table.op.M @ b))


class ZhikovBeta:
    """β(λ) = λ + λ² E[∫_O b_λ] per unit cell for an ensemble.

    The table is computed once for radius ``table.radius``; other radii follow
    from exact scaling (eigenvalues ∝ r⁻², ``∫_{O(r)} b_λ = s⁴ B(λ s²)`` with
    ``s = r / table.radius``).  Non-degenerate radius laws are averaged over
    ``mc_samples`` radii drawn with ``seed``.
    """

    def __init__(self, spec: RandomMediumSpec, table: DirichletModeTable, mc_samples: int = 256, seed: int = 0):
        if spec.shape_kind != table.shape:
            raise ConfigurationError("table shape does not match ensemble shape")
        self.spec = spec
        self.table = table
        if spec.degenerate:
            radii = np.array([spec.r_min])
        else:
            radii = np.random.default_rng(seed).uniform(spec.r_min, spec.r_max, int(mc_samples))
        self.radii = radii
        self.scales = radii / table.radius
        self.mc_samples = len(radii)

    def _mass_samples(self, lam: float) -> np.ndarray:
        s = self.scales
        mu = lam * s**2
        for m in np.atleast_1d(mu):
            self.table.check_pole(float(m))
        return s**4 * (self.table.coefficients(mu) @ self.table.field_integrals())

    def mean_b(self, lam: float) -> tuple[float, float]:
        x = self._mass_samples(float(lam))
        se = float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(x.mean()), se

    def value_and_stderr(self, lam: float) -> tuple[float, float]:
        lam = float(lam)
        if lam == 0.0:
            return 0.0, 0.0
        mb, se = self.mean_b(lam)
        return lam + lam * lam * mb, lam * lam * se

    def __call__(self, lam: float) -> float:
        return self.value_and_stderr(lam)[0]

    def spectrum_intervals(self, lam_max: float) -> list[tuple[float, float]]:
        """σ(-Δ_O) ∩ [0, lam_max] as closed intervals (points for degenerate laws)."""
        s_lo, s_hi = self.spec.r_min / self.table.radius, self.spec.r_max / self.table.radius
        out = []
        for ln in self.table.eigenvalues:
            lo, hi = ln / s_hi**2, ln / s_lo**2
            if lo <= lam_max:
                out.append((float(lo), float(min(hi, lam_max))))
        return _merge(out)

    def poles(self, lam_max: float) -> np.ndarray:
        p = np.concatenate([self.table.poles() / s**2 for s in self.scales])
        return np.unique(p[p <= lam_max])


def _merge(intervals):
    intervals = sorted(intervals)
    out = []
    for lo, hi in intervals:
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


@dataclass
class BetaTable:
    lam: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    poles: np.ndarray
    spectrum: list
    descriptor: dict = field(default_factory=dict)

    def rows(self):
        return zip(self.lam, self.values, self.stderr)


@dataclass
class GapSet:
    lam_range: tuple[float, float]
    gaps: list
    G: list
    provenance: str = "beta"

    def contains(self, lam: float) -> bool:
        return any(lo < lam < hi for lo, hi in self.gaps)

    def first_gap(self):
        return self.gaps[0] if self.gaps else None


def beta_table(beta_fn, lam_range, n_grid: int = 400) -> BetaTable:
    """β on a grid avoiding σ(-Δ_O); NaN marks excluded grid points."""
    lo, hi = (float(v) for v in lam_range)
    lam = np.linspace(lo, hi, n_grid)
    spec_iv = beta_fn.spectrum_intervals(hi)
    excl = POLE_EXCLUSION * beta_fn.table.lambda_1
    vals = np.full(n_grid, np.nan)
    errs = np.full(n_grid, np.nan)
    for k, x in enumerate(lam):
        if any(a - excl <= x <= b + excl for a, b in spec_iv):
            continue
        vals[k], errs[k] = beta_fn.value_and_stderr(x)
    return BetaTable(lam=lam, values=vals, stderr=errs, poles=beta_fn.poles(hi), spectrum=spec_iv,
                     descriptor={"shape": beta_fn.spec.shape_kind, "radius_law": beta_fn.spec.radius_law,
                                 "mc_samples": beta_fn.mc_samples})


def _bisect(f, a, b, fa, tol=BISECTION_TOL, max_iter=200):
    for _ in range(max_iter):
        if b - a <= tol:
            break
        c = 0.5 * (a + b)
        fc = f(c)
        if (fc < 0) == (fa < 0):
            a, fa = c, fc
        else:
            b = c
    return a, b


def find_gaps(f, spectrum, lam_range, lambda_1: float, n_grid: int = 400, provenance="beta") -> GapSet:
    """Maximal open intervals inside ``lam_range`` where ``f < 0``, minus ``spectrum``.

    ``f`` is evaluated on a grid in every interval between consecutive pieces
    of ``spectrum``; sign changes are refined by bisection.  An interval
    adjacent to a spectral piece on which ``f`` stays negative up to the
    exclusion distance opens (or closes) the gap at that piece.
    """
    lo, hi = (float(v) for v in lam_range)
    if not hi > lo:
        return GapSet((lo, hi), [], [], provenance)
    excl = 2.0 * POLE_EXCLUSION * lambda_1
    pieces = [(a, b) for a, b in spectrum if b >= lo and a <= hi]
    cuts = [lo] + [v for a, b in pieces for v in (a, b)] + [hi]
    gaps = []
    for a, b in zip(cuts[0::2], cuts[1::2]):
        left_is_spec = a != lo or any(p[1] == lo for p in pieces)
        right_is_spec = b != hi
        a_in = a + excl if left_is_spec else a
        b_in = b - excl if right_is_spec else b
        if not b_in > a_in:
            continue
        n = max(8, int(np.ceil(n_grid * (b_in - a_in) / (hi - lo))))
        xs = np.linspace(a_in, b_in, n)
        fs = np.array([f(x) for x in xs])
        neg = fs < 0
        start = None
        if neg[0]:
            start = a if left_is_spec else (a_in if fs[0] < 0 else None)
        for k in range(1, n):
            if neg[k] and not neg[k - 1]:
                l, r = _bisect(f, xs[k - 1], xs[k], fs[k - 1])
                start = 0.5 * (l + r)
            elif not neg[k] and neg[k - 1]:
                l, r = _bisect(f, xs[k - 1], xs[k], fs[k - 1])
                if start is not None:
                    gaps.append((float(start), float(0.5 * (l + r))))
                start = None
        if neg[-1] and start is not None:
            gaps.append((float(start), float(b if right_is_spec else b_in)))
    gaps = [(a, b) for a, b in gaps if b > a]
    G, cur = [], lo
    for a, b in gaps:
        if a > cur:
            G.append((cur, a))
        cur = b
    if cur < hi:
        G.append((cur, hi))
    return GapSet((lo, hi), gaps, G, provenance)


def gap_intervals(beta_fn: ZhikovBeta, lam_range, n_grid: int = 400) -> GapSet:
    """Gaps of σ(Â^hom): {β < 0} minus σ(-Δ_O), restricted to λ > 0."""
    lo, hi = lam_range
    lo = max(float(lo), 0.0)
    return find_gaps(beta_fn, beta_fn.spectrum_intervals(hi), (lo, hi), beta_fn.table.lambda_1 * beta_fn.scales.min() ** -2,
                     n_grid=n_grid, provenance="beta")


# --------------------------------------------------------------------------- β∞


def _table_gauss(table: DirichletModeTable):
    """Gauss points (relative to the shape centre), weights, and basis values there."""
    op = table.op
    mesh = op.mesh
    inside = op.phases == 0
    pts = mesh.gauss_points()[inside].reshape(-1, 2)
    w = np.full(len(pts), mesh.h**2 * GAUSS_W[0])
    fields = table.basis_fields()
    vals = np.stack([gauss_values(mesh, op.to_nodes(f))[inside].ravel() for f in fields])
    return pts, w, vals


class WindowAverager:
    """Window averages ``ℓ_{λ,L}(x)`` of λ + λ² b_λ over one realization.

    Window membership (full or clipped) is precomputed once per window set,
    so evaluating many λ only recombines precomputed integrals.
    """

    def __init__(self, real: InclusionRealization, table: DirichletModeTable):
        if real.shape_kind != table.shape:
            raise ConfigurationError("table shape does not match realization")
        self.real = real
        self.table = table
        self.pts, self.w, self.vals = _table_gauss(table)
        self.full = (self.vals * self.w[None, :]).sum(1)
        self.scales = real.radii / table.radius

    def _clip_integrals(self, k, box):
        s = self.scales[k]
        p = self.real.centers[k] + s * self.pts
        x0, x1, y0, y1 = box
        ins = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        return (self.vals[:, ins] * self.w[None, ins]).sum(1)

    def prepare(self, boxes):
        """Classify inclusions against a list of windows ``(x0, x1, y0, y1)``."""
        c = self.real.centers
        ext = self.real.radii * (1.0 if self.real.shape_kind == "disk" else 1.0)
        full_w, full_k, clip_w, clip_k, clip_v = [], [], [], [], []
        for wi, (x0, x1, y0, y1) in enumerate(boxes):
            lo_in = (c[:, 0] - ext >= x0) & (c[:, 0] + ext <= x1) & (c[:, 1] - ext >= y0) & (c[:, 1] + ext <= y1)
            touch = (c[:, 0] + ext > x0) & (c[:, 0] - ext < x1) & (c[:, 1] + ext > y0) & (c[:, 1] - ext < y1)
            ks = np.flatnonzero(lo_in)
            full_w.append(np.full(len(ks), wi))
            full_k.append(ks)
            for k in np.flatnonzero(touch & ~lo_in):
                clip_w.append(wi)
                clip_k.append(k)
                clip_v.append(self._clip_integrals(k, (x0, x1, y0, y1)))
        n_f = len(self.full)
        return {
            "boxes": np.asarray(boxes, dtype=float).reshape(-1, 4),
            "full_w": np.concatenate(full_w) if full_w else np.zeros(0, int),
            "full_k": np.concatenate(full_k) if full_k else np.zeros(0, int),
            "clip_w": np.asarray(clip_w, dtype=int),
            "clip_k": np.asarray(clip_k, dtype=int),
            "clip_v": np.asarray(clip_v, dtype=float).reshape(-1, n_f),
        }

    def masses(self, prep, lam: float) -> np.ndarray:
        s = self.scales
        coeff = self.table.coefficients(lam * s**2) * (s**4)[:, None]
        nw = len(prep["boxes"])
        out = np.zeros(nw)
        if len(prep["full_k"]):
            per = coeff @ self.full
            out += np.bincount(prep["full_w"], weights=per[prep["full_k"]], minlength=nw)
        if len(prep["clip_k"]):
            per = np.einsum("kf,kf->k", coeff[prep["clip_k"]], prep["clip_v"])
            out += np.bincount(prep["clip_w"], weights=per, minlength=nw)
        return out

    def ell(self, prep, lam: float) -> np.ndarray:
        b = prep["boxes"]
        area = (b[:, 1] - b[:, 0]) * (b[:, 3] - b[:, 2])
        for mu in np.unique(lam * self.scales**2):
            self.table.check_pole(float(mu))
        return lam + lam * lam * self.masses(prep, lam) / area


def window_box(x, L):
    return (x[0] - L / 2, x[0] + L / 2, x[1] - L / 2, x[1] + L / 2)


def ell_window(real: InclusionRealization, table: DirichletModeTable, lam: float, L: float, x) -> float:
    """ℓ_{λ,L}(x) on an unscaled (ε = 1) realization."""
    box = window_box(np.asarray(x, dtype=float), L)
    x0, x1, y0, y1 = real.region
    tol = 1e-12
    if box[0] < x0 - tol or box[1] > x1 + tol or box[2] < y0 - tol or box[3] > y1 + tol:
        raise DomainError(f"window {box} exceeds realization region {real.region}")
    if lam == 0.0:
        return 0.0
    wa = WindowAverager(real, table)
    return float(wa.ell(wa.prepare([box]), float(lam))[0])


def sliding_boxes(region, L: float, stride: float):
    x0, x1, y0, y1 = region
    xs = np.arange(x0 + L / 2, x1 - L / 2 + 1e-9, stride)
    ys = np.arange(y0 + L / 2, y1 - L / 2 + 1e-9, stride)
    return [window_box((cx, cy), L) for cy in ys for cx in xs]


@dataclass
class BetaInfEstimate:
    lam: float
    Ls: list
    sup_values: list
    estimate: float
    decreasing: bool
    seed: int

    @property
    def trend(self) -> np.ndarray:
        return np.diff(self.sup_values)


class BetaInfinityEstimator:
    """Sliding-window supremum of ℓ_{λ,L} on one realization for several L."""

    def __init__(self, real: InclusionRealization, table: DirichletModeTable, Ls, stride_fraction: float = 0.25):
        side = min(real.region[1] - real.region[0], real.region[3] - real.region[2])
        if max(Ls) > side / 2 + 1e-12:
            raise ConfigurationError(f"max L = {max(Ls)} exceeds half the region side {side}")
        self.real = real
        self.Ls = [float(L) for L in Ls]
        self.avg = WindowAverager(real, table)
        self.preps = [self.avg.prepare(sliding_boxes(real.region, L, stride_fraction * L)) for L in self.Ls]

    @property
    def table(self):
        return self.avg.table

    def sup_values(self, lam: float) -> list[float]:
        if lam == 0.0:
            return [0.0] * len(self.Ls)
        return [float(self.avg.ell(p, float(lam)).max()) for p in self.preps]

    def estimate(self, lam: float) -> BetaInfEstimate:
        sv = self.sup_values(lam)
        dec = bool(np.all(np.diff(sv) <= 1e-12 * max(1.0, abs(lam))))
        return BetaInfEstimate(float(lam), self.Ls, sv, sv[-1], dec, self.real.seed)

    def __call__(self, lam: float) -> float:
        return self.sup_values(lam)[-1]


def beta_infinity(lam: float, spec: RandomMediumSpec, table: DirichletModeTable, Ls=(4, 8, 16, 32),
                  region_side: float = 64.0, seed: int | None = None) -> BetaInfEstimate:
    from .geometry import sample_realization

    real = sample_realization(spec, (0.0, region_side, 0.0, region_side), seed=seed)
    return BetaInfinityEstimator(real, table, Ls).estimate(lam)


def gap_set_G(estimator: BetaInfinityEstimator, beta_fn: ZhikovBeta, lam_range, n_grid: int = 200) -> GapSet:
    """Gaps of 𝒢: {β∞ < 0} minus σ(-Δ_O)."""
    lo, hi = lam_range
    lo = max(float(lo), 0.0)
    return find_gaps(estimator, beta_fn.spectrum_intervals(hi), (lo, hi),
                     beta_fn.table.lambda_1 * beta_fn.scales.min() ** -2, n_grid=n_grid, provenance="beta_inf")
