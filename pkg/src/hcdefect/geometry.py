"""Random inclusion media on the unit lattice.

One inclusion sits in every unit cell ``[i, i+1] x [j, j+1]``.  Its radius and
centre offset are drawn from a counter-based hash of ``(seed, i, j)``, so a
given seed defines one infinite configuration and any finite region is just a
window onto it.  Cells are i.i.d., which makes the lattice shift an ergodic
dynamical system.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConstraintViolation, DomainError

SHAPES = ("disk", "square")

PHASE_INCLUSION = 0
PHASE_MATRIX = 1
PHASE_DEFECT = 2
PHASE_NAMES = {PHASE_INCLUSION: "inclusion", PHASE_MATRIX: "matrix", PHASE_DEFECT: "defect"}

_OFFSET = np.uint64(1 << 31)


def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def cell_uniforms(seed: int, i, j, stream: int) -> np.ndarray:
    """Uniform [0, 1) variates keyed by (seed, cell, stream); pure and vectorised."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(0x5851F42D4C957F2D))
        h = _splitmix64(h ^ (i.astype(np.uint64) + _OFFSET))
        h = _splitmix64(h ^ ((j.astype(np.uint64) + _OFFSET) << np.uint64(1)))
        h = _splitmix64(h ^ np.uint64(stream + 1))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class RandomMediumSpec:
    """Per-cell law of the inclusion ensemble.

    ``radius_law`` is the disk radius or the square half-side.  ``jitter`` is
    the maximal centre offset along each axis; if ``jitter_step`` is set the
    offsets are restricted to its integer multiples (used to keep inclusions
    aligned with a finite-element grid).
    """

    shape_kind: str = "disk"
    radius_law: tuple[float, float] = (0.3, 0.3)
    jitter: float = 0.0
    buffer_gap: float = 0.05
    seed: int = 0
    jitter_step: float | None = None
    cell_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "radius_law", tuple(float(r) for r in self.radius_law))
        self.validate()

    def validate(self) -> None:
        r_min, r_max = self.radius_law
        if self.shape_kind not in SHAPES:
            raise ConstraintViolation(f"unknown shape kind {self.shape_kind!r}")
        if self.cell_size != 1.0:
            raise ConstraintViolation("cell_size is fixed to 1")
        if not 0.0 < r_min <= r_max:
            raise ConstraintViolation(f"radius law must satisfy 0 < r_min <= r_max, got {self.radius_law}")
        if self.jitter < 0 or self.buffer_gap <= 0:
            raise ConstraintViolation("jitter must be >= 0 and buffer_gap > 0")
        if r_max + self.jitter + self.buffer_gap >= 0.5:
            raise ConstraintViolation(
                f"r_max + jitter + buffer_gap = {r_max + self.jitter + self.buffer_gap:.4g} >= 1/2: "
                "buffer would leave its unit cell"
            )
        if self.jitter_step is not None and self.jitter_step <= 0:
            raise ConstraintViolation("jitter_step must be positive")

    @property
    def degenerate(self) -> bool:
        return self.radius_law[0] == self.radius_law[1]

    @property
    def r_min(self) -> float:
        return self.radius_law[0]

    @property
    def r_max(self) -> float:
        return self.radius_law[1]

    def shape_area(self, r):
        r = np.asarray(r, dtype=float)
        return np.pi * r**2 if self.shape_kind == "disk" else 4.0 * r**2

    def mean_volume_fraction(self) -> float:
        """Exact E|O| per unit cell for the uniform radius law."""
        a, b = self.radius_law
        mean_r2 = (a * a + a * b + b * b) / 3.0
        return float(np.pi * mean_r2 if self.shape_kind == "disk" else 4.0 * mean_r2)

    def sample_cells(self, i, j):
        """Radii and centres of the inclusions in cells (i, j)."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        r_min, r_max = self.radius_law
        radii = r_min + (r_max - r_min) * cell_uniforms(self.seed, i, j, 0)
        if self.jitter == 0.0:
            off = np.zeros(i.shape + (2,))
        elif self.jitter_step is None:
            off = np.stack([(2.0 * cell_uniforms(self.seed, i, j, s) - 1.0) * self.jitter for s in (1, 2)], -1)
        else:
            m = int(np.floor(self.jitter / self.jitter_step + 1e-9))
            off = np.stack(
                [(np.floor(cell_uniforms(self.seed, i, j, s) * (2 * m + 1)) - m) * self.jitter_step for s in (1, 2)],
                -1,
            )
        centers = np.stack([i + 0.5, j + 0.5], -1) + off
        return radii, centers


@dataclass(frozen=True)
class InclusionRealization:
    """Inclusions of one configuration inside ``region = (x0, x1, y0, y1)``."""

    region: tuple[float, float, float, float]
    shape_kind: str
    cells: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    buffer_gap: float
    seed: int

    def __len__(self):
        return len(self.radii)

    @property
    def buffer_radii(self) -> np.ndarray:
        return self.radii + self.buffer_gap

    def areas(self) -> np.ndarray:
        return np.pi * self.radii**2 if self.shape_kind == "disk" else 4.0 * self.radii**2

    def volume_fraction(self) -> float:
        x0, x1, y0, y1 = self.region
        return float(self.areas().sum() / ((x1 - x0) * (y1 - y0)))

    def to_text(self) -> str:
        lines = [f"# shape={self.shape_kind} seed={self.seed} buffer_gap={float(self.buffer_gap)!r} region={[float(v) for v in self.region]}",
                 "# i j cx cy radius"]
        for (i, j), (cx, cy), r in zip(self.cells, self.centers, self.radii):
            lines.append(f"{int(i):d} {int(j):d} {float(cx)!r} {float(cy)!r} {float(r)!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "InclusionRealization":
        text = Path(path).read_text().splitlines()
        meta = dict(kv.split("=", 1) for kv in text[0][2:].split(" ", 3))
        region = tuple(float(v) for v in meta["region"].strip("[]").split(","))
        rows = np.array([[float(v) for v in ln.split()] for ln in text[2:] if ln.strip()]).reshape(-1, 5)
        return cls(region=region, shape_kind=meta["shape"], cells=rows[:, :2].astype(np.int64),
                   centers=rows[:, 2:4], radii=rows[:, 4], buffer_gap=float(meta["buffer_gap"]),
                   seed=int(meta["seed"]))


def sample_realization(spec: RandomMediumSpec, region, seed: int | None = None) -> InclusionRealization:
    """Inclusions of every cell whose buffer lies inside ``region``."""
    spec.validate()
    x0, x1, y0, y1 = (float(v) for v in region)
    if min(x1 - x0, y1 - y0) < 1.0:
        raise ConstraintViolation("region side must be >= 1")
    if seed is not None and seed != spec.seed:
        from dataclasses import replace

        spec = replace(spec, seed=int(seed))
    ii = np.arange(int(np.floor(x0)), int(np.ceil(x1)))
    jj = np.arange(int(np.floor(y0)), int(np.ceil(y1)))
    I, J = np.meshgrid(ii, jj, indexing="xy")
    I, J = I.ravel(), J.ravel()
    radii, centers = spec.sample_cells(I, J)
    rb = radii + spec.buffer_gap
    inside = ((centers[:, 0] - rb >= x0) & (centers[:, 0] + rb <= x1)
              & (centers[:, 1] - rb >= y0) & (centers[:, 1] + rb <= y1))
    return InclusionRealization(region=(x0, x1, y0, y1), shape_kind=spec.shape_kind,
                                cells=np.stack([I, J], -1)[inside], centers=centers[inside],
                                radii=radii[inside], buffer_gap=spec.buffer_gap, seed=spec.seed)


@dataclass(frozen=True)
class DefectSpec:
    """Disk defect of radius ``radius`` centred at the origin with coefficient ``A2``."""

    radius: float = 0.5
    A2: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        A2 = np.array(self.A2, dtype=float).reshape(2, 2)
        object.__setattr__(self, "A2", A2)
        if self.radius < 0:
            raise ConstraintViolation("defect radius must be >= 0")
        if not np.allclose(A2, A2.T) or np.linalg.eigvalsh(A2).min() <= 0:
            raise ConstraintViolation("A2 must be symmetric positive definite")

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.hypot(pts[..., 0], pts[..., 1]) < self.radius


def _dist_to_shape(kind, centers, radii, pt=(0.0, 0.0)):
    d = np.asarray(pt) - centers
    if kind == "disk":
        return np.maximum(np.hypot(d[:, 0], d[:, 1]) - radii, 0.0)
    q = np.maximum(np.abs(d) - radii[:, None], 0.0)
    return np.hypot(q[:, 0], q[:, 1])


@dataclass(frozen=True)
class ScaledGeometry:
    """An ε-scaled realization with the inclusions meeting the closed defect removed."""

    epsilon: float
    realization: InclusionRealization
    defect: DefectSpec
    keep: np.ndarray

    @property
    def region(self):
        return tuple(self.epsilon * v for v in self.realization.region)

    @property
    def shape_kind(self):
        return self.realization.shape_kind

    @property
    def centers(self) -> np.ndarray:
        return self.epsilon * self.realization.centers[self.keep]

    @property
    def radii(self) -> np.ndarray:
        return self.epsilon * self.realization.radii[self.keep]

    @property
    def cells(self) -> np.ndarray:
        return self.realization.cells[self.keep]

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    def _cell_lookup(self):
        cells = self.realization.cells
        if len(cells) == 0:
            return np.zeros((0, 0), dtype=np.int64), 0, 0
        i0, j0 = cells.min(0)
        i1, j1 = cells.max(0)
        table = -np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=np.int64)
        idx = np.flatnonzero(self.keep)
        table[cells[idx, 0] - i0, cells[idx, 1] - j0] = idx
        return table, i0, j0

    def inclusion_index(self, pts) -> np.ndarray:
        """Index into the realization of the kept inclusion containing each point, else -1."""
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        out = -np.ones(len(flat), dtype=np.int64)
        table, i0, j0 = self._cell_lookup()
        if table.size == 0:
            return out.reshape(pts.shape[:-1])
        u = flat / self.epsilon
        ci = np.floor(u[:, 0]).astype(np.int64) - i0
        cj = np.floor(u[:, 1]).astype(np.int64) - j0
        ok = (ci >= 0) & (ci < table.shape[0]) & (cj >= 0) & (cj < table.shape[1])
        cand = np.full(len(flat), -1, dtype=np.int64)
        cand[ok] = table[ci[ok], cj[ok]]
        has = cand >= 0
        real = self.realization
        d = u[has] - real.centers[cand[has]]
        r = real.radii[cand[has]]
        if real.shape_kind == "disk":
            inside = d[:, 0] ** 2 + d[:, 1] ** 2 < r**2
        else:
            inside = (np.abs(d[:, 0]) < r) & (np.abs(d[:, 1]) < r)
        hit = np.flatnonzero(has)[inside]
        out[hit] = cand[hit]
        return out.reshape(pts.shape[:-1])

    def phases(self, pts) -> np.ndarray:
        """Phase code (inclusion 0, matrix 1, defect 2) of each point; defect takes precedence."""
        pts = np.asarray(pts, dtype=float)
        ph = np.full(pts.shape[:-1], PHASE_MATRIX, dtype=np.int8)
        ph[self.inclusion_index(pts) >= 0] = PHASE_INCLUSION
        ph[self.defect.contains(pts)] = PHASE_DEFECT
        return ph


def scale_and_filter(real: InclusionRealization, epsilon: float, defect: DefectSpec) -> ScaledGeometry:
    if not 0.0 < epsilon <= 1.0:
        raise ConstraintViolation(f"epsilon must lie in (0, 1], got {epsilon}")
    if defect.radius == 0.0 or len(real) == 0:
        keep = np.ones(len(real), dtype=bool)
    else:
        dist = _dist_to_shape(real.shape_kind, epsilon * real.centers, epsilon * real.radii)
        keep = dist >= defect.radius
    return ScaledGeometry(epsilon=float(epsilon), realization=real, defect=defect, keep=keep)


def phase_at(geom: ScaledGeometry, x) -> str:
    x = np.asarray(x, dtype=float)
    x0, x1, y0, y1 = geom.region
    if not (x0 <= x[0] <= x1 and y0 <= x[1] <= y1):
        raise DomainError(f"point {tuple(x)} outside region {geom.region}")
    return PHASE_NAMES[int(geom.phases(x[None, :])[0])]


@dataclass(frozen=True)
class AssumptionAudit:
    n_inclusions: int
    inside_buffer: bool
    buffer_inside_cell: bool
    buffers_disjoint: bool
    max_diameter: float
    shifted_fit: bool

    @property
    def ok(self) -> bool:
        return self.inside_buffer and self.buffer_inside_cell and self.buffers_disjoint and self.shifted_fit


def audit_realization(real: InclusionRealization) -> AssumptionAudit:
    """Check the per-inclusion geometric requirements on a realization.

    ``shifted_fit`` tests that the buffer, translated by its inclusion's lower-left
    bounding corner and then by (1/4, 1/4), fits in a unit-side box, i.e. the
    cell-size normalisation in which one inclusion occupies one unit cell.
    """
    c, r = real.centers, real.radii
    rb = r + real.buffer_gap
    lo = real.cells.astype(float)
    inside_cell = bool(np.all((c - rb[:, None] >= lo) & (c + rb[:, None] <= lo + 1.0)))
    diam = 2.0 * r if real.shape_kind == "disk" else 2.0 * np.sqrt(2.0) * r
    D = c - r[:, None]
    b_lo = c - rb[:, None] - D - 0.25
    b_hi = c + rb[:, None] - D - 0.25
    width = b_hi - b_lo
    fits = bool(np.all(width <= 1.0)) and bool(np.all(diam < 1.0))
    return AssumptionAudit(
        n_inclusions=len(r),
        inside_buffer=bool(real.buffer_gap > 0),
        buffer_inside_cell=inside_cell,
        buffers_disjoint=inside_cell,
        max_diameter=float(diam.max()) if len(diam) else 0.0,
        shifted_fit=fits,
    )


def min_inclusion_distance(real: InclusionRealization) -> float:
    """Smallest gap between distinct inclusions (brute force over neighbouring cells)."""
    if len(real) < 2:
        return np.inf
    index = {tuple(k): n for n, k in enumerate(real.cells)}
    best = np.inf
    for n, (i, j) in enumerate(real.cells):
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                m = index.get((i + di, j + dj))
                if m is None or m <= n:
                    continue
                best = min(best, _shape_gap(real.shape_kind, real.centers[n], real.radii[n],
                                            real.centers[m], real.radii[m]))
    return float(best)


def _shape_gap(kind, c1, r1, c2, r2):
    if kind == "disk":
        return float(np.hypot(*(c1 - c2)) - r1 - r2)
    q = np.maximum(np.abs(c1 - c2) - (r1 + r2), 0.0)
    return float(np.hypot(*q))
