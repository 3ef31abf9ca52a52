"""End-to-end campaigns.

Each campaign writes into ``<out>/<campaign>/``: CSV tables, figures, the
config it ran with, an ``assertions.csv`` and a ``manifest.json``.  Shared
prerequisites (mode table, β, gaps, effective tensor, homogenised defect
mode) live on a :class:`Context` so ``all`` computes them once.  They are
deterministic, so a standalone campaign recomputing them gets identical
numbers.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import special

from ..eigensolver import count_below, eigs_in_window
from ..errors import ConfigurationError, ConvergenceError, HCDefectError
from ..fem import assemble_operator, build_mesh
from ..geometry import DefectSpec, InclusionRealization, sample_realization, scale_and_filter
from ..homogenization import (cell_correctors, defect_eigenproblem, estimate_homogenized_tensor, homogenized_tensor,
                              macro_mesh, radial_defect_roots, tune_defect_coefficient)
from ..quasimode import (build_quasimode, corrector_components, decay_fit, harmonic_extension, match_eigenvector,
                         projection_estimate, quasimode_report, realize_b_eps, resolvent_image, transfer,
                         two_scale_diagnostics, two_scale_norm_factor)
from ..spectral import (BetaInfinityEstimator, ZhikovBeta, b_integral, b_integral_direct, beta_table,
                        dirichlet_modes, gap_intervals, gap_set_G)
from . import plotting
from .config import ExperimentConfig
from .records import Assertion, RunManifest, code_hash, load_fields, save_fields, write_csv

log = logging.getLogger(__name__)

J01 = float(special.jn_zeros(0, 1)[0])


class NoGapError(HCDefectError):
    """The gap scan found no gap; downstream campaigns cannot run."""


@dataclass
class CampaignResult:
    name: str
    directory: Path
    assertions: list
    skipped: bool = False
    manifest: RunManifest | None = None

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)


# --------------------------------------------------------------------------- shared prerequisites


class Context:
    """Lazily computed objects shared by the campaigns of one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    @property
    def spec(self):
        return self.cfg.medium(self.cfg.seeds[0])

    @cached_property
    def table(self):
        """Mode table on the ε-grid's own cell resolution: the discrete inclusion spectrum of every ε-problem."""
        c = self.cfg
        r = c.geometry.radius_law[1]
        return dirichlet_modes(c.geometry.shape_kind, r, 1.0 / c.mesh.elements_per_cell, n_modes=c.spectral.n_modes,
                               moment_order=c.spectral.moment_order, min_elements=c.mesh.table_min_elements)

    @cached_property
    def beta(self) -> ZhikovBeta:
        return ZhikovBeta(self.spec, self.table, mc_samples=self.cfg.spectral.mc_samples, seed=self.cfg.seeds[0])

    @cached_property
    def beta_gaps(self):
        s = self.cfg.spectral
        return gap_intervals(self.beta, s.lam_range, s.n_grid)

    @cached_property
    def estimator(self) -> BetaInfinityEstimator:
        s = self.cfg.spectral
        real = sample_realization(self.spec, (0.0, s.beta_inf_region, 0.0, s.beta_inf_region), seed=self.cfg.seeds[0])
        return BetaInfinityEstimator(real, self.table, s.beta_inf_Ls)

    @cached_property
    def G_gaps(self):
        s = self.cfg.spectral
        return gap_set_G(self.estimator, self.beta, s.lam_range, s.beta_inf_grid)

    @property
    def gap(self) -> tuple[float, float]:
        g = self.G_gaps.first_gap()
        if g is None:
            raise NoGapError(f"no gap of the limiting spectrum in {self.cfg.spectral.lam_range}")
        return g

    @property
    def window(self) -> tuple[float, float]:
        """The gap shrunk by the acceptance margin on both sides."""
        lo, hi = self.gap
        m = self.cfg.acceptance.gap_margin * (hi - lo)
        return lo + m, hi - m

    @cached_property
    def hom(self):
        c, hc = self.cfg, self.cfg.homogenization
        return estimate_homogenized_tensor(c.medium(hc.seed), c.A1_matrix, cell_side=hc.cell_side, h=hc.h,
                                           mc_cells=hc.mc_cells, seed=hc.seed)

    @cached_property
    def defect(self) -> DefectSpec:
        d = self.cfg.defect
        if d.tune_fraction is None:
            return self.cfg.defect_spec()
        lo, hi = self.gap
        a_hom = 0.5 * float(np.trace(self.hom.A))
        a2 = tune_defect_coefficient(self.beta, a_hom, d.radius, lo + d.tune_fraction * (hi - lo))
        return self.cfg.defect_spec(a2)

    @cached_property
    def macro_mesh(self):
        return macro_mesh(self.cfg.mesh.box_half, self.cfg.mesh.macro_h)

    @cached_property
    def defect_modes(self):
        return defect_eigenproblem(self.hom.A, self.defect, self.beta, self.gap, self.macro_mesh,
                                   A1_for_theta=self.cfg.A1_matrix)

    @property
    def mode(self):
        """The defect mode followed by the convergence study: the one nearest the gap centre."""
        if not self.defect_modes:
            raise ConvergenceError(f"no homogenised defect eigenvalue in the gap {self.gap}")
        mid = 0.5 * sum(self.gap)
        return min(self.defect_modes, key=lambda p: abs(p.lam0 - mid))

    @property
    def lam0(self) -> float:
        return self.mode.lam0

    @cached_property
    def u0_scale(self) -> float:
        m = self.mode
        inside = self.defect.contains(self.macro_mesh.midpoints())
        return float(np.sqrt(two_scale_norm_factor(self.macro_mesh, m.u0_nodes(), inside, m.lam0, self.table)))

    @property
    def gamma(self) -> float:
        return float(np.linalg.eigvalsh(self.cfg.A1_matrix).max())

    def epsilon_problem(self, seed: int, eps: float, defect: DefectSpec | None = None,
                        elements_per_cell: int | None = None):
        """(realization, scaled geometry, operator) of the ε-problem on the configured box."""
        b = self.cfg.mesh.box_half
        n = int(round(b / eps))
        real = sample_realization(self.cfg.medium(seed), (-n, n, -n, n), seed=seed)
        geom = scale_and_filter(real, eps, self.defect if defect is None else defect)
        mesh = build_mesh((-b, b, -b, b), self.cfg.h(eps, elements_per_cell))
        return real, geom, assemble_operator(mesh, geom, A1=self.cfg.A1_matrix)


class InertiaCounter:
    """Eigenvalue counts of one operator at many points, one factorisation per point."""

    def __init__(self, op):
        self.op = op
        self._below = {}

    def below(self, x: float) -> int:
        x = float(x)
        if x not in self._below:
            self._below[x] = count_below(self.op, x)
        return self._below[x]

    def window(self, a: float, b: float) -> int:
        return self.below(b) - self.below(a)


# --------------------------------------------------------------------------- campaign plumbing


def _provenance(cfg: ExperimentConfig, stage: str, seed=None) -> dict:
    return {"config_hash": cfg.hash(), "stage": stage, "seed": "" if seed is None else seed}


def _decreasing(xs) -> bool:
    xs = [float(x) for x in xs]
    return len(xs) >= 2 and all(np.isfinite(xs)) and all(b < a for a, b in zip(xs, xs[1:]))


def _campaign(name: str, cfg: ExperimentConfig, out, body, ctx: Context | None = None,
              force: bool = False) -> CampaignResult:
    root = Path(out) / name
    old = RunManifest.read(root)
    code = code_hash()
    if (not force and old is not None and old.config_hash == cfg.hash() and old.code_hash == code
            and old.verify(root)):
        log.info("%s: up to date, skipping", name)
        return CampaignResult(name, root, [Assertion(**a) for a in old.assertions], skipped=True, manifest=old)
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    ctx = ctx or Context(cfg)
    man = RunManifest(campaign=name, config_hash=cfg.hash(), code_hash=code, seeds=list(cfg.seeds))
    cfg.dump(root / "config.yaml")
    try:
        assertions = body(ctx, root, man)
    except NoGapError as exc:
        assertions = [Assertion("gap_found", False, detail=str(exc))]
    assertions = [a for a in assertions if cfg.acceptance.enabled(a.name.split("[")[0])]
    write_csv(root / "assertions.csv", [dict(a.row(), **_provenance(cfg, name)) for a in assertions],
              ["name", "passed", "value", "threshold", "detail", "config_hash", "stage", "seed"])
    man.assertions = [_json_row(a) for a in assertions]
    man.write(root)
    for a in assertions:
        log.info("%s %s: %s (value=%s, threshold=%s)", name, "PASS" if a.passed else "FAIL", a.name, a.value,
                 a.threshold)
    return CampaignResult(name, root, assertions, manifest=man)


def _json_row(a: Assertion) -> dict:
    def plain(v):
        if isinstance(v, (np.floating, float)):
            return float(v)
        if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
            return int(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return {"name": a.name, "passed": bool(a.passed), "value": plain(a.value), "threshold": plain(a.threshold),
            "detail": a.detail}


# --------------------------------------------------------------------------- gap scan


def _gap_scan(ctx: Context, root: Path, man: RunManifest) -> list[Assertion]:
    cfg, s = ctx.cfg, ctx.cfg.spectral
    prov = _provenance(cfg, "gap-scan", cfg.seeds[0])
    out = []
    with man.stage("dirichlet_oracle"):
        rows = []
        for shape, radius, exact in (("disk", 1.0, J01**2), ("square", 0.25, 8 * np.pi**2)):
            errs = []
            for h in (radius / 64, radius / 128):
                lam1 = dirichlet_modes(shape, radius, h, n_modes=2).lambda_1
                errs.append(abs(lam1 / exact - 1))
                rows.append(dict(prov, shape=shape, radius=radius, h=h, lambda_1=lam1, exact=exact,
                                 rel_error=errs[-1]))
            out.append(Assertion(f"dirichlet_oracle[{shape}]", errs[0] <= 0.01 and errs[1] < errs[0], errs,
                                 0.01, "relative error at default h and h/2"))
        write_csv(root / "dirichlet_oracle.csv", rows)
    with man.stage("beta_identities"):
        out += _beta_identities(ctx, root, prov)
    with man.stage("beta_table"):
        bt = beta_table(ctx.beta, s.lam_range, s.n_grid)
        binf = np.array([ctx.estimator.sup_values(x) if np.isfinite(v) else [np.nan] * len(s.beta_inf_Ls)
                         for x, v in zip(bt.lam, bt.values)])
        rows = [dict(prov, lam=x, beta=v, stderr=e, **{f"beta_inf_L{L:g}": binf[k, j]
                                                        for j, L in enumerate(s.beta_inf_Ls)})
                for k, (x, v, e) in enumerate(bt.rows())]
        write_csv(root / "beta_table.csv", rows)
        ok = np.isfinite(bt.values)
        slack = binf[ok, -1] - bt.values[ok]
        worst = float(slack.min()) if ok.any() else 0.0
        out.append(Assertion("beta_inf_dominates_beta", worst >= -1e-8 * max(1.0, s.lam_range[1] ** 2), worst, 0.0,
                             "min over grid of beta_inf - beta"))
    with man.stage("gaps"):
        rows = [dict(prov, kind="beta", lo=a, hi=b) for a, b in ctx.beta_gaps.gaps]
        rows += [dict(prov, kind="G", lo=a, hi=b) for a, b in ctx.G_gaps.gaps]
        rows += [dict(prov, kind="inclusion_spectrum", lo=a, hi=b)
                 for a, b in ctx.beta.spectrum_intervals(s.lam_range[1])]
        write_csv(root / "gaps.csv", rows, list(prov) + ["kind", "lo", "hi"])
        found = bool(ctx.G_gaps.gaps)
        out.append(Assertion("gap_found", found, len(ctx.G_gaps.gaps), 1,
                             f"first gap {ctx.G_gaps.first_gap()}" if found else "no gap in range"))
    plotting.beta_figure(root / "beta.png", bt, binf[:, -1], ctx.G_gaps.gaps)
    return out


def _beta_identities(ctx: Context, root: Path, prov: dict) -> list[Assertion]:
    out = [Assertion("beta_zero", ctx.beta(0.0) == 0.0, ctx.beta(0.0), 0.0, "beta(0) is exactly zero")]
    # expansion against a direct solve on the shapes the campaign actually uses
    rng = np.random.default_rng(ctx.cfg.seeds[0])
    tables = {"disk": ctx.table if ctx.table.shape == "disk" else None,
              "square": ctx.table if ctx.table.shape == "square" else None}
    for shape in tables:
        if tables[shape] is None:
            c = ctx.cfg
            tables[shape] = dirichlet_modes(shape, c.geometry.radius_law[1], 1.0 / c.mesh.elements_per_cell,
                                            n_modes=c.spectral.n_modes, moment_order=c.spectral.moment_order,
                                            min_elements=c.mesh.table_min_elements)
    rows, worst = [], 0.0
    shapes = list(tables)
    for k in range(5):
        T = tables[shapes[rng.integers(len(shapes))]]
        while True:
            lam = float(rng.uniform(0.0, 2.0 * T.lambda_1))
            # stay clear of the poles, where both numbers are ill-conditioned
            if np.min(np.abs(T.eigenvalues - lam)) > 0.02 * T.lambda_1:
                break
        e, d = b_integral(T, lam), b_integral_direct(T, lam)
        rel = abs(e.value - d) / abs(d)
        worst = max(worst, rel)
        rows.append(dict(prov, shape=T.shape, radius=T.radius, h=T.h, lam=lam, expansion=e.value, direct=d,
                         rel_error=rel, tail_bound=e.tail_bound))
    write_csv(root / "expansion_check.csv", rows)
    out.append(Assertion("expansion_vs_direct", worst <= 1e-6, worst, 1e-6, "5 random (shape, lambda) pairs"))
    r = 0.3
    ref = dirichlet_modes("disk", r, n_modes=4)
    pole = float(ref.poles()[0])
    exact = J01**2 / r**2
    rel = abs(pole / exact - 1)
    write_csv(root / "pole_check.csv", [dict(prov, radius=r, h=ref.h, first_pole=pole, exact=exact, rel_error=rel)])
    out.append(Assertion("pole_location", rel <= 0.01, rel, 0.01, f"first pole {pole:.4f} vs j01^2/r^2"))
    return out


def run_gap_scan(cfg: ExperimentConfig, out, ctx: Context | None = None, force: bool = False) -> CampaignResult:
    return _campaign("gap-scan", cfg, out, _gap_scan, ctx, force)


# --------------------------------------------------------------------------- homogenisation


def _homogenize(ctx: Context, root: Path, man: RunManifest) -> list[Assertion]:
    cfg, acc = ctx.cfg, ctx.cfg.acceptance
    prov = _provenance(cfg, "homogenize", cfg.homogenization.seed)
    A1 = cfg.A1_matrix
    out = []
    with man.stage("zero_fraction"):
        side = cfg.homogenization.cell_side
        empty = InclusionRealization(region=(0.0, side, 0.0, side), shape_kind=cfg.geometry.shape_kind,
                                     cells=np.zeros((0, 2), dtype=np.int64), centers=np.zeros((0, 2)),
                                     radii=np.zeros(0), buffer_gap=cfg.geometry.buffer_gap, seed=0)
        H0 = homogenized_tensor([cell_correctors(empty, A1, cfg.homogenization.h)], A1)
        err = float(np.abs(H0.A - A1).max() / np.abs(A1).max())
        out.append(Assertion("zero_fraction_recovers_A1", err <= 1e-12, err, 1e-12, "relative max-norm error"))
    with man.stage("tensor"):
        H = ctx.hom
        rows = [dict(prov, sample=k, a11=S[0, 0], a12=S[0, 1], a22=S[1, 1], matrix_fraction=f)
                for k, (S, f) in enumerate(zip(H.samples, H.matrix_fractions))]
        write_csv(root / "tensor_samples.csv", rows)
        summary = dict(prov, a11=H.A[0, 0], a12=H.A[0, 1], a22=H.A[1, 1], se11=H.stderr[0, 0],
                       se12=H.stderr[0, 1], se22=H.stderr[1, 1], voigt11=H.voigt[0, 0], voigt22=H.voigt[1, 1],
                       reuss11=H.reuss[0, 0], reuss22=H.reuss[1, 1], lam_min=H.lam_min, lam_max=H.lam_max)
        write_csv(root / "tensor.csv", [summary])
        out.append(Assertion("voigt_reuss_sandwich", H.sandwich_ok(), [H.lam_min, H.lam_max],
                             float(np.linalg.eigvalsh(H.voigt).max()), "reuss <= A_hom <= voigt"))
        se = float(H.stderr[0, 1])
        iso = abs(float(H.A[0, 1]))
        out.append(Assertion("isotropy_off_diagonal", iso <= acc.isotropy_stderr * se, iso,
                             acc.isotropy_stderr * se, f"|a12| vs {acc.isotropy_stderr:g} standard errors"))
    with man.stage("defect_modes"):
        D = ctx.defect
        lo, hi = ctx.gap
        a_hom = 0.5 * float(np.trace(ctx.hom.A))
        a2 = float(D.A2[0, 0])
        radial = radial_defect_roots(ctx.beta, a_hom, a2, D.radius, ctx.gap)
        rows = [dict(prov, source="fem", lam0=p.lam0, multiplicity=p.multiplicity, branch=p.branch, theta=p.theta,
                     residual=p.residual, energy_gap=p.energy_gap, defect_radius=D.radius, a2=a2,
                     gap_lo=lo, gap_hi=hi) for p in ctx.defect_modes]
        rows += [dict(prov, source="radial", lam0=lam, multiplicity=1 if m == 0 else 2, branch=m,
                      defect_radius=D.radius, a2=a2, gap_lo=lo, gap_hi=hi) for lam, m in radial]
        write_csv(root / "defect_modes.csv", rows)
        found = bool(ctx.defect_modes)
        out.append(Assertion("defect_mode_in_gap", found, ctx.lam0 if found else None, [lo, hi],
                             f"{len(ctx.defect_modes)} homogenised defect eigenvalues"))
        if found:
            m = ctx.mode
            save_fields(root / "u0.npz", u0=m.u0_nodes(), h=np.array(ctx.macro_mesh.h),
                        box=np.array(ctx.macro_mesh.box), lam0=np.array(m.lam0))
            plotting.field_figure(root / "u0.png", ctx.macro_mesh, m.u0_nodes(), f"u0, lambda0 = {m.lam0:.4f}")
    plotting.tensor_figure(root / "tensor.png", ctx.hom)
    return out


def run_homogenize(cfg: ExperimentConfig, out, ctx: Context | None = None, force: bool = False) -> CampaignResult:
    return _campaign("homogenize", cfg, out, _homogenize, ctx, force)


# --------------------------------------------------------------------------- defect-mode convergence


def _field_path(root: Path, seed: int, eps: float) -> Path:
    return root / "fields" / f"seed{seed}_eps{eps:g}.npz"


def _defect_cell(ctx: Context, root: Path, seed: int, eps: float) -> dict:
    cfg = ctx.cfg
    lam0, win = ctx.lam0, ctx.window
    row = dict(_provenance(cfg, "defect-converge", seed), epsilon=eps, lam0=lam0, window_lo=win[0], window_hi=win[1])

    # defect-free control on the same realization and mesh
    real, geom0, op0 = ctx.epsilon_problem(seed, eps, defect=DefectSpec(0.0, cfg.A1_matrix))
    row["count_defect_free"] = InertiaCounter(op0).window(*win)
    del op0, geom0

    _, geom, op = ctx.epsilon_problem(seed, eps)
    counter = InertiaCounter(op)
    count = counter.window(*win)
    row.update(n_dofs=op.n, n_inclusions=geom.n_kept, count_in_gap=count)
    r = eigs_in_window(op, win, k_max=max(count, 1), count=count, shift=lam0, tol=cfg.solver.tol)
    row["nearest_lambda"] = float(r.eigenvalues[np.argmin(np.abs(r.eigenvalues - lam0))]) if len(r) else np.nan

    # quasimode from the homogenised mode
    b_eps = realize_b_eps(op, geom, lam0, ctx.table)
    u0, grad = transfer(ctx.macro_mesh, ctx.mode.u0_nodes(), op, gradient=True)
    N = [op.from_nodes(eps * c.N) for c in cell_correctors(real, cfg.A1_matrix, 1.0 / cfg.mesh.elements_per_cell)]
    L, rho = cfg.quasimode.L0 * eps**-0.25, cfg.quasimode.rho0 * eps**0.25
    parts = build_quasimode(op, geom, u0, grad, lam0, b_eps, N, L, rho)
    uh = resolvent_image(op, parts.u_lc, lam0)
    qr = quasimode_report(op, parts.u_lc, uh, lam0, eps, L, rho,
                          corrector_components(op, parts, N, ctx.mode.theta))
    uh_plain = resolvent_image(op, parts.u, lam0)
    row.update(qr.as_row())
    row["certificate_plain"] = quasimode_report(op, parts.u, uh_plain, lam0).certificate
    del N, uh_plain

    delta = cfg.quasimode.window_factor * qr.lemma_residual
    pw = (lam0 - delta, lam0 + delta)
    row.update(projection_estimate(op, uh, pw, counter.window(*pw), cfg.quasimode.projection_pairs,
                                   cfg.solver.tol).as_row())

    if len(r):
        k, ov = match_eigenvector(op, parts.u_lc, r)
        lam_e, ue = float(r.eigenvalues[k]), r.eigenvectors[:, k]
        row.update(lambda_eps=lam_e, distance=abs(lam_e - lam0), overlap=float(ov[k]), residual=float(r.residuals[k]))
        ts = two_scale_diagnostics(op, geom, ue, lam_e, u0, lam0, b_eps, ctx.u0_scale)
        row.update({k2: v for k2, v in ts.as_row().items() if k2 not in ("eigenvalue_error", "n_inclusions")})
        ut = harmonic_extension(op, ue)
        ut = ut / np.sqrt(ut @ (op.M @ ut))
        save_fields(_field_path(root, seed, eps), u_tilde=op.to_nodes(ut), h=np.array(op.mesh.h),
                    box=np.array(op.mesh.box), lambda_eps=np.array(lam_e), lam0=np.array(lam0))
    else:
        log.warning("seed %d, eps %g: no eigenvalue in the gap window", seed, eps)
        row.update(lambda_eps=np.nan, distance=np.nan, overlap=np.nan, residual=np.nan, matrix_error=np.nan,
                   amplification_error=np.nan, u0_scale=ctx.u0_scale, flagged=True)
    row.setdefault("flagged", False)
    return row


def _defect_converge(ctx: Context, root: Path, man: RunManifest) -> list[Assertion]:
    cfg, acc = ctx.cfg, ctx.cfg.acceptance
    with man.stage("prerequisites"):
        mult = ctx.mode.multiplicity
    rows = []
    for seed in cfg.seeds:
        for eps in cfg.epsilons:
            with man.stage(f"seed{seed}_eps{eps:g}"):
                rows.append(_defect_cell(ctx, root, seed, eps))
            log.info("seed %d eps %g: lambda_eps=%s distance=%s certificate=%s", seed, eps,
                     rows[-1]["lambda_eps"], rows[-1]["distance"], rows[-1]["certificate"])
    write_csv(root / "convergence.csv", rows)
    plotting.convergence_figure(root / "convergence.png", rows)

    out = []
    eps_min = min(cfg.epsilons)
    for seed in cfg.seeds:
        rs = [r for r in rows if r["seed"] == seed]
        last = next(r for r in rs if r["epsilon"] == eps_min)
        out.append(Assertion(f"gap_clean_defect_free[{seed}]", last["count_defect_free"] == 0,
                             last["count_defect_free"], 0, f"shrunk gap {ctx.window} at eps={eps_min:g}"))
        out.append(Assertion(f"eigenvalue_in_gap[{seed}]", all(r["count_in_gap"] >= 1 for r in rs),
                             [r["count_in_gap"] for r in rs], 1, "at every epsilon"))
        out.append(Assertion(f"distance_decreasing[{seed}]", _decreasing([r["distance"] for r in rs]),
                             [r["distance"] for r in rs], None, "|lambda_eps - lambda0| strictly decreasing"))
        out.append(Assertion(f"certificate_decreasing[{seed}]", _decreasing([r["certificate"] for r in rs]),
                             [r["certificate"] for r in rs], None, "(lambda0+1)|u_hat - u|/|u| strictly decreasing"))
        out.append(Assertion(f"count_equals_multiplicity[{seed}]", last["count_in_gap"] == mult,
                             last["count_in_gap"], mult, f"at eps={eps_min:g}"))
        out.append(Assertion(f"matrix_error_decreasing[{seed}]", _decreasing([r["matrix_error"] for r in rs]),
                             [r["matrix_error"] for r in rs], None, "L2 error off the inclusions"))
        out.append(Assertion(f"amplification_error_decreasing[{seed}]",
                             _decreasing([r["amplification_error"] for r in rs]),
                             [r["amplification_error"] for r in rs], None, "inclusion means vs (1 + lambda0 b)u0"))
        for r in rs:
            out.append(Assertion(f"projection_mass[{seed},{r['epsilon']:g}]",
                                 r["projection_mass"] >= acc.projection_mass, r["projection_mass"],
                                 acc.projection_mass,
                                 "exact" if r["projection_exact"] else f"energy lower bound from the lowest {r['proj_pairs']} "
                                                                       f"pairs; window holds {r['proj_count']}"))
    return out


def run_defect_convergence(cfg: ExperimentConfig, out, ctx: Context | None = None,
                           force: bool = False) -> CampaignResult:
    return _campaign("defect-converge", cfg, out, _defect_converge, ctx, force)


# --------------------------------------------------------------------------- decay study


def _synthetic_decay_check(mesh, alpha: float, r_min: float, r_max: float, width: float) -> float:
    pts = mesh.nodes()
    u = np.exp(-alpha * np.hypot(pts[:, 0], pts[:, 1])).reshape(mesh.shape)
    return decay_fit(mesh, u, r_min, r_max, width).alpha_fit


def _decay(ctx: Context, root: Path, man: RunManifest) -> list[Assertion]:
    cfg, acc, d = ctx.cfg, ctx.cfg.acceptance, ctx.cfg.decay
    src = root.parent / "defect-converge"
    missing = [(s, e) for s in cfg.seeds for e in cfg.epsilons if not _field_path(src, s, e).exists()]
    if missing:
        raise ConfigurationError(f"decay study needs the defect-converge fields; missing {missing[:3]}")
    r_min, r_max = cfg.defect.radius + d.r_min_offset, cfg.mesh.box_half - d.r_max_offset
    out = []
    with man.stage("self_test"):
        mesh = build_mesh((-cfg.mesh.box_half, cfg.mesh.box_half) * 2, cfg.h(max(cfg.epsilons)))
        a_syn = _synthetic_decay_check(mesh, 3.0, r_min, r_max, d.width)
        out.append(Assertion("synthetic_decay_self_test", abs(a_syn / 3.0 - 1) <= 0.01, a_syn, 3.0,
                             "fit of exp(-3|x|)"))
    with man.stage("fits"):
        lam0 = ctx.lam0
        beta_inf = ctx.estimator(lam0)
        beta = ctx.beta(lam0)
        bound = float(np.sqrt(abs(beta_inf) / ctx.gamma))
        rows, annuli, fits = [], [], []
        for seed in cfg.seeds:
            for eps in cfg.epsilons:
                f = load_fields(_field_path(src, seed, eps))
                box = tuple(float(v) for v in f["box"])
                mesh = build_mesh(box, float(f["h"]))
                fit = decay_fit(mesh, f["u_tilde"], r_min, r_max, d.width, beta_inf, ctx.gamma)
                prov = _provenance(cfg, "decay", seed)
                rows.append(dict(prov, epsilon=eps, lambda_eps=float(f["lambda_eps"]), lam0=lam0, beta=beta,
                                 beta_inf=beta_inf, gamma=ctx.gamma, alpha_fit=fit.alpha_fit,
                                 bound_beta_inf=bound, bound_beta=float(np.sqrt(abs(beta) / ctx.gamma)),
                                 ratio=fit.alpha_fit / bound, fit_residual=fit.fit_residual, r_min=r_min,
                                 r_max=r_max, width=d.width))
                annuli += [dict(prov, epsilon=eps, radius=rr, mass=m, area=a)
                           for rr, m, a in zip(fit.radii, fit.masses, fit.areas)]
                fits.append((f"seed {seed}, eps {eps:g}", fit))
        write_csv(root / "decay.csv", rows)
        write_csv(root / "annuli.csv", annuli)
        plotting.decay_figure(root / "decay.png", fits)
    for seed in cfg.seeds:
        rs = [r for r in rows if r["seed"] == seed]
        for r in rs:
            out.append(Assertion(f"alpha_bound[{seed},{r['epsilon']:g}]",
                                 r["alpha_fit"] >= acc.alpha_factor * bound, r["alpha_fit"], acc.alpha_factor * bound,
                                 "alpha_fit vs sqrt(|beta_inf(lambda0)|/gamma)"))
        alphas = [r["alpha_fit"] for r in rs]
        var = max(abs(b / a - 1) for a, b in zip(alphas, alphas[1:])) if len(alphas) > 1 else 0.0
        out.append(Assertion(f"alpha_uniform[{seed}]", var <= acc.alpha_variation, var, acc.alpha_variation,
                             "largest relative change of alpha_fit under eps halving"))
    return out


def run_decay_study(cfg: ExperimentConfig, out, ctx: Context | None = None, force: bool = False) -> CampaignResult:
    return _campaign("decay", cfg, out, _decay, ctx, force)


# --------------------------------------------------------------------------- essential spectrum


def _ess_spec(ctx: Context, root: Path, man: RunManifest) -> list[Assertion]:
    cfg, acc, es = ctx.cfg, ctx.cfg.acceptance, ctx.cfg.ess_spec
    seed = cfg.seeds[0]
    prov = _provenance(cfg, "ess-spec", seed)
    bands = [tuple(float(v) for v in b) for b in es.bands]
    with man.stage("prerequisites"):
        D = ctx.defect
        gap_band = ctx.window
    rows = []
    for n in es.elements_per_cell:
        with man.stage(f"elements_per_cell{n}"):
            _, _, op_free = ctx.epsilon_problem(seed, es.epsilon, DefectSpec(0.0, cfg.A1_matrix), n)
            _, _, op_def = ctx.epsilon_problem(seed, es.epsilon, D, n)
            # control: identical coefficients, nothing removed
            _, _, op_ctl = ctx.epsilon_problem(seed, es.epsilon, DefectSpec(0.0, cfg.A1_matrix), n)
            cf, cd, cc = InertiaCounter(op_free), InertiaCounter(op_def), InertiaCounter(op_ctl)
            for kind, (a, b) in [("band", bd) for bd in bands] + [("gap", gap_band)]:
                rows.append(dict(prov, epsilon=es.epsilon, elements_per_cell=n, n_dofs=op_def.n, kind=kind,
                                 band_lo=a, band_hi=b, count_defect_free=cf.window(a, b),
                                 count_defect=cd.window(a, b), count_control=cc.window(a, b)))
                rows[-1]["difference"] = rows[-1]["count_defect"] - rows[-1]["count_defect_free"]
                rows[-1]["control_difference"] = rows[-1]["count_control"] - rows[-1]["count_defect_free"]
            del op_free, op_def, op_ctl, cf, cd, cc
    write_csv(root / "band_counts.csv", rows)
    plotting.band_figure(root / "band_counts.png", rows)
    out = []
    coarse, fine = es.elements_per_cell[-2:] if len(es.elements_per_cell) > 1 else es.elements_per_cell * 2
    for a, b in bands:
        rb = {r["elements_per_cell"]: r for r in rows if r["kind"] == "band" and (r["band_lo"], r["band_hi"]) == (a, b)}
        diffs = [abs(rb[n]["difference"]) for n in es.elements_per_cell]
        out.append(Assertion(f"band_difference_bounded[{a:g},{b:g}]", max(diffs) <= acc.band_difference, diffs,
                             acc.band_difference, "|count(defect) - count(defect-free)| per refinement"))
        out.append(Assertion(f"band_difference_non_growing[{a:g},{b:g}]",
                             abs(rb[fine]["difference"]) <= abs(rb[coarse]["difference"]),
                             [abs(rb[coarse]["difference"]), abs(rb[fine]["difference"])], None,
                             f"elements per cell {coarse} -> {fine}"))
    ctl = [r["control_difference"] for r in rows]
    out.append(Assertion("identical_control_zero", all(c == 0 for c in ctl), ctl, 0,
                         "same coefficients assembled twice"))
    return out


def run_essential_spectrum_check(cfg: ExperimentConfig, out, ctx: Context | None = None,
                                 force: bool = False) -> CampaignResult:
    return _campaign("ess-spec", cfg, out, _ess_spec, ctx, force)


# --------------------------------------------------------------------------- everything


CAMPAIGNS = {
    "gap-scan": run_gap_scan,
    "homogenize": run_homogenize,
    "defect-converge": run_defect_convergence,
    "decay": run_decay_study,
    "ess-spec": run_essential_spectrum_check,
}


def run_all(cfg: ExperimentConfig, out, ctx: Context | None = None, force: bool = False) -> list[CampaignResult]:
    ctx = ctx or Context(cfg)
    results = []
    for name, fn in CAMPAIGNS.items():
        res = fn(cfg, out, ctx, force)
        results.append(res)
        if name == "gap-scan" and not ctx.G_gaps.gaps:
            log.error("no gap found; stopping after the gap scan")
            break
    return results
