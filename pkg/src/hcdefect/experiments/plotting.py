"""Figures for the campaign directories (Agg backend, PNG)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def beta_figure(path, bt, beta_inf, gaps):
    fig, ax = plt.subplots(figsize=(7, 4))
    v = np.clip(bt.values, -400, 400)
    ax.plot(bt.lam, v, lw=1.2, label="beta")
    ax.plot(bt.lam, np.clip(beta_inf, -400, 400), lw=1.0, ls="--", label="beta_inf (largest window)")
    for a, b in gaps:
        ax.axvspan(a, b, color="tab:green", alpha=0.15)
    for a, b in bt.spectrum:
        ax.axvline(a, color="k", lw=0.5, alpha=0.4)
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("lambda")
    ax.set_ylabel("beta (clipped)")
    ax.legend(loc="upper left", fontsize=8)
    _save(fig, path)


def field_figure(path, mesh, u_nodes, title=""):
    fig, ax = plt.subplots(figsize=(4.6, 4))
    x0, x1, y0, y1 = mesh.box
    im = ax.imshow(np.asarray(u_nodes).T, origin="lower", extent=(x0, x1, y0, y1), cmap="RdBu_r")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title, fontsize=9)
    _save(fig, path)


def tensor_figure(path, hom):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    k = np.arange(len(hom.samples))
    ax.plot(k, hom.samples[:, 0, 0], "o", label="a11")
    ax.plot(k, hom.samples[:, 1, 1], "s", label="a22")
    ax.plot(k, hom.samples[:, 0, 1], "^", label="a12")
    ax.axhline(hom.voigt[0, 0], color="k", ls=":", lw=0.8, label="Voigt")
    ax.set_xlabel("sample")
    ax.legend(fontsize=8)
    _save(fig, path)


def convergence_figure(path, rows):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    seeds = sorted({r["seed"] for r in rows})
    for s in seeds:
        rs = sorted((r for r in rows if r["seed"] == s), key=lambda r: -r["epsilon"])
        eps = [r["epsilon"] for r in rs]
        for ax, key in zip(axes, ("distance", "certificate", "amplification_error")):
            ax.loglog(eps, [r[key] for r in rs], "o-", label=f"seed {s}")
            ax.set_title(key, fontsize=9)
            ax.set_xlabel("epsilon")
    axes[0].legend(fontsize=8)
    _save(fig, path)


def decay_figure(path, fits):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, f in fits:
        ax.semilogy(f.radii, f.masses / f.areas, "o-", ms=3, label=f"{label}: alpha={f.alpha_fit:.2f}")
    ax.set_xlabel("|x|")
    ax.set_ylabel("annulus mean density")
    ax.legend(fontsize=7)
    _save(fig, path)


def band_figure(path, rows):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [f"[{r['band_lo']:g},{r['band_hi']:g}] n={r['elements_per_cell']}" for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["count_defect_free"] for r in rows], 0.4, label="defect-free")
    ax.bar(x + 0.2, [r["count_defect"] for r in rows], 0.4, label="defect")
    ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=7)
    ax.legend(fontsize=8)
    _save(fig, path)
