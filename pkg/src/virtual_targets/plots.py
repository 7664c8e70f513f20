"""Optional SVG renderings of the CSV artifacts (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "virtual-targets"  # stable element ids
    return plt


def _save(fig, path: Path | str) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def samples_svg(path: Path | str, world: np.ndarray, valid: np.ndarray, times: np.ndarray) -> None:
    """Scatter of valid samples coloured by time step, east on the horizontal axis."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    n_t = world.shape[2]
    east, north = (0, 1) if world.shape[3] == 2 else (1, 0)  # (east, north) or NED
    colors = plt.cm.viridis(np.linspace(0, 1, n_t))
    for k in range(n_t):
        pts = world[:, :, k][valid[:, :, k]]
        ax.scatter(pts[:, east], pts[:, north], s=2, color=colors[k], label=f"t={times[k]:g} s")
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(markerscale=4, fontsize=7)
    _save(fig, path)
    plt.close(fig)


def density_svg(path: Path | str, xs: np.ndarray, ys: np.ndarray, values: np.ndarray, units: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 5))
    mesh = ax.pcolormesh(xs, ys, values.T, shading="nearest", cmap="magma")
    fig.colorbar(mesh, ax=ax, label="pdf")
    unit = "m" if units == "world" else "normalized"
    ax.set_xlabel(f"east [{unit}]")
    ax.set_ylabel(f"north [{unit}]")
    ax.set_aspect("equal")
    _save(fig, path)
    plt.close(fig)


def clusters_svg(path: Path | str, sample_paths: np.ndarray, virtual_paths: np.ndarray) -> None:
    """Sample trajectories (thin, grey) under the virtual-target trajectories (bold).

    Both arrays are ``(n, n_t, d)`` world positions; the first two axes are drawn.
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    for p in sample_paths:
        ax.plot(p[:, 0], p[:, 1], color="0.7", lw=0.3)
    for v, p in enumerate(virtual_paths):
        ax.plot(p[:, 0], p[:, 1], lw=2.5, marker="o", ms=3, label=f"virtual {v}")
    ax.set_xlabel("p0 [m]")
    ax.set_ylabel("p1 [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=7)
    _save(fig, path)
    plt.close(fig)
