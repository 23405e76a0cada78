"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_field_summary(field, jac, counts, edges, path, title: str = ""):
    """Mid-slice displacement magnitude next to the Jacobian histogram."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    mag = field.magnitude()
    z = field.dims[2] // 2
    im = ax0.imshow(mag[:, :, z].T, origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax0, label="|d| (mm)")
    ax0.set_title(f"displacement magnitude, slice z={z}")
    ax0.set_xlabel("x (voxel)")
    ax0.set_ylabel("y (voxel)")

    centers = 0.5 * (edges[:-1] + edges[1:])
    ax1.bar(centers, counts, width=np.diff(edges), color="0.35")
    ax1.axvline(1.0, color="k", lw=0.8, ls="--")
    ax1.set_xlabel("Jacobian determinant")
    ax1.set_ylabel("voxels")
    ax1.set_title(f"std(Jac) = {float(np.std(jac)):.4f}")
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def plot_tre(initial, after, path, title: str = ""):
    """Per-landmark distance before and after registration."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    lim = max(float(np.max(initial)), float(np.max(after)), 1e-6) * 1.05
    ax0.scatter(initial, after, s=10, color="0.2")
    ax0.plot([0, lim], [0, lim], color="k", lw=0.8, ls="--")
    ax0.set_xlim(0, lim)
    ax0.set_ylim(0, lim)
    ax0.set_xlabel("initial distance (mm)")
    ax0.set_ylabel("TRE (mm)")

    bins = np.linspace(0, lim, 30)
    ax1.hist(initial, bins=bins, alpha=0.5, label=f"initial {np.mean(initial):.2f} mm")
    ax1.hist(after, bins=bins, alpha=0.5, label=f"after {np.mean(after):.2f} mm")
    ax1.set_xlabel("distance (mm)")
    ax1.set_ylabel("landmarks")
    ax1.legend(frameon=False)
    if title:
        fig.suptitle(title)
    return _finish(fig, path)
