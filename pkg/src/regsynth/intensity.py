"""Jacobian determinant and post-deformation intensity models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .rng import make_rng
from .volume import DisplacementField, Volume, diff_along

SPONGE_EPS = 1e-3


@dataclass(frozen=True)
class NoiseParams:
    sigma_n: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_n >= 0:
            raise ParameterError(f"sigma_N must be >= 0, got {self.sigma_n}")


def jacobian_matrix(f: DisplacementField) -> np.ndarray:
    """``I + grad(d)`` per voxel, shape ``(nx, ny, nz, 3, 3)``; row = component, column = axis."""
    if min(f.dims) < 3:
        raise ParameterError(f"Jacobian needs at least 3 voxels per axis, got {f.dims}")
    jac = np.empty(f.dims + (3, 3))
    for c in range(3):
        for a in range(3):
            jac[..., c, a] = diff_along(f.data[..., c], a, f.spacing[a])
    for c in range(3):
        jac[..., c, c] += 1.0
    return jac


def jacobian_determinant(f: DisplacementField) -> Volume:
    j = jacobian_matrix(f)
    det = (
        j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
        - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
        + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0])
    )
    return Volume(det, f.spacing, f.origin)


def apply_sponge(v: Volume, jac: Volume, eps: float = SPONGE_EPS) -> tuple[Volume, int]:
    """Divide intensities by the local Jacobian determinant.

    Where ``jac <= eps`` the divisor is clamped to ``eps``; the number of
    such voxels is returned alongside the image.
    """
    v.require_same_grid(jac, "image and Jacobian")
    bad = jac.data <= eps
    divisor = np.where(bad, eps, jac.data)
    return v.with_data(v.data / divisor), int(bad.sum())


def add_noise(v: Volume, p: NoiseParams) -> Volume:
    """Add i.i.d. zero-mean Gaussian noise drawn in x-fastest voxel order."""
    if p.sigma_n == 0:
        return v
    noise = make_rng(p.seed).standard_normal(v.n_voxels).reshape(v.dims, order="F")
    return v.with_data(v.data + p.sigma_n * noise)
