"""Training losses with analytic gradients, and registration quality measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EmptySetError, MaskError, ParameterError, ShapeError
from .intensity import jacobian_determinant
from .volume import DisplacementField, Volume, diff_along, diff_along_adjoint, trilinear_at_index

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.05
HUBER_DELTA = 1.0

# (a, b, weight): the six unique second derivatives, mixed terms counted twice
_SECOND_ORDER_TERMS = ((0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 1, 2.0), (0, 2, 2.0), (1, 2, 2.0))


class LossValue(NamedTuple):
    value: float
    gradient: DisplacementField


@dataclass(frozen=True)
class LossParams:
    gamma: float = DEFAULT_GAMMA
    huber_delta: float = HUBER_DELTA

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if self.huber_delta != HUBER_DELTA:
            raise ParameterError("the Huber threshold is fixed at 1")


def huber(truth: DisplacementField, pred: DisplacementField) -> LossValue:
    """Mean over all components of ``r**2`` for ``|r| <= 1`` and ``|r|`` otherwise."""
    truth.require_same_grid(pred, "truth and prediction")
    r = truth.data - pred.data
    a = np.abs(r)
    inner = a <= HUBER_DELTA
    n = r.size
    value = float(np.where(inner, r * r, a).sum() / n)
    grad = np.where(inner, -2.0 * r, -np.sign(r)) / n
    return LossValue(value, pred.with_data(grad))


def _second_derivatives(f: DisplacementField):
    h = f.spacing
    for a, b, w in _SECOND_ORDER_TERMS:
        yield a, b, w, diff_along(diff_along(f.data, b, h[b]), a, h[a])


def bending_energy_map(f: DisplacementField) -> Volume:
    """Per-voxel bending integrand summed over the three components."""
    if min(f.dims) < 3:
        raise ParameterError(f"bending energy needs at least 3 voxels per axis, got {f.dims}")
    acc = np.zeros(f.dims)
    for _, _, w, dd in _second_derivatives(f):
        acc += w * np.sum(dd * dd, axis=-1)
    return Volume(acc, f.spacing, f.origin)


def bending_energy(f: DisplacementField) -> LossValue:
    """Mean over voxels and components of the second-derivative energy, with its gradient."""
    if min(f.dims) < 3:
        raise ParameterError(f"bending energy needs at least 3 voxels per axis, got {f.dims}")
    h = f.spacing
    n = f.data.size
    value = 0.0
    grad = np.zeros_like(f.data)
    for a, b, w, dd in _second_derivatives(f):
        value += w * float(np.sum(dd * dd))
        back = diff_along_adjoint(diff_along_adjoint(dd, a, h[a]), b, h[b])
        grad += (2.0 * w / n) * back
    return LossValue(value / n, f.with_data(grad))


def total_loss(truth: DisplacementField, pred: DisplacementField, p: LossParams = LossParams()) -> LossValue:
    hub = huber(truth, pred)
    if p.gamma == 0:
        return hub
    be = bending_energy(pred)
    return LossValue(hub.value + p.gamma * be.value, pred.with_data(hub.gradient.data + p.gamma * be.gradient.data))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class LandmarkSet:
    fixed: np.ndarray
    moving: np.ndarray

    def __post_init__(self):
        fx = np.array(self.fixed, dtype=np.float64).reshape(-1, 3)
        mv = np.array(self.moving, dtype=np.float64).reshape(-1, 3)
        if fx.shape != mv.shape:
            raise ShapeError(f"{len(fx)} fixed landmarks but {len(mv)} moving landmarks")
        if len(fx) == 0:
            raise EmptySetError("landmark set is empty")
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(mv))):
            raise ParameterError("landmark coordinates must be finite")
        object.__setattr__(self, "fixed", fx)
        object.__setattr__(self, "moving", mv)

    @property
    def n(self) -> int:
        return len(self.fixed)

    def initial_distances(self) -> np.ndarray:
        return np.linalg.norm(self.fixed - self.moving, axis=1)


@dataclass(frozen=True)
class TREResult:
    distances: np.ndarray
    indices: np.ndarray
    excluded: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def std(self) -> float:
        return float(np.std(self.distances))


def tre(lm: LandmarkSet, pred: DisplacementField) -> TREResult:
    """Per-landmark ``|T'(x_F) + x_F - x_M|``; landmarks outside the field's grid are dropped."""
    inside = pred.contains(lm.fixed)
    excluded = np.flatnonzero(~inside)
    if excluded.size:
        log.warning("excluding %d landmark(s) outside the field extent: %s", excluded.size, excluded.tolist())
    keep = np.flatnonzero(inside)
    if keep.size == 0:
        raise EmptySetError("no landmarks left inside the field extent")
    xf = lm.fixed[keep]
    d = trilinear_at_index(pred.data, pred.to_index(xf))
    dist = np.linalg.norm(d + xf - lm.moving[keep], axis=1)
    return TREResult(dist, keep, excluded)


def jacobian_stats(pred: DisplacementField, mask: Volume) -> tuple[float, float]:
    """Percentage of masked voxels with negative Jacobian, and the Jacobian std inside the mask."""
    pred.require_same_grid(mask, "field and mask")
    m = mask.data > 0.5
    if not m.any():
        raise MaskError("evaluation mask is empty")
    jac = jacobian_determinant(pred).data[m]
    return 100.0 * float(np.count_nonzero(jac < 0)) / jac.size, float(np.std(jac))
