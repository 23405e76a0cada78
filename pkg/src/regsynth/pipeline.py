"""Coarse-to-fine registration driver with pluggable per-stage predictors."""

from __future__ import annotations

import logging
import math
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .dvf import THETA
from .errors import ContractError, ParameterError, ShapeError
from .volume import DisplacementField, Volume, downscale, trilinear_at_index, upscale_field

log = logging.getLogger(__name__)

STAGE_ORDER = (4, 2, 1)
# per-axis capture range of each stage (mm)
STAGE_THETA = {stage: THETA[stage][-1] for stage in STAGE_ORDER}


def warp(moving: Volume, field: DisplacementField) -> Volume:
    """Backward warp: ``out(x) = moving(x + d(x))`` with trilinear sampling."""
    moving.require_same_grid(field, "moving image and field")
    idx = np.indices(moving.dims, dtype=np.float64).transpose(1, 2, 3, 0)
    idx += field.data / np.asarray(field.spacing)
    return moving.with_data(trilinear_at_index(moving.data, idx))


def compose(first: DisplacementField, second: DisplacementField) -> DisplacementField:
    """``out(x) = first(x) + second(x + first(x))``."""
    first.require_same_grid(second, "fields")
    idx = np.indices(first.dims, dtype=np.float64).transpose(1, 2, 3, 0)
    idx += first.data / np.asarray(first.spacing)
    return first.with_data(first.data + trilinear_at_index(second.data, idx))


# ---------------------------------------------------------------------------
# Predictors
#
# A predictor is any callable ``(fixed, moving) -> DisplacementField`` that
# returns a field on the fixed image's grid.

StagePredictor = Callable[[Volume, Volume], DisplacementField]


class IdentityPredictor:
    def __call__(self, fixed: Volume, moving: Volume) -> DisplacementField:
        return DisplacementField.zeros(fixed.dims, fixed.spacing, fixed.origin)

    def __repr__(self):
        return "IdentityPredictor()"


def _shifted(data: np.ndarray, offset) -> np.ndarray:
    """``data[i + offset]`` with indices clamped to the volume."""
    out = data
    for a, o in enumerate(offset):
        if o:
            idx = np.clip(np.arange(data.shape[a]) + o, 0, data.shape[a] - 1)
            out = np.take(out, idx, axis=a)
    return out


class TranslationPredictor:
    """Exhaustive search for the whole-voxel translation minimising the sum of absolute differences.

    Candidate shifts are integer millimetre offsets within ``+-theta`` that
    land on the stage grid. ``theta`` defaults to the capture range of the
    stage implied by the grid spacing.
    """

    def __init__(self, theta: Optional[float] = None):
        self.theta = theta

    def __call__(self, fixed: Volume, moving: Volume) -> DisplacementField:
        fixed.require_same_grid(moving, "fixed and moving images")
        theta = self.theta
        if theta is None:
            stage = min(STAGE_ORDER, key=lambda s: abs(s - fixed.spacing[0]))
            theta = STAGE_THETA[stage]
        steps = [int(math.floor(theta / h + 1e-9)) for h in fixed.spacing]
        best, best_cost = (0, 0, 0), np.inf
        for ox in range(-steps[0], steps[0] + 1):
            for oy in range(-steps[1], steps[1] + 1):
                for oz in range(-steps[2], steps[2] + 1):
                    cost = np.abs(_shifted(moving.data, (ox, oy, oz)) - fixed.data).sum()
                    # ties go to the smallest shift, then lexicographic order
                    if cost < best_cost or (cost == best_cost and ox * ox + oy * oy + oz * oz < sum(b * b for b in best)):
                        best, best_cost = (ox, oy, oz), cost
        d = np.empty(fixed.dims + (3,))
        for a in range(3):
            d[..., a] = best[a] * fixed.spacing[a]
        return DisplacementField(d, fixed.spacing, fixed.origin)

    def __repr__(self):
        return f"TranslationPredictor(theta={self.theta})"


class OraclePredictor:
    """Test predictor that knows the full-resolution ground truth.

    It mirrors the driver's accumulation, so at each stage it returns the
    residual that brings the running total to the truth (at the first stage
    that is just the truth, downscaled to the stage grid).
    """

    def __init__(self, truth: DisplacementField, iterations: int = 50, tol: float = 1e-10):
        self.truth = truth
        self.iterations = iterations
        self.tol = tol
        self.total = DisplacementField.zeros(truth.dims, truth.spacing, truth.origin)

    def _residual(self) -> DisplacementField:
        # solve r = truth(x) - total(x + r(x)) by fixed-point iteration
        r = self.truth.data - self.total.data
        h = np.asarray(self.truth.spacing)
        base = np.indices(self.truth.dims, dtype=np.float64).transpose(1, 2, 3, 0)
        if not np.any(self.total.data):
            return self.truth.with_data(r)
        for _ in range(self.iterations):
            r_next = self.truth.data - trilinear_at_index(self.total.data, base + r / h)
            step = np.max(np.abs(r_next - r))
            r = r_next
            if step < self.tol:
                break
        return self.truth.with_data(r)

    def __call__(self, fixed: Volume, moving: Volume) -> DisplacementField:
        factor = int(round(fixed.spacing[0] / self.truth.spacing[0]))
        r = self._residual()
        out = r if factor == 1 else downscale(r, factor)
        full = out if factor == 1 else upscale_field(out, self.truth.dims, self.truth.spacing, self.truth.origin)
        self.total = compose(full, self.total)
        return out


class ExecPredictor:
    """Runs ``<executable> fixed.mhd moving.mhd out.mhd`` and reads the field it writes."""

    def __init__(self, executable: str, timeout: Optional[float] = None):
        self.executable = executable
        self.timeout = timeout

    def __call__(self, fixed: Volume, moving: Volume) -> DisplacementField:
        from .io import read_field, write_volume

        with tempfile.TemporaryDirectory(prefix="regsynth-exec-") as tmp:
            paths = [os.path.join(tmp, n) for n in ("fixed.mhd", "moving.mhd", "field.mhd")]
            write_volume(paths[0], fixed)
            write_volume(paths[1], moving)
            try:
                proc = subprocess.run(
                    [self.executable, *paths], capture_output=True, text=True, timeout=self.timeout
                )
            except OSError as exc:
                raise ContractError(f"cannot run predictor {self.executable!r}: {exc}") from exc
            if proc.returncode != 0:
                raise ContractError(
                    f"predictor {self.executable!r} exited with status {proc.returncode}: {proc.stderr.strip()}"
                )
            if not os.path.exists(paths[2]):
                raise ContractError(f"predictor {self.executable!r} did not write {paths[2]}")
            return read_field(paths[2])

    def __repr__(self):
        return f"ExecPredictor({self.executable!r})"


# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    total: DisplacementField
    per_stage: dict[int, DisplacementField]
    warped_moving: Volume
    timings: dict[int, float] = field(default_factory=dict)
    stage_outputs: dict[int, DisplacementField] = field(default_factory=dict)

    def refold(self) -> DisplacementField:
        """Recompute the total from the per-stage fields."""
        stages = sorted(self.per_stage, reverse=True)
        total = DisplacementField.zeros(self.total.dims, self.total.spacing, self.total.origin)
        for s in stages:
            total = compose(self.per_stage[s], total)
        return total


def _normalise_predictors(predictors) -> list[tuple[int, StagePredictor]]:
    items = list(predictors.items()) if isinstance(predictors, Mapping) else list(predictors)
    if not items:
        raise ParameterError("at least one stage predictor is required")
    stages = [int(s) for s, _ in items]
    if any(s not in STAGE_ORDER for s in stages):
        raise ParameterError(f"stages must be drawn from {STAGE_ORDER}, got {stages}")
    if len(set(stages)) != len(stages):
        raise ParameterError(f"duplicate stages in {stages}")
    return sorted(((int(s), p) for s, p in items), key=lambda sp: -sp[0])


def run_pipeline(
    fixed: Volume,
    moving: Volume,
    predictors: Union[Mapping[int, StagePredictor], Sequence[tuple[int, StagePredictor]]],
) -> PipelineResult:
    """Coarse-to-fine registration.

    Each stage predicts on downscaled copies of the fixed image and of the
    moving image warped by the running total; the stage field is brought to
    full resolution and composed in front of the running total, so the
    result warps the original moving image exactly as the serial stages did.
    """
    fixed.require_same_grid(moving, "fixed and moving images")
    total = DisplacementField.zeros(fixed.dims, fixed.spacing, fixed.origin)
    warped = moving
    per_stage, raw, timings = {}, {}, {}
    for stage, predictor in _normalise_predictors(predictors):
        if stage > 1:
            f_s, m_s = downscale(fixed, stage), downscale(warped, stage)
        else:
            f_s, m_s = fixed, warped
        t0 = time.perf_counter()
        out = predictor(f_s, m_s)
        timings[stage] = time.perf_counter() - t0
        if not isinstance(out, DisplacementField):
            raise ContractError(f"stage {stage} predictor returned {type(out).__name__}, not a DisplacementField")
        try:
            f_s.require_same_grid(out, f"stage {stage} predictor output and stage grid")
        except ShapeError as exc:
            raise ContractError(str(exc)) from exc
        limit = 2.0 * math.sqrt(3.0) * STAGE_THETA[stage]
        peak = float(out.magnitude().max())
        if peak > limit:
            log.warning("stage %d field reaches %.2f mm, beyond its %.2f mm capture range", stage, peak, limit)
        full = out if stage == 1 else upscale_field(out, fixed.dims, fixed.spacing, fixed.origin)
        raw[stage], per_stage[stage] = out, full
        total = compose(full, total)
        warped = warp(moving, total)
    return PipelineResult(total, per_stage, warped, timings, raw)
