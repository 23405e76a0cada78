"""Artificial ground-truth displacement fields.

Four categories are produced: single frequency (smoothed random B-spline
control grid, normalised per axis to +-theta), mixed frequency (single
frequency gated by a random blob mask, then smoothed), respiratory
(transversal expansion + diaphragm translation + single frequency) and
identity. Default parameters come from a fixed per-stage schedule.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import MaskError, ParameterError, UnsupportedCombinationError
from .rng import make_rng
from .volume import (
    ControlGrid,
    DisplacementField,
    Volume,
    gaussian_smooth,
    resample_control_grid,
)


class Category(str, enum.Enum):
    SINGLE = "single"
    MIXED = "mixed"
    RESPIRATORY = "respiratory"
    IDENTITY = "identity"


FREQUENCY_CLASSES = ("lowest", "low", "intermediate", "high", "highest")
STAGES = (1, 2, 4)

# max displacement per axis (mm), by stage then frequency class
THETA = {
    1: (3.0, 7.0, 7.0, 7.0, 7.0),
    2: (5.0, 15.0, 15.0, 15.0, 15.0),
    4: (7.0, 20.0, 20.0, 20.0, 20.0),
}

# B-spline grid spacing (mm); None marks a combination with no schedule entry
GRID_SPACING = {
    (Category.SINGLE, 1): ((50, 50, 50), (45, 45, 45), (35, 35, 35), (25, 25, 25), (20, 20, 20)),
    (Category.SINGLE, 2): ((60, 60, 60), (50, 50, 50), (45, 45, 45), (40, 40, 40), (35, 35, 35)),
    (Category.SINGLE, 4): ((80, 80, 80), (70, 70, 70), (60, 60, 60), (50, 50, 50), (45, 45, 45)),
    (Category.MIXED, 1): ((50, 50, 50), (40, 40, 40), (25, 25, 35), (20, 20, 30), None),
    (Category.MIXED, 2): ((60, 60, 60), (50, 50, 40), (40, 40, 80), (35, 35, 80), None),
    (Category.MIXED, 4): ((80, 80, 80), (60, 60, 60), (50, 50, 50), (45, 45, 60), None),
    (Category.RESPIRATORY, 1): ((50, 50, 50), (45, 45, 45), (35, 35, 35), (25, 25, 25), None),
    (Category.RESPIRATORY, 2): ((60, 60, 60), (50, 50, 50), (45, 45, 45), (40, 40, 40), None),
    (Category.RESPIRATORY, 4): ((80, 80, 80), (70, 70, 70), (60, 60, 60), (50, 50, 50), None),
}

# range for the post-mask smoothing sigma of mixed-frequency fields (mm)
SIGMA_B_RANGE = {1: (5.0, 10.0), 2: (7.0, 12.0), 4: (10.0, 15.0)}

MAX_SCALE = 1.12
DIAPHRAGM_DECAY_MM = 30.0
MASK_NOISE_SIGMA_VOX = 8.0
MIN_DIM = 8


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one artificial displacement field."""

    category: Category
    stage: int
    frequency_class: Optional[str]
    theta: float = 0.0
    grid_spacing: Optional[tuple[float, float, float]] = None
    sigma_b_range: Optional[tuple[float, float]] = None
    max_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.theta < 0:
            raise ParameterError(f"theta must be >= 0, got {self.theta}")
        if self.category is Category.IDENTITY:
            return
        if self.frequency_class not in FREQUENCY_CLASSES:
            raise ParameterError(f"unknown frequency class {self.frequency_class!r}")
        if self.frequency_class == "highest" and self.category is not Category.SINGLE:
            raise UnsupportedCombinationError(
                f"frequency class 'highest' is only defined for single-frequency fields, "
                f"not {self.category.value}"
            )
        if self.grid_spacing is None or min(self.grid_spacing) <= 0:
            raise ParameterError(f"grid spacing must be positive, got {self.grid_spacing}")
        if self.category is Category.MIXED:
            lo, hi = self.sigma_b_range or (0.0, 0.0)
            if not 0 < lo <= hi:
                raise ParameterError(f"mixed fields need a positive sigma_B range, got {self.sigma_b_range}")
        if self.category is Category.RESPIRATORY and (self.max_scale is None or self.max_scale < 1.0):
            raise ParameterError(f"respiratory fields need max_scale >= 1, got {self.max_scale}")

    @property
    def label(self) -> str:
        if self.category is Category.IDENTITY:
            return f"identity_s{self.stage}"
        return f"{self.category.value}_{self.frequency_class}_s{self.stage}"

    def with_seed(self, seed: int) -> "SynthSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "stage": self.stage,
            "frequency_class": self.frequency_class,
            "theta": self.theta,
            "grid_spacing": list(self.grid_spacing) if self.grid_spacing else None,
            "sigma_b_range": list(self.sigma_b_range) if self.sigma_b_range else None,
            "max_scale": self.max_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(
            category=Category(d["category"]),
            stage=int(d["stage"]),
            frequency_class=d.get("frequency_class"),
            theta=float(d.get("theta", 0.0)),
            grid_spacing=tuple(float(x) for x in d["grid_spacing"]) if d.get("grid_spacing") else None,
            sigma_b_range=tuple(float(x) for x in d["sigma_b_range"]) if d.get("sigma_b_range") else None,
            max_scale=d.get("max_scale"),
            seed=int(d.get("seed", 0)),
        )


def default_spec(category, stage: int, frequency_class: Optional[str] = None, seed: int = 0) -> SynthSpec:
    """Look up the scheduled parameters for a (category, stage, class) triple."""
    category = Category(category)
    if stage not in STAGES:
        raise ParameterError(f"stage must be one of {STAGES}, got {stage!r}")
    if category is Category.IDENTITY:
        return SynthSpec(category, stage, None, theta=0.0, seed=seed)
    if frequency_class not in FREQUENCY_CLASSES:
        raise ParameterError(f"unknown frequency class {frequency_class!r}")
    col = FREQUENCY_CLASSES.index(frequency_class)
    s = GRID_SPACING[(category, stage)][col]
    if s is None:
        raise UnsupportedCombinationError(
            f"no scheduled parameters for {category.value} / stage {stage} / {frequency_class}"
        )
    return SynthSpec(
        category=category,
        stage=stage,
        frequency_class=frequency_class,
        theta=THETA[stage][col],
        grid_spacing=tuple(float(x) for x in s),
        sigma_b_range=SIGMA_B_RANGE[stage] if category is Category.MIXED else None,
        max_scale=MAX_SCALE if category is Category.RESPIRATORY else None,
        seed=seed,
    )


def basis_types() -> list[tuple[Category, Optional[str]]]:
    """The 14 (category, class) combinations: 5 single, 4 mixed, 4 respiratory, 1 identity."""
    out = [(Category.SINGLE, c) for c in FREQUENCY_CLASSES]
    out += [(cat, c) for cat, c in itertools.product((Category.MIXED, Category.RESPIRATORY), FREQUENCY_CLASSES[:4])]
    out.append((Category.IDENTITY, None))
    return out


# ---------------------------------------------------------------------------


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise ParameterError(f"target dims must be 3 values >= {MIN_DIM}, got {dims}")
    return dims


def _draw_control_values(rng: np.random.Generator, shape) -> np.ndarray:
    # one uniform draw per component, channel fastest then x, y, z
    flat = rng.uniform(-1.0, 1.0, size=3 * int(np.prod(shape)))
    return flat.reshape((3,) + tuple(shape), order="F").transpose(1, 2, 3, 0)


def _single_frequency(spec: SynthSpec, dims, spacing, origin, rng) -> DisplacementField:
    counts, _ = ControlGrid.layout(dims, spacing, origin, spec.grid_spacing)
    grid = ControlGrid.covering(dims, spacing, origin, spec.grid_spacing, values=_draw_control_values(rng, counts))
    smoothed = gaussian_smooth(grid.as_field(), grid.grid_spacing)
    grid = ControlGrid(smoothed.data, grid.grid_spacing, grid.origin, grid.padding)
    d = resample_control_grid(grid, dims, spacing, origin).data.copy()
    for a in range(3):
        peak = np.max(np.abs(d[..., a]))
        if peak > 0:
            d[..., a] = d[..., a] / peak * spec.theta
    return DisplacementField(d, spacing, origin)


def random_blob_mask(dims, spacing, rng: np.random.Generator) -> np.ndarray:
    """Binary mask from median-thresholded, smoothed uniform noise (about 50% fill)."""
    noise = rng.uniform(0.0, 1.0, size=int(np.prod(dims))).reshape(dims, order="F")
    sigma_mm = [MASK_NOISE_SIGMA_VOX * h for h in spacing]
    smooth = gaussian_smooth(Volume(noise, spacing), sigma_mm).data
    return smooth > np.median(smooth)


def gen_single_frequency(spec: SynthSpec, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DisplacementField:
    if spec.category is not Category.SINGLE:
        raise ParameterError(f"expected a single-frequency spec, got {spec.category.value}")
    dims = _check_dims(dims)
    return _single_frequency(spec, dims, spacing, origin, make_rng(spec.seed))


def gen_mixed_frequency(
    spec: SynthSpec,
    dims,
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    mask_override: Optional[np.ndarray] = None,
) -> DisplacementField:
    """Single-frequency field gated by a random binary mask, then smoothed with sigma_B.

    ``mask_override`` replaces the random mask (the draws are still consumed
    so the rest of the stream is unchanged).
    """
    if spec.category is not Category.MIXED:
        raise ParameterError(f"expected a mixed-frequency spec, got {spec.category.value}")
    dims = _check_dims(dims)
    rng = make_rng(spec.seed)
    base = _single_frequency(spec, dims, spacing, origin, rng)
    lo, hi = spec.sigma_b_range
    sigma_b = float(rng.uniform(lo, hi))
    mask = random_blob_mask(dims, base.spacing, rng)
    if mask_override is not None:
        mask = np.broadcast_to(np.asarray(mask_override, dtype=bool), dims)
    gated = base.with_data(base.data * mask[..., None])
    return gaussian_smooth(gated, sigma_b)


def diaphragm_surface(lung_mask: Volume) -> np.ndarray:
    """Per-(x, y) world z of the most caudal (lowest z) lung voxel.

    Columns without lung take the mean level of the columns that have one.
    """
    m = lung_mask.data > 0.5
    has = m.any(axis=2)
    z = lung_mask.axis_coordinates(2)
    first = np.argmax(m, axis=2)
    surf = z[first]
    surf[~has] = surf[has].mean()
    return surf


def gen_respiratory(
    spec: SynthSpec,
    lung_mask: Volume,
    dims=None,
    expansion_factor: Optional[float] = None,
    translation: Optional[float] = None,
) -> DisplacementField:
    """Transversal expansion about the lung centroid + cranio-caudal diaphragm shift + random field.

    The grid is taken from ``lung_mask``. ``expansion_factor`` and
    ``translation`` pin the two random scalars (draws are still consumed).
    """
    if spec.category is not Category.RESPIRATORY:
        raise ParameterError(f"expected a respiratory spec, got {spec.category.value}")
    if dims is not None and tuple(int(n) for n in dims) != lung_mask.dims:
        raise ParameterError(f"lung mask dims {lung_mask.dims} differ from target dims {tuple(dims)}")
    dims = _check_dims(lung_mask.dims)
    vals = lung_mask.data
    if not np.all((vals == 0) | (vals == 1)):
        raise MaskError("lung mask must be binary (0/1)")
    inside = vals > 0.5
    if not inside.any():
        raise MaskError("lung mask is empty; cannot locate the lungs or the diaphragm")

    rng = make_rng(spec.seed)
    random_part = _single_frequency(spec, dims, lung_mask.spacing, lung_mask.origin, rng)
    f = 1.0 + (spec.max_scale - 1.0) * (1.0 - rng.random())
    shift = spec.theta * (1.0 - rng.random())
    if expansion_factor is not None:
        f = float(expansion_factor)
    if translation is not None:
        shift = float(translation)

    xyz = lung_mask.world_coordinates()
    centroid = xyz[inside].mean(axis=0)
    d = np.zeros(dims + (3,))
    d[..., 0] = (f - 1.0) * (xyz[..., 0] - centroid[0])
    d[..., 1] = (f - 1.0) * (xyz[..., 1] - centroid[1])

    above = xyz[..., 2] - diaphragm_surface(lung_mask)[..., None]
    weight = np.where(above <= 0, 1.0, np.exp(-0.5 * (np.maximum(above, 0) / DIAPHRAGM_DECAY_MM) ** 2))
    d[..., 2] = shift * weight
    return random_part.with_data(d + random_part.data)


def gen_identity(dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DisplacementField:
    return DisplacementField.zeros(tuple(int(n) for n in dims), spacing, origin)


def generate(
    spec: SynthSpec,
    dims,
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    lung_mask: Optional[Volume] = None,
) -> DisplacementField:
    """Dispatch to the generator for ``spec.category``."""
    if spec.category is Category.SINGLE:
        return gen_single_frequency(spec, dims, spacing, origin)
    if spec.category is Category.MIXED:
        return gen_mixed_frequency(spec, dims, spacing, origin)
    if spec.category is Category.RESPIRATORY:
        if lung_mask is None:
            raise MaskError("respiratory fields need a lung mask")
        return gen_respiratory(spec, lung_mask, dims)
    return gen_identity(dims, spacing, origin)
