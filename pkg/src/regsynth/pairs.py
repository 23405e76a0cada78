"""Training-pair factory and magnitude-balanced patch sampling.

One source image is turned into a short chain of slightly deformed moving
images (single frequency, "lowest" settings, sigma_N = 3), one per basis
repetition; every chain member is then paired with a fixed image for each
of the 14 basis field types.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dvf import Category, SynthSpec, basis_types, default_spec, generate
from .errors import MaskError, ParameterError
from .intensity import NoiseParams, add_noise, apply_sponge, jacobian_determinant
from .io import read_volume, write_image
from .pipeline import warp
from .rng import RNG_NAME, derive_seed, make_rng
from .volume import DisplacementField, Volume

log = logging.getLogger(__name__)

FIXED_NOISE_SIGMA = 5.0
CHAIN_NOISE_SIGMA = 3.0
BASIS_MULTIPLIER = {4: 5, 2: 3, 1: 2}

# patch-centre magnitude bins (mm), [lo, hi)
STAGE_BINS = {
    4: ((0.0, 1.5), (1.5, 8.0), (8.0, 20.0)),
    2: ((0.0, 1.5), (1.5, 4.0), (4.0, 15.0)),
    1: ((0.0, 2.0), (2.0, 7.0)),
}
DEFAULT_PATCHES_PER_PAIR = {4: 5, 2: 20, 1: 50}
DEFAULT_PATCH_SIZE = 101


@dataclass(frozen=True)
class Provenance:
    source_id: str
    chain_index: int
    spec: SynthSpec
    noise_seed: int
    sigma_n: float
    chain_seed: Optional[int] = None
    sponge_folds: int = 0

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "chain_index": self.chain_index,
            "spec": self.spec.to_dict(),
            "noise_seed": self.noise_seed,
            "sigma_n": self.sigma_n,
            "chain_seed": self.chain_seed,
            "sponge_folds": self.sponge_folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(
            source_id=d["source_id"],
            chain_index=int(d["chain_index"]),
            spec=SynthSpec.from_dict(d["spec"]),
            noise_seed=int(d["noise_seed"]),
            sigma_n=float(d["sigma_n"]),
            chain_seed=d.get("chain_seed"),
            sponge_folds=int(d.get("sponge_folds", 0)),
        )


@dataclass(frozen=True)
class TrainingPair:
    moving: Volume
    fixed: Volume
    truth: DisplacementField
    provenance: Provenance
    lung_mask: Optional[Volume] = None


def make_fixed(
    moving: Volume,
    spec: SynthSpec,
    lung_mask: Optional[Volume] = None,
    sigma_n: float = FIXED_NOISE_SIGMA,
    noise_seed: int = 0,
    source_id: str = "source",
    chain_index: int = 0,
    chain_seed: Optional[int] = None,
) -> TrainingPair:
    """Generate the ground truth for ``spec`` and deform ``moving`` into a fixed image.

    fixed = noise(sponge(warp(moving, truth), Jac(truth)), sigma_n)
    """
    if spec.category is Category.RESPIRATORY:
        if lung_mask is None:
            raise MaskError("respiratory fields need a lung mask")
        moving.require_same_grid(lung_mask, "moving image and lung mask")
    truth = generate(spec, moving.dims, moving.spacing, moving.origin, lung_mask)
    clean = warp(moving, truth)
    sponged, folds = apply_sponge(clean, jacobian_determinant(truth))
    if folds:
        log.debug("%s: sponge clamp applied at %d voxels", spec.label, folds)
    fixed = add_noise(sponged, NoiseParams(sigma_n, noise_seed))
    prov = Provenance(source_id, chain_index, spec, int(noise_seed), float(sigma_n), chain_seed, folds)
    mask = lung_mask if spec.category is Category.RESPIRATORY else None
    return TrainingPair(moving, fixed, truth, prov, mask)


def regenerate(moving: Volume, provenance: Provenance, lung_mask: Optional[Volume] = None) -> TrainingPair:
    p = provenance
    return make_fixed(moving, p.spec, lung_mask, p.sigma_n, p.noise_seed, p.source_id, p.chain_index, p.chain_seed)


# ---------------------------------------------------------------------------
# Moving-image chain


def storage_round(v: Volume) -> Volume:
    """Round to float32, the precision volumes are written with."""
    return v.with_data(v.data.astype(np.float32))


def chain_link_spec(stage: int, seed: int, index: int) -> tuple[SynthSpec, int]:
    """Field spec and noise seed for chain link ``index`` (>= 1)."""
    spec = default_spec(Category.SINGLE, stage, "lowest", seed=derive_seed(seed, "chain-dvf", index))
    return spec, derive_seed(seed, "chain-noise", index)


@dataclass
class Chain:
    volumes: list[Volume]
    masks: list[Optional[Volume]]
    links: list[Optional[TrainingPair]] = field(default_factory=list)


def build_chain(
    source: Volume,
    n: int,
    stage: int,
    seed: int = 0,
    lung_mask: Optional[Volume] = None,
    quantize: bool = False,
    sigma_n: float = CHAIN_NOISE_SIGMA,
) -> Chain:
    """Chain of ``n`` moving images, each a "lowest" single-frequency deformation of its predecessor.

    A lung mask, when given, is carried along the chain (warped and
    re-thresholded) so every link has an aligned mask.
    """
    if n < 1:
        raise ParameterError(f"chain length must be >= 1, got {n}")
    current = storage_round(source) if quantize else source
    mask = lung_mask
    volumes, masks, links = [current], [mask], [None]
    for i in range(1, n):
        spec, noise_seed = chain_link_spec(stage, seed, i)
        link = make_fixed(current, spec, None, sigma_n, noise_seed, chain_index=i, chain_seed=seed)
        current = storage_round(link.fixed) if quantize else link.fixed
        if mask is not None:
            mask = mask.with_data((warp(mask, link.truth).data >= 0.5).astype(np.float64))
        volumes.append(current)
        masks.append(mask)
        links.append(link)
    return Chain(volumes, masks, links)


def make_chain(source: Volume, n: int, stage: int, seed: int = 0) -> list[Volume]:
    return build_chain(source, n, stage, seed).volumes


# ---------------------------------------------------------------------------
# Basis expansion


@dataclass(frozen=True)
class WorkItem:
    index: int
    chain_index: int
    spec: SynthSpec
    noise_seed: int


def basis_work_list(stage: int, seed: int = 0, have_mask: bool = True) -> tuple[list[WorkItem], int]:
    """Deterministic list of pairs to generate, and how many respiratory pairs were skipped.

    Repetition ``r`` of the 14 basis types uses chain member ``r`` as its
    moving image.
    """
    if stage not in BASIS_MULTIPLIER:
        raise ParameterError(f"stage must be one of {tuple(BASIS_MULTIPLIER)}, got {stage!r}")
    items, skipped = [], 0
    for rep in range(BASIS_MULTIPLIER[stage]):
        for category, cls in basis_types():
            if category is Category.RESPIRATORY and not have_mask:
                skipped += 1
                continue
            k = len(items)
            spec = default_spec(category, stage, cls, seed=derive_seed(seed, "pair-dvf", k))
            items.append(WorkItem(k, rep, spec, derive_seed(seed, "pair-noise", k)))
    return items, skipped


def expand_basis(
    source: Volume,
    stage: int,
    lung_mask: Optional[Volume] = None,
    seed: int = 0,
    source_id: str = "source",
    workers: int = 1,
    sigma_n: float = FIXED_NOISE_SIGMA,
    chain_sigma_n: float = CHAIN_NOISE_SIGMA,
) -> list[TrainingPair]:
    """All basis pairs for one source image (70 / 42 / 28 for stage 4 / 2 / 1).

    Without a lung mask the respiratory types are skipped and a warning
    reports the shortfall. Results do not depend on ``workers``.
    """
    items, skipped = basis_work_list(stage, seed, lung_mask is not None)
    if skipped:
        warnings.warn(
            f"no lung mask: skipped {skipped} respiratory pairs, generating {len(items)} "
            f"of {len(items) + skipped}",
            stacklevel=2,
        )
    chain = build_chain(
        source, BASIS_MULTIPLIER[stage], stage, seed, lung_mask, quantize=True, sigma_n=chain_sigma_n
    )

    def run(item: WorkItem) -> TrainingPair:
        i = item.chain_index
        mask = chain.masks[i] if item.spec.category is Category.RESPIRATORY else None
        return make_fixed(chain.volumes[i], item.spec, mask, sigma_n, item.noise_seed, source_id, i, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, items))
    return [run(item) for item in items]


# ---------------------------------------------------------------------------
# On-disk pair sets


def save_pairs(pairs: list[TrainingPair], out_dir, extra: Optional[dict] = None) -> Path:
    """Write each pair under ``out_dir/pair_NNN/`` and a ``manifest.json`` describing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, pair in enumerate(pairs):
        sub = out_dir / f"pair_{k:03d}"
        entry = {
            "index": k,
            "label": pair.provenance.spec.label,
            "moving": str(write_image(sub / "moving.mhd", pair.moving).relative_to(out_dir)),
            "fixed": str(write_image(sub / "fixed.mhd", pair.fixed).relative_to(out_dir)),
            "truth": str(write_image(sub / "truth.mhd", pair.truth).relative_to(out_dir)),
            "provenance": pair.provenance.to_dict(),
        }
        if pair.lung_mask is not None:
            entry["lung_mask"] = str(write_image(sub / "lung_mask.mhd", pair.lung_mask).relative_to(out_dir))
        entries.append(entry)
    manifest = {"rng": RNG_NAME, "count": len(entries), **(extra or {}), "pairs": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return path


def regenerate_from_manifest(manifest_path, index: int) -> TrainingPair:
    """Rebuild pair ``index`` from its stored moving image (and mask) plus provenance."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entry = json.loads(manifest_path.read_text())["pairs"][index]
    moving = read_volume(root / entry["moving"])
    mask = read_volume(root / entry["lung_mask"]) if "lung_mask" in entry else None
    return regenerate(moving, Provenance.from_dict(entry["provenance"]), mask)


# ---------------------------------------------------------------------------
# Patch sampling


@dataclass(frozen=True)
class PatchPlan:
    stage: int
    patch_size: int
    bins: tuple[tuple[float, float], ...]
    samples_per_pair: int
    centers: np.ndarray
    labels: np.ndarray
    empty_bins: tuple[int, ...] = ()

    def bin_counts(self) -> list[int]:
        return [int(np.count_nonzero(self.labels == b)) for b in range(len(self.bins))]


def _allocate(count: int, capacity: list[int]) -> list[int]:
    """Split ``count`` as evenly as possible over bins with positive capacity."""
    share = [0] * len(capacity)
    open_bins = [b for b, c in enumerate(capacity) if c > 0]
    remaining = count
    while remaining > 0 and open_bins:
        base, extra = divmod(remaining, len(open_bins))
        for rank, b in enumerate(open_bins):
            share[b] += base + (1 if rank < extra else 0)
        remaining = 0
        for b in open_bins:
            if share[b] > capacity[b]:
                remaining += share[b] - capacity[b]
                share[b] = capacity[b]
        open_bins = [b for b in open_bins if share[b] < capacity[b]]
    if remaining:
        raise ParameterError(f"only {sum(capacity)} eligible patch centres for {count} requested")
    return share


def sample_patches(
    pair: TrainingPair,
    stage: int,
    count: Optional[int] = None,
    patch_size: int = DEFAULT_PATCH_SIZE,
    seed: int = 0,
) -> PatchPlan:
    """Patch centres balanced over the stage's displacement-magnitude bins.

    Magnitude is the norm of the ground-truth vector at the centre voxel;
    magnitudes past the last bin edge count toward the last bin.
    Centres keep the whole patch inside the volume; empty bins give their
    share to the others.
    """
    if stage not in STAGE_BINS:
        raise ParameterError(f"stage must be one of {tuple(STAGE_BINS)}, got {stage!r}")
    count = DEFAULT_PATCHES_PER_PAIR[stage] if count is None else int(count)
    bins = STAGE_BINS[stage]
    dims = pair.truth.dims
    if patch_size < 1 or any(n < patch_size for n in dims):
        raise ParameterError(f"volume {dims} is smaller than the patch size {patch_size}")
    half = patch_size // 2
    lo_idx = np.array([half] * 3)
    hi_idx = np.array(dims) - (patch_size - half)  # inclusive upper bound for centres
    region = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo_idx, hi_idx))
    mag = pair.truth.magnitude()[region]
    flat = mag.ravel(order="F")
    # the top bin is open-ended: vector norms can exceed the per-axis theta by up to sqrt(3)
    members = [np.flatnonzero((flat >= lo) & ((flat < hi) | (b == len(bins) - 1))) for b, (lo, hi) in enumerate(bins)]
    nonempty = [b for b, m in enumerate(members) if m.size]
    if count < len(nonempty):
        raise ParameterError(f"count {count} is smaller than the {len(nonempty)} non-empty bins")
    empty = tuple(b for b, m in enumerate(members) if m.size == 0)
    if empty:
        log.info("stage %d: bins %s are empty; their share is redistributed", stage, list(empty))
    shares = _allocate(count, [m.size for m in members])
    rng = make_rng(seed)
    centers, labels = [], []
    shape = mag.shape
    for b, (m, k) in enumerate(zip(members, shares)):
        if k == 0:
            continue
        picked = rng.choice(m, size=k, replace=False)
        ijk = np.stack(np.unravel_index(picked, shape, order="F"), axis=-1) + lo_idx
        centers.append(ijk)
        labels.append(np.full(k, b))
    centers = np.concatenate(centers) if centers else np.zeros((0, 3), dtype=int)
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=int)
    return PatchPlan(stage, patch_size, bins, count, centers.astype(np.intp), labels.astype(np.intp), empty)
