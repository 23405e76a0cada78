import json
import warnings

import numpy as np
import pytest

from conftest import phantom
from regsynth.dvf import Category, default_spec
from regsynth.errors import MaskError, ParameterError
from regsynth.intensity import apply_sponge, jacobian_determinant
from regsynth.io import write_image
from regsynth.metrics import LandmarkSet, tre
from regsynth.pairs import (
    Provenance,
    TrainingPair,
    basis_work_list,
    build_chain,
    expand_basis,
    make_chain,
    make_fixed,
    regenerate,
    regenerate_from_manifest,
    sample_patches,
    save_pairs,
)
from regsynth.pipeline import warp
from regsynth.volume import DisplacementField, Volume


@pytest.fixture(scope="module")
def source():
    return phantom((24, 24, 24))


class TestMakeFixed:
    def test_identity_pair(self, source):
        moving, _ = source
        pair = make_fixed(moving, default_spec("identity", 1), noise_seed=4)
        assert not pair.truth.data.any()
        noise = pair.fixed.data - moving.data
        assert 3.0 < np.std(noise) < 7.0
        quiet = make_fixed(moving, default_spec("identity", 1), sigma_n=0.0)
        assert np.array_equal(quiet.fixed.data, moving.data)

    def test_construction(self, source):
        moving, _ = source
        pair = make_fixed(moving, default_spec("single", 2, "low", seed=3), sigma_n=0.0)
        clean = warp(moving, pair.truth)
        expect, _ = apply_sponge(clean, jacobian_determinant(pair.truth))
        np.testing.assert_array_equal(pair.fixed.data, expect.data)
        # warping by the truth reproduces the pre-sponge image
        jac = jacobian_determinant(pair.truth).data
        np.testing.assert_allclose(pair.fixed.data * jac, warp(moving, pair.truth).data, atol=1e-6)

    @pytest.mark.parametrize("cat,cls", [("single", "high"), ("mixed", "low"), ("respiratory", "intermediate")])
    def test_landmark_self_consistency(self, source, cat, cls):
        from scipy.ndimage import map_coordinates

        moving, mask = source
        pair = make_fixed(moving, default_spec(cat, 1, cls, seed=9), mask)
        pts = np.stack(np.meshgrid(*[np.linspace(2.3, 20.7, 5)] * 3, indexing="ij"), -1).reshape(-1, 3)
        idx = pair.truth.to_index(pts).T
        disp = np.stack([map_coordinates(pair.truth.data[..., c], idx, order=3) for c in range(3)], -1)
        assert tre(LandmarkSet(pts, pts + disp), pair.truth).mean < 0.2

    def test_respiratory_needs_mask(self, source):
        moving, _ = source
        with pytest.raises(MaskError):
            make_fixed(moving, default_spec("respiratory", 1, "low"))

    def test_regenerate(self, source):
        moving, mask = source
        pair = make_fixed(moving, default_spec("respiratory", 4, "low", seed=5), mask, noise_seed=12)
        again = regenerate(moving, Provenance.from_dict(json.loads(json.dumps(pair.provenance.to_dict()))), mask)
        assert again.fixed.data.tobytes() == pair.fixed.data.tobytes()
        assert again.truth.data.tobytes() == pair.truth.data.tobytes()


class TestChain:
    def test_length_one(self, source):
        moving, _ = source
        assert make_chain(moving, 1, 4)[0] is moving

    def test_links(self, source):
        moving, mask = source
        chain = build_chain(moving, 4, 2, seed=3, lung_mask=mask)
        assert len(chain.volumes) == len(chain.masks) == 4
        for a, b in zip(chain.volumes, chain.volumes[1:]):
            assert not np.array_equal(a.data, b.data)
        for link in chain.links[1:]:
            spec = link.provenance.spec
            assert spec.category is Category.SINGLE and spec.frequency_class == "lowest"
            assert link.provenance.sigma_n == 3.0
        assert set(np.unique(chain.masks[-1].data)) <= {0.0, 1.0}
        assert chain.masks[-1].data.sum() > 0

    def test_quantized(self, source):
        moving, _ = source
        chain = build_chain(moving, 3, 1, quantize=True)
        for v in chain.volumes:
            assert np.array_equal(v.data, v.data.astype(np.float32))

    def test_deterministic(self, source):
        moving, _ = source
        a, b = make_chain(moving, 3, 4, seed=2), make_chain(moving, 3, 4, seed=2)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


class TestBasis:
    @pytest.mark.parametrize("stage,n", [(4, 70), (2, 42), (1, 28)])
    def test_work_list_counts(self, stage, n):
        items, skipped = basis_work_list(stage, 1)
        assert len(items) == n and skipped == 0
        assert [it.chain_index for it in items] == [k // 14 for k in range(n)]
        labels = [it.spec.label for it in items]
        assert len(set(labels)) == 14

    def test_work_list_without_mask(self):
        items, skipped = basis_work_list(2, 1, have_mask=False)
        assert len(items) == 30 and skipped == 12

    def test_expand_stage1(self, source):
        moving, mask = source
        pairs = expand_basis(moving, 1, mask, seed=4)
        assert len(pairs) == 28
        resp = [p for p in pairs if p.provenance.spec.category is Category.RESPIRATORY]
        assert len(resp) == 8 and all(p.lung_mask is not None for p in resp)
        assert all(p.provenance.sigma_n == 5.0 for p in pairs)
        # two chain members, each paired with all 14 basis types
        by_link = {}
        for p in pairs:
            by_link.setdefault(p.provenance.chain_index, []).append(p)
        assert sorted(by_link) == [0, 1] and all(len(v) == 14 for v in by_link.values())
        assert np.array_equal(by_link[0][0].moving.data, moving.data.astype(np.float32))
        assert all(p.moving is by_link[1][0].moving for p in by_link[1])
        assert not np.array_equal(by_link[0][0].moving.data, by_link[1][0].moving.data)

    def test_expand_without_mask_warns(self, source):
        moving, _ = source
        with pytest.warns(UserWarning, match="skipped 12"):
            pairs = expand_basis(moving, 2, None, seed=1)
        assert len(pairs) == 30

    def test_workers_do_not_change_output(self, source):
        moving, mask = source
        a = expand_basis(moving, 1, mask, seed=6)
        b = expand_basis(moving, 1, mask, seed=6, workers=4)
        assert all(x.fixed.data.tobytes() == y.fixed.data.tobytes() for x, y in zip(a, b))


class TestManifest:
    def test_save_and_regenerate(self, source, tmp_path):
        moving, mask = source
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            pairs = expand_basis(moving, 1, mask, seed=7)
        manifest = save_pairs(pairs, tmp_path, extra={"stage": 1})
        doc = json.loads(manifest.read_text())
        assert doc["count"] == 28 and doc["rng"] == "philox4x64-10"
        for k in (0, 6, 9, 27):
            again = regenerate_from_manifest(manifest, k)
            entry = doc["pairs"][k]
            write_image(tmp_path / "again" / "fixed.mhd", again.fixed)
            write_image(tmp_path / "again" / "truth.mhd", again.truth)
            for name in ("fixed", "truth"):
                stored = (tmp_path / entry[name]).with_suffix(".raw").read_bytes()
                assert (tmp_path / "again" / f"{name}.raw").read_bytes() == stored, (k, name)


def pair_with_field(d: np.ndarray) -> TrainingPair:
    f = DisplacementField(d)
    v = Volume(np.zeros(f.dims))
    prov = Provenance("x", 0, default_spec("identity", 1), 0, 0.0)
    return TrainingPair(v, v, f, prov)


class TestPatches:
    def test_identity_stage1(self):
        plan = sample_patches(pair_with_field(np.zeros((20, 20, 20, 3))), 1, count=10, patch_size=9)
        assert plan.bin_counts() == [10, 0]
        assert plan.empty_bins == (1,)

    def test_constant_five(self):
        d = np.zeros((20, 20, 20, 3))
        d[..., 0] = 5.0
        plan = sample_patches(pair_with_field(d), 4, count=9, patch_size=9)
        assert plan.bin_counts() == [0, 9, 0]

    def test_overflow_joins_top_bin(self):
        d = np.zeros((12, 12, 12, 3))
        d[...] = 20.0  # norm 34.6 mm, past the last stage-4 edge
        plan = sample_patches(pair_with_field(d), 4, count=6, patch_size=5)
        assert plan.bin_counts() == [0, 0, 6]

    def test_balanced(self):
        # magnitude ramps 0..19 mm along x, so every stage-4 bin is populated
        d = np.zeros((40, 20, 20, 3))
        d[..., 0] = np.linspace(0, 19.5, 40)[:, None, None]
        pair = pair_with_field(d)
        plan = sample_patches(pair, 4, count=9, patch_size=3, seed=3)
        mags = np.linalg.norm(d[tuple(plan.centers.T)], axis=-1)
        brute = [int(np.sum((mags >= lo) & (mags < hi))) for lo, hi in plan.bins]
        assert brute == [3, 3, 3] == plan.bin_counts()

    def test_centres_keep_patch_inside(self):
        d = np.random.default_rng(0).uniform(0, 5, (30, 25, 20, 3))
        plan = sample_patches(pair_with_field(d), 2, count=20, patch_size=11)
        assert len(plan.centers) == 20
        assert (plan.centers - 5 >= 0).all()
        assert (plan.centers + 5 <= np.array([29, 24, 19])).all()

    def test_short_bin_redistributes(self):
        d = np.zeros((30, 12, 12, 3))
        d[:2, ..., 0] = 5.0  # tiny [1.5, 8) population inside the centre region
        d[2:, ..., 0] = 0.5
        plan = sample_patches(pair_with_field(d), 4, count=12, patch_size=3)
        counts = plan.bin_counts()
        assert sum(counts) == 12 and counts[2] == 0

    def test_errors(self):
        pair = pair_with_field(np.zeros((10, 10, 10, 3)))
        with pytest.raises(ParameterError):
            sample_patches(pair, 1, count=5, patch_size=11)
        with pytest.raises(ParameterError):
            sample_patches(pair, 3)
