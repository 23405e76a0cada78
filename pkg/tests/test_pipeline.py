import logging
import os
import stat
import sys
import textwrap

import numpy as np
import pytest

from conftest import phantom, scalar_trilinear, smooth_random_field
from regsynth.dvf import default_spec, gen_single_frequency
from regsynth.errors import ContractError, ParameterError, ShapeError
from regsynth.metrics import LandmarkSet, tre
from regsynth.pipeline import (
    ExecPredictor,
    IdentityPredictor,
    OraclePredictor,
    TranslationPredictor,
    _shifted,
    compose,
    run_pipeline,
    warp,
)
from regsynth.volume import DisplacementField, Volume


def constant_field(dims, t, spacing=(1.0, 1.0, 1.0)):
    return DisplacementField(np.broadcast_to(np.asarray(t, float), tuple(dims) + (3,)), spacing)


class TestCompose:
    def test_identity_element(self):
        f = smooth_random_field((10, 10, 10), seed=1)
        z = DisplacementField.zeros(f.dims)
        np.testing.assert_allclose(compose(f, z).data, f.data, atol=0)
        np.testing.assert_allclose(compose(z, f).data, f.data, atol=0)

    def test_translations(self):
        out = compose(constant_field((6, 6, 6), (1, 2, 3)), constant_field((6, 6, 6), (4, 5, 6)))
        assert np.array_equal(out.data, np.broadcast_to([5.0, 7.0, 9.0], out.data.shape))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_brute_force(self, seed):
        first = smooth_random_field((16, 16, 16), amplitude=2.5, seed=seed)
        second = smooth_random_field((16, 16, 16), amplitude=3.0, seed=seed + 100)
        out = compose(first, second).data
        for idx in np.ndindex(16, 16, 16):
            p = np.array(idx, dtype=float) + first.data[idx]
            expect = first.data[idx] + scalar_trilinear(second.data, p)
            assert np.max(np.abs(out[idx] - expect)) < 1e-6

    def test_anisotropic_spacing(self):
        first = constant_field((8, 8, 8), (1.0, 0.0, 0.0), spacing=(0.5, 1, 1))
        x = np.arange(8) * 0.5
        sec = np.zeros((8, 8, 8, 3))
        sec[..., 0] = x[:, None, None]
        out = compose(first, DisplacementField(sec, (0.5, 1, 1))).data
        # second(x + 1 mm) = x + 1 inside the grid
        np.testing.assert_allclose(out[:5, :, :, 0], np.broadcast_to(x[:5, None, None] + 2.0, (5, 8, 8)))

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            compose(DisplacementField.zeros((4, 4, 4)), DisplacementField.zeros((4, 4, 5)))


class TestWarp:
    def test_zero_field(self):
        v = Volume(np.random.default_rng(0).standard_normal((7, 8, 9)))
        assert np.array_equal(warp(v, DisplacementField.zeros(v.dims)).data, v.data)

    def test_integer_shift(self):
        v = Volume(np.random.default_rng(1).standard_normal((12, 6, 6)))
        out = warp(v, constant_field(v.dims, (3.0, 0.0, 0.0)))
        np.testing.assert_array_equal(out.data[:-3], v.data[3:])

    def test_mm_shift_with_spacing(self):
        v = Volume(np.random.default_rng(2).standard_normal((12, 6, 6)), spacing=(2.0, 1.0, 1.0))
        out = warp(v, constant_field(v.dims, (4.0, 0.0, 0.0), spacing=(2.0, 1.0, 1.0)))
        np.testing.assert_array_equal(out.data[:-2], v.data[2:])


class TestPredictors:
    def test_translation_recovers_shift(self):
        rng = np.random.default_rng(5)
        moving = Volume(rng.standard_normal((20, 20, 20)), spacing=(4.0, 4.0, 4.0))
        fixed = moving.with_data(_shifted(moving.data, (2, -1, 3)))
        d = TranslationPredictor()(fixed, moving)
        np.testing.assert_array_equal(d.data[0, 0, 0], [8.0, -4.0, 12.0])

    def test_translation_prefers_zero_on_ties(self):
        v = Volume(np.zeros((10, 10, 10)), spacing=(2.0, 2.0, 2.0))
        assert not TranslationPredictor(theta=6.0)(v, v).data.any()

    def test_exec_predictor(self, tmp_path):
        script = tmp_path / "zero.py"
        script.write_text(textwrap.dedent(f"""\
            #!{sys.executable}
            import sys
            from regsynth.io import read_volume, write_field
            from regsynth.volume import DisplacementField
            v = read_volume(sys.argv[1])
            write_field(sys.argv[3], DisplacementField.zeros(v.dims, v.spacing, v.origin))
        """))
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        fixed, _ = phantom((16, 16, 16))
        res = run_pipeline(fixed, fixed, [(4, ExecPredictor(str(script))), (1, ExecPredictor(str(script)))])
        assert not res.total.data.any()

    def test_exec_predictor_failure(self, tmp_path):
        script = tmp_path / "fail.sh"
        script.write_text("#!/bin/sh\necho broken >&2\nexit 3\n")
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        v = Volume(np.zeros((8, 8, 8)))
        with pytest.raises(ContractError, match="status 3"):
            ExecPredictor(str(script))(v, v)
        with pytest.raises(ContractError):
            ExecPredictor(os.fspath(tmp_path / "missing"))(v, v)


class TestRunPipeline:
    def test_identity(self):
        fixed, _ = phantom((16, 16, 16))
        moving = fixed.with_data(fixed.data[::-1])
        res = run_pipeline(fixed, moving, {4: IdentityPredictor(), 2: IdentityPredictor(), 1: IdentityPredictor()})
        assert not res.total.data.any()
        assert np.array_equal(res.warped_moving.data, moving.data)
        assert list(res.per_stage) == [4, 2, 1]

    def test_trailing_identity_matches_two_stage(self):
        moving, _ = phantom((32, 32, 32))
        truth = gen_single_frequency(default_spec("single", 4, "low", seed=2), moving.dims)
        fixed = warp(moving, truth)
        oracle = OraclePredictor(truth)
        two = run_pipeline(fixed, moving, [(4, oracle), (2, oracle)])
        oracle = OraclePredictor(truth)
        three = run_pipeline(fixed, moving, [(4, oracle), (2, oracle), (1, IdentityPredictor())])
        np.testing.assert_array_equal(two.total.data, three.total.data)

    def test_oracle_closes_loop(self):
        moving, _ = phantom((48, 48, 48))
        truth = gen_single_frequency(default_spec("single", 4, "highest", seed=6), moving.dims)
        fixed = warp(moving, truth)
        oracle = OraclePredictor(truth)
        res = run_pipeline(fixed, moving, [(4, oracle), (2, oracle), (1, oracle)])
        pts = np.stack(np.meshgrid(*[np.linspace(6, 41, 4)] * 3, indexing="ij"), -1).reshape(-1, 3)
        lm = LandmarkSet(pts, pts + tre_points(truth, pts))
        assert tre(lm, res.total).mean < 0.5
        np.testing.assert_allclose(res.refold().data, res.total.data, atol=1e-12)

    def test_stage_outputs_on_stage_grid(self):
        fixed, _ = phantom((32, 32, 32))
        res = run_pipeline(fixed, fixed, [(2, IdentityPredictor()), (4, IdentityPredictor())])
        assert res.stage_outputs[4].dims == (8, 8, 8)
        assert res.stage_outputs[2].spacing == (2.0, 2.0, 2.0)
        assert set(res.timings) == {4, 2}

    def test_wrong_grid_is_contract_error(self):
        fixed, _ = phantom((16, 16, 16))

        def bad(f, m):
            return DisplacementField.zeros((3, 3, 3))

        with pytest.raises(ContractError, match="stage 4"):
            run_pipeline(fixed, fixed, {4: bad})
        with pytest.raises(ContractError):
            run_pipeline(fixed, fixed, {1: lambda f, m: np.zeros(f.dims + (3,))})

    def test_large_output_warns(self, caplog):
        fixed, _ = phantom((16, 16, 16))

        def huge(f, m):
            return constant_field(f.dims, (100.0, 0.0, 0.0), f.spacing)

        with caplog.at_level(logging.WARNING, logger="regsynth.pipeline"):
            run_pipeline(fixed, fixed, {1: huge})
        assert "capture range" in caplog.text

    def test_bad_stage_lists(self):
        v = Volume(np.zeros((16, 16, 16)))
        with pytest.raises(ParameterError):
            run_pipeline(v, v, {})
        with pytest.raises(ParameterError):
            run_pipeline(v, v, {3: IdentityPredictor()})
        with pytest.raises(ParameterError):
            run_pipeline(v, v, [(4, IdentityPredictor()), (4, IdentityPredictor())])


def tre_points(truth: DisplacementField, pts: np.ndarray) -> np.ndarray:
    """Truth displacement at landmark points via cubic spline interpolation (independent of trilinear)."""
    from scipy.ndimage import map_coordinates

    idx = truth.to_index(pts).T
    return np.stack([map_coordinates(truth.data[..., c], idx, order=3, mode="nearest") for c in range(3)], -1)
