import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xray2vol.dataset import generate_phantom
from xray2vol.fusion import FusionConfig, fuse_ray, fuse_volume
from xray2vol.projector import ProjectorConfig, XRayImage, project, ray_transparency
from xray2vol.volume import ViewPose, Volume

AXIS = ViewPose.from_direction((0, 0, 1))


def unit_cfg(**kw):
    base = dict(beta=2.0, policy="proportional", error_mode="exact",
                chi=1.0, step_length=1.0)
    base.update(kw)
    return FusionConfig(**base)


class TestFuseRay:
    def test_no_error_is_identity_for_every_policy(self):
        mu = [0.5, 0.25, 0.0]
        target = 1.0 - math.exp(-0.75)
        for policy in ("proportional", "uniform", "first_slice"):
            out, fb = fuse_ray(mu, target, unit_cfg(policy=policy))
            assert not fb
            np.testing.assert_allclose(out, mu, atol=1e-12)

    def test_two_slice_proportional_hand_value(self):
        # mu=(3,1), beta=2 -> weights (0.9, 0.1); target line density 5
        # means delta=-1, so the correction adds (0.9, 0.1)
        out, fb = fuse_ray([3.0, 1.0], 1.0 - math.exp(-5.0), unit_cfg())
        assert not fb
        np.testing.assert_allclose(out, [3.9, 1.1], atol=1e-9)
        assert ray_transparency(out, 1.0, 1.0) == pytest.approx(math.exp(-5.0),
                                                                abs=1e-9)

    def test_zero_slice_gets_nothing_proportional(self):
        out, fb = fuse_ray([0.0, 2.0], 1.0 - math.exp(-3.0), unit_cfg())
        assert not fb
        assert out[0] == 0.0
        assert out[1] == pytest.approx(3.0, abs=1e-9)

    def test_all_zero_column_falls_back_to_uniform(self):
        out, fb = fuse_ray([0.0, 0.0, 0.0, 0.0], 0.5, unit_cfg())
        assert fb
        assert np.allclose(out, out[0])
        assert ray_transparency(out, 1.0, 1.0) == pytest.approx(0.5, abs=1e-9)

    def test_all_zero_column_zero_target_no_flag(self):
        out, fb = fuse_ray([0.0, 0.0], 0.0, unit_cfg())
        assert not fb
        np.testing.assert_array_equal(out, 0.0)

    def test_first_slice_takes_whole_correction(self):
        out, _ = fuse_ray([1.0, 1.0], 1.0 - math.exp(-3.0), unit_cfg(policy="first_slice"))
        np.testing.assert_allclose(out, [2.0, 1.0], atol=1e-9)

    def test_clamped_removal_still_recomposes(self):
        # removing 1.8 with beta=2 weights would drive slice 2 negative;
        # clamping plus rescale keeps the sum exact
        cfg = unit_cfg()
        mu = [2.0, 0.1]
        target_s = 0.3
        out, _ = fuse_ray(mu, 1.0 - math.exp(-target_s), cfg)
        assert out.min() >= 0.0
        assert ray_transparency(out, 1.0, 1.0) == pytest.approx(
            math.exp(-target_s), abs=1e-9)

    def test_uniform_policy_spreads_evenly(self):
        out, _ = fuse_ray([1.0, 1.0, 1.0, 1.0], 1.0 - math.exp(-6.0),
                          unit_cfg(policy="uniform"))
        np.testing.assert_allclose(out, 1.5, atol=1e-9)

    @given(st.lists(st.floats(0.0, 2.0), min_size=2, max_size=12),
           st.floats(0.0, 0.999),
           st.sampled_from(["proportional", "uniform", "first_slice"]))
    @settings(max_examples=60)
    def test_recomposition_exact_for_any_input(self, mu, target, policy):
        out, _ = fuse_ray(mu, target, unit_cfg(policy=policy, step_length=0.25))
        assert out.min() >= 0.0
        alpha = ray_transparency(out, 1.0, 0.25)
        assert abs((1.0 - alpha) - target) < 1e-6

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            fuse_ray([-0.1, 0.5], 0.5, unit_cfg())

    def test_opacity_one_rejected(self):
        with pytest.raises(ValueError, match="\\[0, 1\\)"):
            fuse_ray([0.5], 1.0, unit_cfg())

    def test_bad_policy_rejected(self):
        with pytest.raises(ValueError, match="policy"):
            FusionConfig(policy="middle_slice")


class TestFuseVolume:
    def test_projection_of_itself_is_identity(self):
        coarse = generate_phantom(5, (16, 16, 16))
        img = project(coarse, AXIS,
                      ProjectorConfig(chi=10, n_steps=16, resolution=(16, 16)))
        fused = fuse_volume(coarse, img, FusionConfig(chi=10.0))
        assert np.abs(fused.data - coarse.data).max() < 1e-6

    def test_recomposition_matches_input_image(self):
        cfg = FusionConfig(chi=10.0)
        worst = 0.0
        for seed in range(6):
            coarse = generate_phantom(seed, (16, 16, 16))
            other = generate_phantom(seed + 100, (32, 32, 32))
            img = project(other, AXIS,
                          ProjectorConfig(chi=10, n_steps=32, resolution=(32, 32)))
            fused = fuse_volume(coarse, img, cfg)
            re = project(fused, AXIS,
                         ProjectorConfig(chi=10, n_steps=fused.nz,
                                         resolution=img.dims))
            worst = max(worst, np.abs(re.data.astype(np.float64)
                                      - img.data.astype(np.float64)).max())
        assert worst < 1e-6

    def test_zero_coarse_voxels_stay_zero(self):
        coarse = generate_phantom(9, (16, 16, 16))
        other = generate_phantom(109, (32, 32, 32))
        img = project(other, AXIS,
                      ProjectorConfig(chi=10, n_steps=32, resolution=(16, 16)))
        fused = fuse_volume(coarse, img, FusionConfig(chi=10.0))
        # at matching x/y resolution the sampled column is the voxel column
        zero_before = coarse.data == 0.0
        columns_all_zero = zero_before.all(axis=0)   # fallback pixels excluded
        check = zero_before & ~columns_all_zero[None, :, :]
        assert np.all(fused.data[check] == 0.0)

    def test_output_shape_contract(self):
        coarse = generate_phantom(2, (16, 16, 16))
        img = XRayImage(np.full((64, 64), 0.2, np.float32))
        fused = fuse_volume(coarse, img, FusionConfig(chi=10.0))
        assert fused.dims == (64, 64, 16)

    def test_smaller_image_rejected(self):
        coarse = generate_phantom(2, (16, 16, 16))
        img = XRayImage(np.zeros((8, 8), np.float32))
        with pytest.raises(ValueError, match="at least"):
            fuse_volume(coarse, img, FusionConfig())

    def test_literal_error_mode_misses_recomposition(self):
        # the published error term omits the chi*step factor, so with
        # chi*step far from 1 its recomposition is visibly off
        coarse = generate_phantom(3, (16, 16, 16))
        other = generate_phantom(300, (32, 32, 32))
        img = project(other, AXIS,
                      ProjectorConfig(chi=10, n_steps=32, resolution=(16, 16)))
        fused = fuse_volume(coarse, img,
                            FusionConfig(chi=10.0, error_mode="paper_literal"))
        re = project(fused, AXIS,
                     ProjectorConfig(chi=10, n_steps=16, resolution=(16, 16)))
        err = np.abs(re.data.astype(np.float64) - img.data.astype(np.float64)).max()
        assert err > 1e-4

    def test_first_slice_also_recomposes_exactly(self):
        coarse = generate_phantom(4, (16, 16, 16))
        other = generate_phantom(140, (32, 32, 32))
        img = project(other, AXIS,
                      ProjectorConfig(chi=10, n_steps=32, resolution=(16, 16)))
        fused = fuse_volume(coarse, img,
                            FusionConfig(chi=10.0, policy="first_slice"))
        re = project(fused, AXIS,
                     ProjectorConfig(chi=10, n_steps=16, resolution=(16, 16)))
        assert np.abs(re.data.astype(np.float64)
                      - img.data.astype(np.float64)).max() < 1e-6

    def test_fused_densities_may_exceed_one(self):
        # a nearly-empty coarse guess against an opaque pixel needs more
        # density than the [0,1] phantom range; fusion must not clip it
        coarse = Volume(np.full((4, 4, 4), 0.01, np.float32))
        img = XRayImage(np.full((4, 4), 0.99, np.float32))
        fused = fuse_volume(coarse, img, FusionConfig(chi=1.0))
        assert fused.data.max() > 1.0
        re = project(fused, AXIS,
                     ProjectorConfig(chi=1.0, n_steps=4, resolution=(4, 4)))
        assert np.abs(re.data.astype(np.float64) - 0.99).max() < 1e-6
