import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xray2vol.errors import FormatError
from xray2vol.projector import (ProjectorConfig, XRayImage, gamma_decode,
                                gamma_encode, load_image, png_to_image, project,
                                ray_transparency, resample_image, save_image,
                                save_png16)
from xray2vol.volume import Volume, ViewPose


def random_hemisphere_pose(rng):
    d = rng.standard_normal(3)
    d[2] = abs(d[2])
    d /= np.linalg.norm(d)
    return ViewPose.from_direction(d, mirrored=bool(rng.integers(2)))


class TestRayTransparency:
    def test_empty_space_is_fully_transparent(self):
        assert ray_transparency(np.zeros(16), 10.0, 1 / 16) == 1.0

    def test_constant_optical_depth_one(self):
        # 128 samples of 0.1 at chi=10, step 1/128: total depth exactly 1
        a = ray_transparency([0.1] * 128, 10.0, 1.0 / 128)
        assert a == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_two_sample_closed_form(self):
        a = ray_transparency([0.2, 0.3], 1.0, 1.0)
        assert a == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            ray_transparency([0.1, -0.01], 10.0, 1.0)

    def test_bad_chi_and_step_rejected(self):
        with pytest.raises(ValueError):
            ray_transparency([0.1], 0.0, 1.0)
        with pytest.raises(ValueError):
            ray_transparency([0.1], 1.0, 0.0)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=32), st.integers(0, 31))
    def test_monotone_in_density(self, mus, bump_at):
        # adding density never increases transparency
        mus = np.asarray(mus)
        a0 = ray_transparency(mus, 10.0, 0.05)
        mus2 = mus.copy()
        mus2[bump_at % len(mus)] += 0.5
        assert ray_transparency(mus2, 10.0, 0.05) <= a0


class TestProject:
    def test_empty_volume_all_zero(self):
        v = Volume(np.zeros((8, 8, 8), np.float32))
        img = project(v, ViewPose.from_direction((0, 0, 1)),
                      ProjectorConfig(resolution=(16, 16)))
        np.testing.assert_array_equal(img.data, 0.0)

    @pytest.mark.parametrize("n_steps", [1, 16, 128])
    def test_constant_volume_closed_form(self, n_steps):
        v = Volume(np.full((16, 16, 16), 0.05, np.float32))
        cfg = ProjectorConfig(chi=10.0, n_steps=n_steps, resolution=(8, 8))
        img = project(v, ViewPose.from_direction((0, 0, 1)), cfg)
        expected = 1.0 - math.exp(-0.5)
        assert np.abs(img.data - expected).max() <= 1e-5

    def test_direction_symmetry(self, rng):
        from xray2vol.dataset import generate_phantom

        worst = 0.0
        for seed in range(5):
            v = generate_phantom(seed, (16, 16, 16))
            pose = random_hemisphere_pose(rng)
            cfg = ProjectorConfig(resolution=(24, 24), n_steps=32)
            a = project(v, pose, cfg).data.astype(np.float64)
            b = project(v, pose.opposite(), cfg).data.astype(np.float64)
            worst = max(worst, np.abs(a - b).max())
        assert worst < 1e-6

    def test_all_pixels_strictly_below_one(self):
        v = Volume(np.ones((8, 8, 8), np.float32))
        img = project(v, ViewPose.from_direction((0, 0, 1)),
                      ProjectorConfig(chi=500.0, n_steps=8, resolution=(8, 8)))
        assert img.data.max() < 1.0

    def test_negative_volume_rejected(self):
        v = Volume(np.zeros((4, 4, 4), np.float32))
        v.data[0, 0, 0] = -0.5
        with pytest.raises(ValueError, match="non-negative"):
            project(v, ViewPose.from_direction((0, 0, 1)), ProjectorConfig())


class TestGamma:
    def test_gamma_one_is_identity(self, rng):
        img = XRayImage(rng.random((8, 8), dtype=np.float32))
        np.testing.assert_array_equal(gamma_decode(img, 1.0).data, img.data)

    def test_endpoints_fixed(self):
        img = XRayImage(np.array([[0.0, 1.0]], np.float32))
        for g in (0.5, 2.2, 4.0):
            np.testing.assert_array_equal(gamma_decode(img, g).data, img.data)
            np.testing.assert_array_equal(gamma_encode(img, g).data, img.data)

    @given(st.floats(0.2, 5.0))
    def test_encode_decode_roundtrip(self, gamma):
        r = np.random.default_rng(0)
        img = XRayImage(r.random((6, 6), dtype=np.float32))
        back = gamma_decode(gamma_encode(img, gamma), gamma)
        assert np.abs(back.data - img.data).max() < 1e-6

    def test_nonpositive_gamma_rejected(self):
        img = XRayImage(np.zeros((2, 2), np.float32))
        with pytest.raises(ValueError):
            gamma_decode(img, 0.0)
        with pytest.raises(ValueError):
            gamma_encode(img, -1.0)


class TestImageFile:
    def test_bitwise_roundtrip(self, rng, tmp_path):
        img = XRayImage((rng.random((5, 9), dtype=np.float32) * 0.99))
        save_image(img, tmp_path / "i.ximg")
        img2 = load_image(tmp_path / "i.ximg")
        assert np.array_equal(img2.data, img.data)
        assert img2.dims == img.dims

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ximg"
        p.write_bytes(b"JUNK" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_image(p)

    def test_truncation(self, tmp_path, rng):
        img = XRayImage(rng.random((4, 4), dtype=np.float32) * 0.9)
        p = tmp_path / "t.ximg"
        save_image(img, p)
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(FormatError, match="truncated"):
            load_image(p)

    def test_png_export_and_ingest(self, tmp_path, rng):
        img = XRayImage(rng.random((12, 12), dtype=np.float32) * 0.9)
        save_png16(img, tmp_path / "i.png")
        back = png_to_image(tmp_path / "i.png", gamma=1.0)
        # png is quantized to 16 bits, not exact
        assert np.abs(back.data - img.data).max() < 1.0 / 65535 + 1e-6


class TestResampleImage:
    def test_identity_at_same_size(self, rng):
        img = XRayImage(rng.random((16, 16), dtype=np.float32) * 0.9)
        out = resample_image(img, (16, 16))
        np.testing.assert_array_equal(out.data, img.data)

    def test_constant_preserved(self):
        img = XRayImage(np.full((32, 32), 0.25, np.float32))
        out = resample_image(img, (8, 8))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-6)
