import math

import numpy as np
import pytest

from xray2vol.dataset import generate_phantom
from xray2vol.render import (RenderConfig, render_cutaway, render_iso,
                             render_stereo, save_png)
from xray2vol.volume import Volume, ViewPose


def solid_sphere(n, radius, center=(0.5, 0.5, 0.5)):
    z, y, x = np.indices((n, n, n))
    pts = (np.stack([x, y, z], -1) + 0.5) / n
    return Volume((np.linalg.norm(pts - np.asarray(center), axis=-1)
                   < radius).astype(np.float32))


class TestRenderIso:
    def test_empty_volume_is_pure_background(self):
        img = render_iso(Volume(np.zeros((8, 8, 8), np.float32)),
                         RenderConfig(resolution=(32, 32)))
        np.testing.assert_array_equal(img, 0.0)

    def test_sphere_silhouette_radius(self):
        vol = solid_sphere(64, 0.3)
        img = render_iso(vol, RenderConfig(resolution=(96, 96), ao_samples=0))
        measured = math.sqrt((img > 0).sum() / math.pi)
        assert abs(measured - 0.3 * 96) <= 1.0

    def test_silhouette_grows_as_iso_drops(self):
        vol = Volume(generate_phantom(8, (24, 24, 24)).data)
        lower = render_iso(vol, RenderConfig(iso_value=0.05, resolution=(48, 48),
                                             ao_samples=0))
        higher = render_iso(vol, RenderConfig(iso_value=0.5, resolution=(48, 48),
                                              ao_samples=0))
        assert ((higher > 0) & ~(lower > 0)).sum() == 0

    def test_deterministic(self):
        vol = generate_phantom(4, (16, 16, 16))
        cfg = RenderConfig(resolution=(32, 32), ao_samples=8)
        a = render_iso(vol, cfg)
        b = render_iso(vol, cfg)
        assert np.array_equal(a, b)

    def test_flat_region_unchanged_by_ao(self):
        slab = np.zeros((32, 32, 32), np.float32)
        slab[:16] = 0.8
        v = Volume(slab)
        with_ao = render_iso(v, RenderConfig(resolution=(32, 32), ao_samples=16))
        without = render_iso(v, RenderConfig(resolution=(32, 32), ao_samples=0))
        c = slice(8, 24)
        rel = np.abs(with_ao[c, c] - without[c, c]) / without[c, c]
        assert rel.max() <= 0.02

    def test_concave_corner_darkens_with_ao(self):
        geo = np.zeros((32, 32, 32), np.float32)
        geo[:16, :, :] = 0.8    # floor
        geo[:, :, :10] = 0.8    # wall
        v = Volume(geo)
        with_ao = render_iso(v, RenderConfig(resolution=(64, 64), ao_samples=32))
        without = render_iso(v, RenderConfig(resolution=(64, 64), ao_samples=0))
        ratio = with_ao / np.maximum(without, 1e-9)
        near_corner = ratio[16:48, 21:25].mean()
        far_field = ratio[16:48, 45:58].mean()
        assert near_corner < far_field - 0.01

    def test_bad_iso_rejected(self):
        with pytest.raises(ValueError, match="iso"):
            RenderConfig(iso_value=0.0)


class TestStereo:
    def test_zero_separation_channels_identical(self):
        vol = solid_sphere(32, 0.25)
        st = render_stereo(vol, RenderConfig(resolution=(48, 48),
                                             eye_separation_deg=0.0))
        np.testing.assert_array_equal(st[:, :, 0], st[:, :, 1])
        np.testing.assert_array_equal(st[:, :, 1], st[:, :, 2])

    def test_left_channel_is_standalone_render(self):
        from xray2vol.render import _rotate_about
        from xray2vol.volume import view_frame

        vol = solid_sphere(32, 0.25)
        cfg = RenderConfig(resolution=(48, 48), eye_separation_deg=6.0)
        st = render_stereo(vol, cfg)
        frame = view_frame(cfg.pose)
        d = _rotate_about(cfg.pose.direction, frame[:, 1],
                          math.radians(6.0) / 2.0)
        left_pose = ViewPose(direction=d / np.linalg.norm(d),
                             up_hint=cfg.pose.up_hint.copy())
        left = render_iso(vol, RenderConfig(resolution=(48, 48),
                                            pose=left_pose))
        assert np.abs(st[:, :, 0] - left).max() < 1e-6

    def test_disparity_tracks_depth_offset(self):
        # sphere pushed 0.2 toward the camera: silhouette centroids of the
        # two eyes separate by about sin(separation) * offset
        vol = solid_sphere(48, 0.15, center=(0.5, 0.5, 0.7))
        sep = 10.0
        st = render_stereo(vol, RenderConfig(resolution=(96, 96),
                                             eye_separation_deg=sep,
                                             ao_samples=0))

        def centroid_x(ch):
            _, xs = np.nonzero(ch > 0)
            return xs.mean()

        disparity = abs(centroid_x(st[:, :, 0]) - centroid_x(st[:, :, 1]))
        expected = math.sin(math.radians(sep)) * 0.2 * 96
        assert abs(disparity - expected) <= 1.0


class TestCutaway:
    def test_no_box_equals_plain_render(self):
        vol = solid_sphere(32, 0.3)
        a = render_iso(vol, RenderConfig(resolution=(48, 48)))
        b = render_cutaway(vol, RenderConfig(resolution=(48, 48)))
        np.testing.assert_array_equal(a, b)

    def test_full_cube_box_gives_background(self):
        vol = solid_sphere(32, 0.3)
        img = render_cutaway(vol, RenderConfig(resolution=(32, 32),
                                               clip_box=(0, 0, 0, 1, 1, 1)))
        np.testing.assert_array_equal(img, 0.0)

    def test_cut_shell_exposes_far_wall_at_expected_depth(self):
        # hollow spherical shell, cut away the +x half; rays that used to
        # hit the near wall now continue to the far interior wall
        n = 64
        z, y, x = np.indices((n, n, n))
        pts = (np.stack([x, y, z], -1) + 0.5) / n
        r = np.linalg.norm(pts - 0.5, axis=-1)
        shell = ((r > 0.22) & (r < 0.32)).astype(np.float32)
        vol = Volume(shell)
        # view along +x so the cut plane faces the camera
        pose = ViewPose.from_direction((1, 0, 0))
        cfg = RenderConfig(resolution=(64, 64), pose=pose, ao_samples=0,
                           clip_box=(0.5, 0.0, 0.0, 1.0, 1.0, 1.0))
        img = render_cutaway(vol, cfg)
        plain = render_iso(vol, RenderConfig(resolution=(64, 64), pose=pose,
                                             ao_samples=0))
        # the silhouette is unchanged in outline but the center now shows
        # the interior: the central pixel must still hit (the far shell)
        assert img[32, 32] > 0.0
        assert plain[32, 32] > 0.0
        # central region brightness differs because the surface moved
        assert np.abs(img - plain).max() > 0.05


class TestSavePng:
    def test_gray_and_rgb(self, tmp_path):
        from PIL import Image

        save_png(np.linspace(0, 1, 64).reshape(8, 8), tmp_path / "g.png")
        save_png(np.zeros((8, 8, 3)), tmp_path / "c.png")
        assert Image.open(tmp_path / "g.png").size == (8, 8)
        assert Image.open(tmp_path / "c.png").mode == "RGB"
