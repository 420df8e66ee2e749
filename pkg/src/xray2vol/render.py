"""Iso-surface ray casting with hemisphere ambient light, AO and slight specular.

Renders are the canonical way volumes are compared visually and feed the
image metric; the same machinery produces novel views, cut-aways and
anaglyph stereo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as _PILImage

from .projector import _cube_span, _pixel_ray_origins
from .volume import Volume, ViewPose, sample_trilinear, view_frame

_BISECTION_STEPS = 8

# shading mix: soft ambient dome + headlight-ish diffuse + slight specular
_AMBIENT_WEIGHT = 0.45
_DIFFUSE_WEIGHT = 0.50
_SPECULAR_WEIGHT = 0.08
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class RenderConfig:
    iso_value: float = 0.1
    pose: ViewPose = field(default_factory=lambda: ViewPose.from_direction((0, 0, 1)))
    resolution: tuple[int, int] = (256, 256)
    ao_samples: int = 16
    ao_radius: float = 0.1                      # fraction of the cube edge
    specular_exponent: float = 32.0
    env_light: tuple[float, float, float] = (1.0, 0.7, 0.35)  # sky, horizon, ground
    clip_box: tuple[float, float, float, float, float, float] | None = None
    eye_separation_deg: float = 4.0

    def __post_init__(self):
        if not (0.0 < self.iso_value < 1.0):
            raise ValueError(f"iso_value must be in (0,1), got {self.iso_value}")
        if self.ao_samples < 0:
            raise ValueError(f"ao_samples must be >= 0, got {self.ao_samples}")
        if self.clip_box is not None and len(self.clip_box) != 6:
            raise ValueError("clip_box must be (x0,y0,z0,x1,y1,z1)")


def _density(v: Volume, pts: np.ndarray, clip_box) -> np.ndarray:
    rho = sample_trilinear(v.data, pts)
    if clip_box is not None:
        x0, y0, z0, x1, y1, z1 = clip_box
        inside = ((pts[..., 0] >= x0) & (pts[..., 0] <= x1)
                  & (pts[..., 1] >= y0) & (pts[..., 1] <= y1)
                  & (pts[..., 2] >= z0) & (pts[..., 2] <= z1))
        rho = np.where(inside, 0.0, rho)
    return rho


def _cosine_hemisphere_dirs(n: int) -> np.ndarray:
    """Deterministic cosine-weighted directions (golden-ratio spiral), local frame."""
    i = np.arange(n) + 0.5
    r = np.sqrt(i / n)
    theta = 2.0 * math.pi * ((i * _GOLDEN) % 1.0)
    x = r * np.cos(theta)
    y = r * np.sin(theta)
    z = np.sqrt(np.maximum(0.0, 1.0 - r * r))
    return np.stack([x, y, z], axis=-1)


def _ambient(normals: np.ndarray, env: tuple[float, float, float]) -> np.ndarray:
    """3-coefficient hemisphere dome around world +z (quadratic blend)."""
    sky, horizon, ground = env
    t = 0.5 * (normals[:, 2] + 1.0)
    return sky * t * t + horizon * 2.0 * t * (1.0 - t) + ground * (1.0 - t) ** 2


def render_iso(v: Volume, cfg: RenderConfig) -> np.ndarray:
    """Orthographic iso-surface render, returns (h, w) floats in [0, 1].

    Rays march the unit-cube chord at step 1/(2 nz) from the camera side
    (the camera sits on the +direction side); the first crossing of
    iso_value is refined by bisection, shaded by an ambient dome scaled
    with ambient occlusion, a diffuse term and slight specular highlight.
    Pixels whose rays never reach the iso value are exact background 0.
    """
    w_px, h_px = cfg.resolution
    frame = view_frame(cfg.pose)
    ray_dir = -frame[:, 2]
    origins = _pixel_ray_origins(frame, w_px, h_px).reshape(-1, 3)
    t0, t1 = _cube_span(origins, ray_dir)
    step = 1.0 / (2.0 * v.nz)

    n_rays = origins.shape[0]
    hit_t = np.full(n_rays, np.nan)
    active = t1 > t0
    t_prev = t0.copy()
    rho_prev = _density(v, origins + ray_dir * t0[:, None], cfg.clip_box)
    # entering the cube already above the iso level counts as a boundary hit
    entry_hit = active & (rho_prev >= cfg.iso_value)
    hit_t[entry_hit] = t0[entry_hit]
    active &= ~entry_hit

    t_cur = t_prev.copy()
    while np.any(active):
        t_cur = np.minimum(t_cur + step, t1)
        idx = np.flatnonzero(active)
        pts = origins[idx] + ray_dir * t_cur[idx, None]
        rho = _density(v, pts, cfg.clip_box)
        crossed = rho >= cfg.iso_value
        ci = idx[crossed]
        if ci.size:
            # bisection refinement between the bracketing samples
            lo = t_prev[ci]
            hi = t_cur[ci]
            for _ in range(_BISECTION_STEPS):
                mid = 0.5 * (lo + hi)
                rho_mid = _density(v, origins[ci] + ray_dir * mid[:, None],
                                   cfg.clip_box)
                above = rho_mid >= cfg.iso_value
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)
            hit_t[ci] = hi
        t_prev[idx] = t_cur[idx]
        active[idx[crossed]] = False
        active &= t_cur < t1

    img = np.zeros(n_rays)
    hits = np.flatnonzero(np.isfinite(hit_t))
    if hits.size:
        p_hit = origins[hits] + ray_dir * hit_t[hits, None]
        img[hits] = _shade(v, cfg, p_hit, ray_dir)
    return np.clip(img.reshape(h_px, w_px), 0.0, 1.0)


def _shade(v: Volume, cfg: RenderConfig, p_hit: np.ndarray,
           ray_dir: np.ndarray) -> np.ndarray:
    h = 1.0 / max(v.dims)
    grad = np.stack([
        _density(v, p_hit + off, cfg.clip_box) - _density(v, p_hit - off, cfg.clip_box)
        for off in (np.array([h, 0, 0]), np.array([0, h, 0]), np.array([0, 0, h]))
    ], axis=-1) / (2.0 * h)
    norm = np.linalg.norm(grad, axis=-1)
    normals = np.where(norm[:, None] > 1e-12, -grad / np.maximum(norm, 1e-12)[:, None],
                       -ray_dir)
    # keep normals camera-facing (two-sided surface)
    flip = (normals @ ray_dir) > 0.0
    normals[flip] = -normals[flip]

    ao = np.ones(p_hit.shape[0])
    if cfg.ao_samples > 0:
        ao = _ambient_occlusion(v, cfg, p_hit, normals)

    to_eye = -ray_dir
    light = to_eye + np.array([0.0, 0.0, 0.5])   # headlight tilted toward world up
    light = light / np.linalg.norm(light)
    half = to_eye + light
    half = half / np.linalg.norm(half)
    diffuse = np.maximum(normals @ light, 0.0)
    specular = np.maximum(normals @ half, 0.0) ** cfg.specular_exponent
    return (_AMBIENT_WEIGHT * _ambient(normals, cfg.env_light) * ao
            + _DIFFUSE_WEIGHT * diffuse
            + _SPECULAR_WEIGHT * specular)


def _ambient_occlusion(v: Volume, cfg: RenderConfig, p_hit: np.ndarray,
                       normals: np.ndarray) -> np.ndarray:
    """Fraction of cosine-weighted short rays that stay below the iso level."""
    n_pts = p_hit.shape[0]
    local = _cosine_hemisphere_dirs(cfg.ao_samples)
    # tangent frame per hit point
    ref = np.where(np.abs(normals[:, 2:3]) < 0.9,
                   np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(ref, normals)
    t1 /= np.maximum(np.linalg.norm(t1, axis=-1, keepdims=True), 1e-12)
    t2 = np.cross(normals, t1)
    dirs = (local[None, :, 0, None] * t1[:, None]
            + local[None, :, 1, None] * t2[:, None]
            + local[None, :, 2, None] * normals[:, None])   # (n_pts, S, 3)

    eps = 0.75 / max(v.dims)
    base = p_hit + eps * normals
    occluded = np.zeros((n_pts, cfg.ao_samples), dtype=bool)
    n_steps = 4
    for k in range(1, n_steps + 1):
        d = cfg.ao_radius * k / n_steps
        rho = _density(v, base[:, None, :] + dirs * d, cfg.clip_box)
        occluded |= rho >= cfg.iso_value
    return 1.0 - occluded.mean(axis=1)


def _rotate_about(vec: np.ndarray, axis: np.ndarray, angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return (vec * c + np.cross(axis, vec) * s + axis * (axis @ vec) * (1.0 - c))


def render_stereo(v: Volume, cfg: RenderConfig) -> np.ndarray:
    """Anaglyph render (h, w, 3): left eye in red, right eye in green+blue.

    Eyes are the view rotated by +-eye_separation/2 about the view's
    vertical axis.
    """
    frame = view_frame(cfg.pose)
    vert = frame[:, 1]
    half = math.radians(cfg.eye_separation_deg) / 2.0
    out = None
    for sign, channels in ((+1.0, [0]), (-1.0, [1, 2])):
        d = _rotate_about(cfg.pose.direction, vert, sign * half)
        eye_pose = ViewPose(direction=d / np.linalg.norm(d),
                            up_hint=cfg.pose.up_hint.copy(),
                            mirrored=cfg.pose.mirrored)
        eye_cfg = RenderConfig(**{**cfg.__dict__, "pose": eye_pose})
        img = render_iso(v, eye_cfg)
        if out is None:
            out = np.zeros(img.shape + (3,))
        for c in channels:
            out[:, :, c] = img
    return out


def render_cutaway(v: Volume, cfg: RenderConfig) -> np.ndarray:
    """Iso render with the clip box region treated as empty space."""
    return render_iso(v, cfg)


def save_png(img: np.ndarray, path) -> None:
    """8-bit PNG export; grayscale for 2D arrays, RGB for (h, w, 3)."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if q.ndim == 2 else "RGB"
    _PILImage.fromarray(q, mode=mode).save(path)
