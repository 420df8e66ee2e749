"""Fuse a coarse volume with a full-resolution x-ray so re-projection is exact.

For every output pixel the coarse volume's density column is corrected by
the ray's transparency error, distributed across slices by a policy; in
'exact' mode the corrected column composes back to the input pixel value
bit-for-bit up to float rounding. Fused densities are physical (>= 0) but
may exceed 1 where the coarse volume badly underestimates a ray.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .projector import XRayImage
from .volume import Volume, _linear_weights

log = logging.getLogger(__name__)

POLICIES = ("proportional", "uniform", "first_slice")
ERROR_MODES = ("exact", "paper_literal")


@dataclass
class FusionConfig:
    beta: float = 2.0                 # sharpness: weight denser slices more
    policy: str = "proportional"
    error_mode: str = "exact"
    chi: float = 10.0                 # must match the projector that made the image
    step_length: float | None = None  # default: 1 / (slice count)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.error_mode not in ERROR_MODES:
            raise ValueError(
                f"error_mode must be one of {ERROR_MODES}, got {self.error_mode!r}")
        if not (self.beta >= 0.0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not (self.chi > 0.0 and np.isfinite(self.chi)):
            raise ValueError(f"chi must be positive, got {self.chi}")


def _fuse_columns(mu: np.ndarray, target_opacity: np.ndarray,
                  cfg: FusionConfig, dt: float):
    """Vectorized core: (P, n) coarse columns + (P,) opacities -> fused columns.

    Returns (mu_hat float64, fallback mask). The corrected column always
    sums to the target line density: negative slices are clamped to zero
    and the remaining positive slices rescaled, which preserves exact
    recomposition and never revives an exactly-zero slice.
    """
    mu = np.asarray(mu, dtype=np.float64)
    target = np.asarray(target_opacity, dtype=np.float64)
    if np.any(mu < 0.0):
        raise ValueError("coarse densities must be non-negative")
    if np.any(target < 0.0) or np.any(target >= 1.0):
        raise ValueError("target opacity must lie in [0, 1)")
    p, n = mu.shape
    s_bar = mu.sum(axis=1)
    alpha_bar = np.exp(-cfg.chi * dt * s_bar)
    alpha_t = 1.0 - target

    if cfg.error_mode == "exact":
        delta = s_bar + np.log(alpha_t) / (cfg.chi * dt)
    else:
        # published form: density error = log(1 - (alpha_bar - alpha_t)),
        # which omits the chi * step factor of the transparency model
        delta = np.log1p(alpha_t - alpha_bar)

    # a column whose own composition already reproduces the stored pixel
    # (same float32 value, same rounding path as the projector) needs no
    # correction at all
    delta[(1.0 - alpha_bar).astype(np.float32) == target.astype(np.float32)] = 0.0
    s_t = s_bar - delta

    fallback = np.zeros(p, dtype=bool)
    if cfg.policy == "proportional":
        w = np.power(mu, cfg.beta)
        sw = w.sum(axis=1)
        fallback = (sw == 0.0) & (delta != 0.0)
        if np.any(fallback):
            w[fallback] = 1.0
            sw[fallback] = n
        safe = np.where(sw == 0.0, 1.0, sw)
        w /= safe[:, None]
        w[sw == 0.0] = 1.0 / n
    elif cfg.policy == "uniform":
        w = np.full((p, n), 1.0 / n)
    else:  # first_slice
        w = np.zeros((p, n))
        w[:, 0] = 1.0

    mu_hat = mu - delta[:, None] * w
    clipped = mu_hat < 0.0
    rows = clipped.any(axis=1)
    if np.any(rows):
        pos = np.where(clipped[rows], 0.0, mu_hat[rows])
        s_pos = pos.sum(axis=1)
        s_goal = np.maximum(s_t[rows], 0.0)
        scale = np.divide(s_goal, s_pos, out=np.zeros_like(s_pos),
                          where=s_pos > 0.0)
        mu_hat[rows] = pos * scale[:, None]
    return mu_hat, fallback


def fuse_ray(coarse_densities, target_opacity: float, cfg: FusionConfig):
    """Correct one coarse ray so it composes to target_opacity.

    Returns (fused densities, fell_back) where fell_back reports the
    uniform fallback used when a proportional policy meets an all-zero
    column that needs nonzero density.
    """
    mu = np.asarray(coarse_densities, dtype=np.float64).reshape(1, -1)
    dt = cfg.step_length if cfg.step_length is not None else 1.0 / mu.shape[1]
    if not (dt > 0.0 and np.isfinite(dt)):
        raise ValueError(f"step_length must be positive, got {dt}")
    mu_hat, fb = _fuse_columns(mu, np.array([target_opacity]), cfg, dt)
    return mu_hat[0], bool(fb[0])


def fuse_volume(coarse: Volume, highres_image: XRayImage,
                cfg: FusionConfig | None = None) -> Volume:
    """Per-pixel fusion of a +z-aligned coarse volume with a larger x-ray.

    Output dims are (image w, image h, coarse depth): each pixel's column
    bilinearly samples the coarse volume, then gets the ray correction.
    Re-projecting the result along +z at the image resolution with
    n_steps = coarse depth reproduces the image (exact mode).
    """
    cfg = cfg or FusionConfig()
    w, h = highres_image.dims
    nx, ny, nz = coarse.dims
    if w < nx or h < ny:
        raise ValueError(
            f"image {w}x{h} must be at least the coarse x/y dims {nx}x{ny}")
    dt = cfg.step_length if cfg.step_length is not None else 1.0 / nz
    if not (dt > 0.0 and np.isfinite(dt)):
        raise ValueError(f"step_length must be positive, got {dt}")

    wy = _linear_weights(ny, h)
    wx = _linear_weights(nx, w)
    # (nz, ny, nx) -> (h, w, nz) ray columns at pixel centers
    cols = np.tensordot(wy, coarse.data.astype(np.float64), axes=(1, 1))
    cols = np.tensordot(wx, cols, axes=(1, 2))           # (w, h, nz)
    cols = np.ascontiguousarray(cols.transpose(1, 0, 2))  # (h, w, nz)

    mu_hat, fallback = _fuse_columns(
        cols.reshape(h * w, nz), highres_image.data.ravel(), cfg, dt)
    n_fb = int(fallback.sum())
    if n_fb:
        log.warning("fusion fell back to uniform weights on %d all-zero pixels", n_fb)
    out = np.moveaxis(mu_hat.reshape(h, w, nz), 2, 0)
    return Volume(out.astype(np.float32))
