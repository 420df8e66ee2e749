"""Forward x-ray synthesis: Beer-Lambert absorption along orthographic rays.

Pixel values are opacities 1 - alpha in [0,1), where alpha is the fraction
of radiation that survives the medium. Images are linear; gamma encode /
decode exists only to ingest display-encoded scans.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .errors import FormatError
from .volume import Volume, ViewPose, _axis_weights, sample_trilinear, view_frame

IMAGE_MAGIC = b"XIMG"
IMAGE_VERSION = 1
_MAX_PIXELS = 2**31

# largest float32 strictly below 1; opacities must stay under 1
_OPACITY_CEIL = np.nextafter(np.float32(1.0), np.float32(0.0))


@dataclass
class XRayImage:
    """2D opacity image. data: (h, w) float32, row-major, linear units."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int]:
        """(w, h)"""
        h, w = self.data.shape
        return w, h

    def validate(self) -> "XRayImage":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite pixels")
        if self.data.min() < 0.0 or self.data.max() >= 1.0:
            raise ValueError("opacity values must lie in [0, 1)")
        return self


@dataclass
class ProjectorConfig:
    chi: float = 10.0            # extinction coefficient (absorption + out-scattering)
    n_steps: int = 128           # quadrature samples per ray
    resolution: tuple[int, int] = (256, 256)   # (w, h)

    def __post_init__(self):
        if not (self.chi > 0.0 and np.isfinite(self.chi)):
            raise ValueError(f"chi must be positive and finite, got {self.chi}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


def ray_transparency(densities, chi: float, step_length: float) -> float:
    """Surviving fraction alpha = exp(-chi * step_length * sum(densities))."""
    mu = np.asarray(densities, dtype=np.float64)
    if mu.size and mu.min() < 0.0:
        raise ValueError("densities must be non-negative")
    if not (chi > 0.0 and np.isfinite(chi)):
        raise ValueError(f"chi must be positive, got {chi}")
    if not (step_length > 0.0 and np.isfinite(step_length)):
        raise ValueError(f"step_length must be positive, got {step_length}")
    return float(np.exp(-chi * step_length * mu.sum()))


def _pixel_ray_origins(frame: np.ndarray, w: int, h: int) -> np.ndarray:
    """Ray anchor points on the plane through the cube center, shape (h, w, 3).

    Image x runs along frame column u, image y along column v; the image
    square covers offsets [-0.5, 0.5] in both, i.e. the unit-cube cross
    section of the view.
    """
    su = (np.arange(w) + 0.5) / w - 0.5
    sv = (np.arange(h) + 0.5) / h - 0.5
    return (0.5
            + frame[:, 0] * su[None, :, None]
            + frame[:, 1] * sv[:, None, None])


def _cube_span(origins: np.ndarray, direction: np.ndarray):
    """Entry/exit ray parameters of the unit cube (slab test), per pixel."""
    t0 = np.full(origins.shape[:-1], -np.inf)
    t1 = np.full(origins.shape[:-1], np.inf)
    for a in range(3):
        o = origins[..., a]
        d = direction[a]
        if abs(d) < 1e-12:
            inside = (o >= 0.0) & (o <= 1.0)
            t0 = np.where(inside, t0, np.inf)
            t1 = np.where(inside, t1, -np.inf)
        else:
            ta = (0.0 - o) / d
            tb = (1.0 - o) / d
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
    return t0, t1


def project(v: Volume, pose: ViewPose, cfg: ProjectorConfig) -> XRayImage:
    """Orthographic x-ray of a volume.

    One ray per pixel along pose.direction; each ray spans its unit-cube
    chord, sampled trilinearly at n_steps midpoints, so a constant medium
    integrates exactly for any step count. Projection along d equals
    projection along -d (see ViewPose.opposite).
    """
    if v.data.size and float(v.data.min()) < 0.0:
        raise ValueError("volume density must be non-negative")
    w_px, h_px = cfg.resolution
    frame = view_frame(pose)
    direction = frame[:, 2]
    origins = _pixel_ray_origins(frame, w_px, h_px)
    t0, t1 = _cube_span(origins, direction)
    span = np.maximum(t1 - t0, 0.0)
    dt = span / cfg.n_steps

    acc = np.zeros((h_px, w_px), dtype=np.float64)
    for k in range(cfg.n_steps):
        t = t0 + (k + 0.5) * dt
        pts = origins + direction * t[..., None]
        acc += sample_trilinear(v.data, pts)
    opacity = 1.0 - np.exp(-cfg.chi * dt * acc)
    img = np.minimum(opacity.astype(np.float32), _OPACITY_CEIL)
    return XRayImage(np.maximum(img, 0.0))


def gamma_decode(img: XRayImage, gamma: float) -> XRayImage:
    """Map display-encoded values toward linear opacity: v -> v**gamma."""
    if not (gamma > 0.0 and np.isfinite(gamma)):
        raise ValueError(f"gamma must be positive, got {gamma}")
    d = img.data.astype(np.float64)
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError("gamma decode expects values in [0, 1]")
    return XRayImage(np.power(d, gamma).astype(np.float32))


def gamma_encode(img: XRayImage, gamma: float) -> XRayImage:
    """Inverse of gamma_decode: v -> v**(1/gamma)."""
    if not (gamma > 0.0 and np.isfinite(gamma)):
        raise ValueError(f"gamma must be positive, got {gamma}")
    d = img.data.astype(np.float64)
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError("gamma encode expects values in [0, 1]")
    return XRayImage(np.power(d, 1.0 / gamma).astype(np.float32))


def resample_image(img: XRayImage, resolution: tuple[int, int]) -> XRayImage:
    """Resize an image (band-limiting when shrinking, bilinear when growing)."""
    w, h = resolution
    if min(w, h) < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    wy = _axis_weights(img.data.shape[0], h)
    wx = _axis_weights(img.data.shape[1], w)
    out = wy @ img.data.astype(np.float64) @ wx.T
    out = np.minimum(out.astype(np.float32), _OPACITY_CEIL)
    return XRayImage(np.maximum(out, 0.0))


def save_image(img: XRayImage, path) -> None:
    """Write the .ximg binary format (bit-exact round trip for finite data)."""
    if not np.all(np.isfinite(img.data)):
        raise ValueError("refusing to save non-finite pixels")
    w, h = img.dims
    if max(w, h) >= 2**32 or w * h > _MAX_PIXELS:
        raise ValueError(f"dims {img.dims} too large for the image format")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", IMAGE_VERSION, w, h))
        f.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())


def load_image(path) -> XRayImage:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {IMAGE_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need 16 bytes)")
    version, w, h = struct.unpack_from("<III", raw, 4)
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if min(w, h) == 0 or w * h > _MAX_PIXELS:
        raise FormatError(f"{path}: bad dims ({w},{h}) at offset 8")
    expected = 16 + 4 * w * h
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes at offset {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError(f"{path}: non-finite pixel at offset {16 + 4 * bad}")
    return XRayImage(data.copy())


def save_png16(img: XRayImage, path) -> None:
    """Lossy one-way export: 16-bit grayscale PNG, value = round(opacity * 65535)."""
    q = np.round(np.clip(img.data, 0.0, 1.0) * 65535.0).astype("<u2")
    _PILImage.fromarray(q, mode="I;16").save(path)


def png_to_image(path, gamma: float = 2.2) -> XRayImage:
    """Ingest a grayscale PNG scan, undoing display gamma (default 2.2)."""
    pil = _PILImage.open(path)
    arr = np.asarray(pil, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    peak = 65535.0 if pil.mode in ("I;16", "I") else 255.0
    linear = gamma_decode(XRayImage(np.clip(arr / peak, 0.0, 1.0).astype(np.float32)), gamma)
    return XRayImage(np.minimum(linear.data, _OPACITY_CEIL))
