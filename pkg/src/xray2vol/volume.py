"""3D density volumes on the unit cube: resampling, view-aligned rotation, file I/O.

A volume is a scalar density grid filling [0,1]^3. Data is kept in a
(nz, ny, nx) float32 array so the flat memory order is x-fastest, then y,
then z -- the same order used by the .xvol file format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

VOLUME_MAGIC = b"XVOL"
VOLUME_VERSION = 1
_MAX_VOXELS = 2**31  # dim sanity cap for file headers

# world up used to build canonical in-plane frames
_CANONICAL_UP = np.array([0.0, 1.0, 0.0])
_FALLBACK_UP = np.array([1.0, 0.0, 0.0])


@dataclass
class Volume:
    """Axis-aligned scalar density grid occupying the unit cube.

    data: (nz, ny, nx) float32. Values are dimensionless densities,
    normally in [0,1]; fusion output may exceed 1 (see fusion module).
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    def validate(self, max_value: float = 1.0) -> "Volume":
        """Check the standard density invariants (finite, in [0, max_value])."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite voxels")
        if self.data.min() < 0.0 or self.data.max() > max_value:
            raise ValueError(
                f"voxel values outside [0, {max_value}]: "
                f"min={self.data.min():.6g} max={self.data.max():.6g}"
            )
        return self


@dataclass
class ViewPose:
    """Orthographic view: unit direction, an up hint for the in-plane frame, mirror flag.

    Dataset poses are restricted to the z >= 0 hemisphere (projection is
    symmetric under direction negation, so the lower hemisphere adds only
    ambiguity); the projector itself accepts any unit direction.
    """

    direction: np.ndarray
    up_hint: np.ndarray = field(default_factory=lambda: _CANONICAL_UP.copy())
    mirrored: bool = False

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.up_hint = np.asarray(self.up_hint, dtype=np.float64).reshape(3)

    @classmethod
    def from_direction(cls, direction, mirrored: bool = False) -> "ViewPose":
        """Pose with the canonical up hint (+y, or +x when direction is near +-y)."""
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0 or not np.all(np.isfinite(d)):
            raise ValueError("view direction must be a nonzero finite vector")
        d = d / n
        up = _CANONICAL_UP if abs(d @ _CANONICAL_UP) < 0.999 else _FALLBACK_UP
        return cls(direction=d, up_hint=up.copy(), mirrored=mirrored)

    def opposite(self) -> "ViewPose":
        """Pose looking along -direction whose projection is pixel-identical."""
        return ViewPose(direction=-self.direction, up_hint=self.up_hint.copy(),
                        mirrored=not self.mirrored)


def view_frame(pose: ViewPose) -> np.ndarray:
    """Orthonormal frame for a pose as a 3x3 matrix with columns (u, v, w).

    w is the view direction; u/v are the image x/y axes. The mirror flag
    negates u after v is fixed, so a pose and its opposite() produce the
    same per-pixel rays.
    """
    d = pose.direction
    n = np.linalg.norm(d)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
        raise ValueError(f"view direction must be unit length (|d|={n:.8f})")
    w = d / n
    c = np.cross(pose.up_hint, w)
    cn = np.linalg.norm(c)
    if cn < 1e-8:
        raise ValueError("up hint is parallel to the view direction")
    u = c / cn
    v = np.cross(w, u)
    if pose.mirrored:
        u = -u
    return np.stack([u, v, w], axis=1)


def sample_trilinear(data: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear samples of a (nz, ny, nx) grid at unit-cube points (..., 3).

    Voxel centers sit at ((i + 0.5) / n). The grid fills the whole cube, so
    inside [0,1]^3 the boundary half-voxel clamps to the edge value (a
    constant grid therefore reads as an exactly constant field); outside
    the cube everything reads 0 (object in vacuum).
    """
    nz, ny, nx = data.shape
    pts = np.asarray(points, dtype=np.float64)
    px, py, pz = pts[..., 0], pts[..., 1], pts[..., 2]
    inside = ((px >= 0.0) & (px <= 1.0)
              & (py >= 0.0) & (py <= 1.0)
              & (pz >= 0.0) & (pz <= 1.0))
    fx = np.clip(px * nx - 0.5, 0.0, nx - 1.0)
    fy = np.clip(py * ny - 0.5, 0.0, ny - 1.0)
    fz = np.clip(pz * nz - 0.5, 0.0, nz - 1.0)
    ix0 = np.minimum(np.floor(fx).astype(np.int64), nx - 2) if nx > 1 \
        else np.zeros(fx.shape, np.int64)
    iy0 = np.minimum(np.floor(fy).astype(np.int64), ny - 2) if ny > 1 \
        else np.zeros(fy.shape, np.int64)
    iz0 = np.minimum(np.floor(fz).astype(np.int64), nz - 2) if nz > 1 \
        else np.zeros(fz.shape, np.int64)
    tx = fx - ix0
    ty = fy - iy0
    tz = fz - iz0

    flat = data.ravel()
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    for dz in (0, 1):
        wz = tz if dz else 1.0 - tz
        iz = np.minimum(iz0 + dz, nz - 1)
        for dy in (0, 1):
            wy = ty if dy else 1.0 - ty
            iy = np.minimum(iy0 + dy, ny - 1)
            for dx in (0, 1):
                wx = tx if dx else 1.0 - tx
                ix = np.minimum(ix0 + dx, nx - 1)
                out += flat[(iz * ny + iy) * nx + ix] * (wz * wy * wx)
    out[~inside] = 0.0
    return out


def _linear_weights(n_src: int, n_tgt: int) -> np.ndarray:
    """1D linear-interpolation matrix (n_tgt, n_src), edge-clamped, rows sum 1."""
    f = ((np.arange(n_tgt) + 0.5) / n_tgt) * n_src - 0.5
    i0 = np.floor(f).astype(np.int64)
    t = f - i0
    w = np.zeros((n_tgt, n_src), dtype=np.float64)
    rows = np.arange(n_tgt)
    np.add.at(w, (rows, np.clip(i0, 0, n_src - 1)), 1.0 - t)
    np.add.at(w, (rows, np.clip(i0 + 1, 0, n_src - 1)), t)
    return w / w.sum(axis=1, keepdims=True)


def _axis_weights(n_src: int, n_tgt: int) -> np.ndarray:
    """1D resampling matrix (n_tgt, n_src), rows normalized to sum 1.

    Minification uses a Gaussian of sigma = half the target spacing,
    truncated at 3 sigma; equal or finer targets use linear interpolation
    (exact identity on a matching grid). Rows renormalize over in-range
    voxels, which preserves constants exactly.
    """
    if n_tgt >= n_src:
        return _linear_weights(n_src, n_tgt)
    src = (np.arange(n_src) + 0.5) / n_src
    tgt = (np.arange(n_tgt) + 0.5) / n_tgt
    sigma = 0.5 / n_tgt
    d = tgt[:, None] - src[None, :]
    w = np.exp(-0.5 * (d / sigma) ** 2) * (np.abs(d) <= 3.0 * sigma)
    return w / w.sum(axis=1, keepdims=True)


def _apply_axis_weights(data: np.ndarray, wz, wy, wx) -> np.ndarray:
    out = np.tensordot(wz, data.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(wy, out, axes=(1, 1)), 0, 1)
    out = np.moveaxis(np.tensordot(wx, out, axes=(1, 2)), 0, 2)
    return out


def resample_gaussian(src: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Resample to target_dims over the same unit cube, band-limiting shrunken axes.

    Output is clamped to [0,1].
    """
    nx, ny, nz = target_dims
    if min(nx, ny, nz) < 1:
        raise ValueError(f"target dims must be >= 1, got {target_dims}")
    if src.data.size == 0 or min(src.dims) < 1:
        raise ValueError("source volume is empty")
    out = _apply_axis_weights(
        src.data,
        _axis_weights(src.nz, nz),
        _axis_weights(src.ny, ny),
        _axis_weights(src.nx, nx),
    )
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32))


def resample_trilinear(src: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Pure (tri)linear resampling to target_dims, no band-limiting."""
    nx, ny, nz = target_dims
    if min(nx, ny, nz) < 1:
        raise ValueError(f"target dims must be >= 1, got {target_dims}")
    out = _apply_axis_weights(
        src.data,
        _linear_weights(src.nz, nz),
        _linear_weights(src.ny, ny),
        _linear_weights(src.nx, nx),
    )
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32))


def resample_oriented(src: Volume, frame: np.ndarray,
                      out_dims: tuple[int, int, int]) -> Volume:
    """Resample so the output axes follow the given orthonormal frame.

    frame columns (u, v, w) give the world directions of the output x/y/z
    axes; rotation is about the cube center, trilinear, vacuum outside.
    """
    nx, ny, nz = out_dims
    ox = (np.arange(nx) + 0.5) / nx - 0.5
    oy = (np.arange(ny) + 0.5) / ny - 0.5
    oz = (np.arange(nz) + 0.5) / nz - 0.5
    # world point = center + u*dx + v*dy + w*dz for output offsets (dx,dy,dz)
    pts = (0.5
           + frame[:, 0] * ox[None, None, :, None]
           + frame[:, 1] * oy[None, :, None, None]
           + frame[:, 2] * oz[:, None, None, None])
    out = sample_trilinear(src.data, pts)
    return Volume(out.astype(np.float32))


def rotate_to_view(src: Volume, pose: ViewPose,
                   out_dims: tuple[int, int, int]) -> Volume:
    """Re-orient a volume so its z axis runs along the pose direction.

    The output x/y axes match the x-ray image axes of the same pose, so
    projecting the result along +z reproduces project(src, pose) up to
    resampling error.
    """
    return resample_oriented(src, view_frame(pose), out_dims)


def depth_resample_roundtrip(v: Volume, reduced_nz: int) -> Volume:
    """Band-limit the depth axis to reduced_nz slices and resample back.

    Output dims equal input dims; x/y are untouched.
    """
    if reduced_nz < 1:
        raise ValueError(f"reduced_nz must be >= 1, got {reduced_nz}")
    if reduced_nz > v.nz:
        raise ValueError(f"reduced_nz={reduced_nz} exceeds volume depth {v.nz}")
    down = resample_gaussian(v, (v.nx, v.ny, reduced_nz))
    return resample_trilinear(down, (v.nx, v.ny, v.nz))


def save_volume(v: Volume, path) -> None:
    """Write the .xvol binary format (bit-exact round trip for finite data)."""
    if not np.all(np.isfinite(v.data)):
        raise ValueError("refusing to save non-finite voxels")
    nx, ny, nz = v.dims
    if max(nx, ny, nz) >= 2**32 or nx * ny * nz > _MAX_VOXELS:
        raise ValueError(f"dims {v.dims} too large for the volume format")
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<IIII", VOLUME_VERSION, nx, ny, nz))
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0, expected {VOLUME_MAGIC!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need 20 bytes)")
    version, nx, ny, nz = struct.unpack_from("<IIII", raw, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if min(nx, ny, nz) == 0 or nx * ny * nz > _MAX_VOXELS:
        raise FormatError(f"{path}: bad dims ({nx},{ny},{nz}) at offset 8")
    expected = 20 + 4 * nx * ny * nz
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {len(raw)}, expected {expected} bytes")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes at offset {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError(f"{path}: non-finite voxel at offset {20 + 4 * bad}")
    return Volume(data.copy())
