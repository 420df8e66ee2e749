"""Procedural phantom dataset: generate volumes, render x-rays, write manifests.

A sample pairs one x-ray image with the volume re-oriented to that view.
Phantoms are skull-like: a closed shell with interior cavities, exterior
protrusions and a thin high-density lattice, floating in vacuum.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .projector import ProjectorConfig, XRayImage, project, save_image
from .utils import parallel_map
from .volume import Volume, ViewPose, resample_gaussian, rotate_to_view, save_volume

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER_PREFIX = "#xray2vol-manifest v1"

# species-level split, mirroring a 20-of-175 holdout
VAL_SPECIES_NUM = 20
VAL_SPECIES_DEN = 175


@dataclass
class Sample:
    id: str
    species_id: str
    pose: ViewPose
    image_path: str       # relative to the manifest directory
    volume_path: str
    split: str            # "train" | "val"


@dataclass
class DatasetManifest:
    chi: float
    n_steps: int
    samples: list[Sample] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    @property
    def counts(self) -> dict[str, int]:
        c = {"train": 0, "val": 0}
        for s in self.samples:
            c[s.split] += 1
        return c

    def split_samples(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath


def generate_phantom(seed: int, dims: tuple[int, int, int]) -> Volume:
    """Deterministic skull-like phantom.

    Outer ellipsoidal shell (density 0.6-0.9) with 1-4 interior cavities,
    2-6 bony protrusions and 6-12 thin high-density struts inside; at
    least 40% of voxels are exactly zero and a 2-voxel border is cleared
    on every face.
    """
    nx, ny, nz = dims
    if min(dims) < 8:
        raise ValueError(f"phantom dims must be >= 8 per axis, got {dims}")
    rng = np.random.default_rng(seed)

    zz, yy, xx = np.indices((nz, ny, nx), dtype=np.float64)
    pts = np.stack([(xx + 0.5) / nx, (yy + 0.5) / ny, (zz + 0.5) / nz], axis=-1)

    center = 0.5 + rng.uniform(-0.04, 0.04, size=3)
    axes = rng.uniform(0.24, 0.34, size=3)
    # random orientation via QR of a random matrix
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    local = (pts - center) @ q
    e = np.sqrt(((local / axes) ** 2).sum(axis=-1))  # 1.0 on the ellipsoid surface

    vol = np.zeros((nz, ny, nx), dtype=np.float64)
    shell_density = rng.uniform(0.6, 0.85)
    interior_density = rng.uniform(0.1, 0.25)
    vol[e < 0.82] = interior_density
    shell = (e >= 0.82) & (e <= 1.0)
    # gentle large-scale density variation across the shell, kept in [0.6, 0.9]
    wobble = 0.05 * np.sin(pts[..., 0] * rng.uniform(4, 9) + rng.uniform(0, 6.28)) \
        * np.cos(pts[..., 2] * rng.uniform(4, 9))
    vol[shell] = np.clip(shell_density + wobble[shell], 0.6, 0.9)

    # protrusions: bony bumps centered on the shell surface
    for _ in range(rng.integers(2, 7)):
        sdir = rng.standard_normal(3)
        sdir /= np.linalg.norm(sdir)
        p_center = center + (q @ (sdir * axes))
        r = rng.uniform(0.05, 0.1)
        bump = np.linalg.norm(pts - p_center, axis=-1) < r
        vol[bump & (e > 0.82)] = np.clip(shell_density + rng.uniform(-0.05, 0.05),
                                         0.6, 0.9)

    # interior cavities: air pockets strictly inside the shell
    for _ in range(rng.integers(1, 5)):
        cdir = rng.standard_normal(3)
        cdir /= np.linalg.norm(cdir)
        c_center = center + (q @ (cdir * axes)) * rng.uniform(0.1, 0.5)
        r = rng.uniform(0.05, 0.11)
        cavity = (np.linalg.norm(pts - c_center, axis=-1) < r) & (e < 0.82)
        vol[cavity] = 0.0

    # lattice: thin dense struts spanning the interior
    n_struts = rng.integers(6, 13)
    for _ in range(n_struts):
        a = center + (q @ (rng.uniform(-0.6, 0.6, size=3) * axes))
        b = center + (q @ (rng.uniform(-0.6, 0.6, size=3) * axes))
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            continue
        t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
        d = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)
        strut = (d < rng.uniform(0.010, 0.022)) & (e < 0.95)
        vol[strut] = rng.uniform(0.85, 1.0)

    # clear the vacuum border
    m = 2
    vol[:m, :, :] = 0.0
    vol[-m:, :, :] = 0.0
    vol[:, :m, :] = 0.0
    vol[:, -m:, :] = 0.0
    vol[:, :, :m] = 0.0
    vol[:, :, -m:] = 0.0
    return Volume(vol.astype(np.float32))


class ViewSampler:
    """Draws poses uniformly over the z >= 0 hemisphere, in mirror pairs.

    Directions are uniform in solid angle. Consecutive draws reuse each
    direction twice, once unmirrored and once mirrored, so every view
    contributes both variants.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._pending: ViewPose | None = None

    def sample_view(self) -> ViewPose:
        if self._pending is not None:
            pose = self._pending
            self._pending = None
            return pose
        z = self.rng.uniform(0.0, 1.0)
        phi = self.rng.uniform(0.0, 2.0 * math.pi)
        r = math.sqrt(max(0.0, 1.0 - z * z))
        d = np.array([r * math.cos(phi), r * math.sin(phi), z])
        first = ViewPose.from_direction(d, mirrored=False)
        self._pending = ViewPose.from_direction(d, mirrored=True)
        return first


def sample_view(state: ViewSampler) -> ViewPose:
    return state.sample_view()


def n_validation_species(n_species: int) -> int:
    return max(1, (n_species * VAL_SPECIES_NUM) // VAL_SPECIES_DEN)


def build_dataset(n_species: int,
                  views_per_species: int,
                  out_dir,
                  cfg: ProjectorConfig | None = None,
                  seed: int = 0,
                  volume_size: int = 32,
                  gen_scale: int = 2) -> DatasetManifest:
    """Generate phantoms, render every view, write files and the manifest.

    Each phantom is generated at gen_scale x the stored resolution and
    band-limited down, like re-gridding a raw scan. The last
    n_validation_species(n_species) species form the validation split.
    On failure nothing referenced by a manifest is left behind.
    """
    if n_species < 1 or views_per_species < 1:
        raise ValueError("need at least one species and one view")
    cfg = cfg or ProjectorConfig(resolution=(64, 64))
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "volumes").mkdir(parents=True, exist_ok=True)

    n_val = n_validation_species(n_species)
    manifest = DatasetManifest(chi=cfg.chi, n_steps=cfg.n_steps, root=out)
    try:
        for si in range(n_species):
            species_id = f"phantom_{si:04d}"
            split = "val" if si >= n_species - n_val else "train"
            gen_dims = (volume_size * gen_scale,) * 3
            phantom = generate_phantom(seed * 100003 + si, gen_dims)
            phantom = resample_gaussian(phantom, (volume_size,) * 3)
            sampler = ViewSampler(np.random.default_rng((seed, si)))
            axis_pose = ViewPose.from_direction((0.0, 0.0, 1.0))
            poses = [sampler.sample_view() for _ in range(views_per_species)]

            def render_view(args, _si=si, _species=species_id, _split=split,
                            _ph=phantom):
                vi, pose = args
                sid = f"s{_si:04d}_v{vi:03d}"
                # the x-ray is rendered from the view-aligned volume so the
                # stored pair composes exactly (image = +z projection of volume)
                aligned = rotate_to_view(_ph, pose, (volume_size,) * 3)
                image = project(aligned, axis_pose, cfg)
                img_rel = f"images/{sid}.ximg"
                vol_rel = f"volumes/{sid}.xvol"
                save_image(image, out / img_rel)
                save_volume(aligned, out / vol_rel)
                return Sample(id=sid, species_id=_species, pose=pose,
                              image_path=img_rel, volume_path=vol_rel, split=_split)

            manifest.samples.extend(parallel_map(render_view, enumerate(poses)))
        save_manifest(manifest, out / MANIFEST_NAME)
    except BaseException:
        # no partial manifest: a dataset without manifest.txt is just files
        try:
            os.remove(out / MANIFEST_NAME)
        except OSError:
            pass
        raise
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(f"{MANIFEST_HEADER_PREFIX} chi={manifest.chi:.9g} "
                f"nsteps={manifest.n_steps}\n")
        for s in manifest.samples:
            d = s.pose.direction
            f.write(f"id={s.id} species={s.species_id} "
                    f"dir={d[0]:.9g},{d[1]:.9g},{d[2]:.9g} "
                    f"mirror={1 if s.pose.mirrored else 0} split={s.split} "
                    f"image={s.image_path} volume={s.volume_path}\n")
    os.replace(tmp, path)


def _parse_fields(line: str, lineno: int, path) -> dict[str, str]:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise FormatError(f"{path}:{lineno}: malformed token {token!r}")
        k, v = token.split("=", 1)
        fields[k] = v
    return fields


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MANIFEST_HEADER_PREFIX):
        raise FormatError(f"{path}:1: missing '{MANIFEST_HEADER_PREFIX}' header")
    head = _parse_fields(lines[0].removeprefix(MANIFEST_HEADER_PREFIX), 1, path)
    if "chi" not in head or "nsteps" not in head:
        raise FormatError(f"{path}:1: header must carry chi= and nsteps=")
    manifest = DatasetManifest(chi=float(head["chi"]), n_steps=int(head["nsteps"]),
                               root=path.parent)
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        f = _parse_fields(line, i, path)
        missing = {"id", "species", "dir", "mirror", "split", "image", "volume"} - set(f)
        if missing:
            raise FormatError(f"{path}:{i}: missing fields {sorted(missing)}")
        try:
            d = np.array([float(c) for c in f["dir"].split(",")])
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: bad dir {f['dir']!r}") from exc
        if d.shape != (3,):
            raise FormatError(f"{path}:{i}: dir must have 3 components")
        if f["split"] not in ("train", "val"):
            raise FormatError(f"{path}:{i}: bad split {f['split']!r}")
        if f["mirror"] not in ("0", "1"):
            raise FormatError(f"{path}:{i}: bad mirror {f['mirror']!r}")
        pose = ViewPose.from_direction(d, mirrored=f["mirror"] == "1")
        manifest.samples.append(Sample(
            id=f["id"], species_id=f["species"], pose=pose,
            image_path=f["image"], volume_path=f["volume"], split=f["split"]))
    train_species = {s.species_id for s in manifest.samples if s.split == "train"}
    val_species = {s.species_id for s in manifest.samples if s.split == "val"}
    overlap = train_species & val_species
    if overlap:
        raise FormatError(f"{path}: species in both splits: {sorted(overlap)}")
    return manifest
