"""Reconstruction quality metrics: volume RMSE, image DSSIM, view buckets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .render import RenderConfig, render_iso
from .volume import (Volume, ViewPose, depth_resample_roundtrip, load_volume)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
VIEW_BUCKET_DEG = 25.0


def volume_l2(a: Volume, b: Volume) -> float:
    """Root mean squared voxel difference."""
    if a.dims != b.dims:
        raise ValueError(f"volume dims differ: {a.dims} vs {b.dims}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _gaussian_kernel_1d() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return g / g.sum()


def _window_filter(img: np.ndarray) -> np.ndarray:
    g = _gaussian_kernel_1d()
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    return ndimage.correlate1d(out, g, axis=1, mode="constant")


def ssim_mean(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully-interior Gaussian windows.

    11x11 window, sigma 1.5, k1=0.01, k2=0.03. Boundary pixels whose window
    would leave the image are cropped, so the padding mode never matters.
    """
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _window_filter(x)
    mu_y = _window_filter(y)
    var_x = _window_filter(x * x) - mu_x * mu_x
    var_y = _window_filter(y * y) - mu_y * mu_y
    cov = _window_filter(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) \
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    r = SSIM_WINDOW // 2
    return float(ssim_map[r:-r, r:-r].mean())


def dssim(a, b) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 in [0, 1]; 0 iff identical."""
    arr_a = a.data if hasattr(a, "data") else a
    arr_b = b.data if hasattr(b, "data") else b
    return (1.0 - ssim_mean(arr_a, arr_b)) / 2.0


def classify_view(pose: ViewPose) -> str:
    """Bucket a view by its nearest canonical axis: top (z), front (y), side (x).

    Anything more than 25 degrees from every axis is 'other'. The axis test
    uses |d . axis|, so a direction and its negation land in the same bucket.
    """
    d = pose.direction / np.linalg.norm(pose.direction)
    cos_thresh = math.cos(math.radians(VIEW_BUCKET_DEG))
    for axis, name in ((2, "top"), (1, "front"), (0, "side")):
        if abs(d[axis]) > cos_thresh:
            return name
    return "other"


@dataclass
class SampleScore:
    sample_id: str
    species_id: str
    view_bucket: str
    l2: float
    dssim: float


def mean_ci95(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% confidence interval bounds."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - half, m + half


def summarize_scores(scores: list[SampleScore], missing: list[str]) -> str:
    lines = [f"samples evaluated: {len(scores)} (missing outputs: {len(missing)})"]
    for metric in ("l2", "dssim"):
        vals = [getattr(s, metric) for s in scores]
        m, lo, hi = mean_ci95(vals)
        lines.append(f"{metric:>6}: mean={m:.6f} ci95=[{lo:.6f}, {hi:.6f}]")
    lines.append("per view bucket:")
    for bucket in ("top", "front", "side", "other"):
        sub = [s for s in scores if s.view_bucket == bucket]
        if not sub:
            lines.append(f"  {bucket:<6} n=0")
            continue
        l2m = float(np.mean([s.l2 for s in sub]))
        dsm = float(np.mean([s.dssim for s in sub]))
        lines.append(f"  {bucket:<6} n={len(sub):<4d} l2={l2m:.6f} dssim={dsm:.6f}")
    if missing:
        lines.append("missing: " + ", ".join(missing))
    return "\n".join(lines)


def histogram_rows(scores: list[SampleScore], metric: str, bins: int = 20):
    vals = np.asarray([getattr(s, metric) for s in scores], dtype=np.float64)
    counts, edges = np.histogram(vals, bins=bins)
    return [(metric, float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(len(counts))]


def evaluate(manifest, method_dir, out_dir=None, render_size: int = 128,
             iso_value: float = 0.1, ao_samples: int = 8):
    """Score a method's volumes against the validation ground truth.

    method_dir holds one '<sample id>.xvol' per validation sample. Each
    sample gets the volume RMSE plus the DSSIM of iso-surface renders from
    the stored (+z) view under one canonical setting. Missing outputs are
    listed and skipped with a warning. When out_dir is set, writes
    report.csv, summary.txt and histogram.csv there. Returns
    (scores, missing ids, summary text).
    """
    method_dir = Path(method_dir)
    axis_pose = ViewPose.from_direction((0.0, 0.0, 1.0))

    def canon_cfg():
        return RenderConfig(iso_value=iso_value, pose=axis_pose,
                            resolution=(render_size, render_size),
                            ao_samples=ao_samples)

    scores: list[SampleScore] = []
    missing: list[str] = []
    for s in manifest.split_samples("val"):
        cand_path = method_dir / f"{s.id}.xvol"
        if not cand_path.exists():
            missing.append(s.id)
            continue
        gt = load_volume(manifest.resolve(s.volume_path))
        cand = load_volume(cand_path)
        l2 = volume_l2(cand, gt)
        d = dssim(render_iso(cand, canon_cfg()), render_iso(gt, canon_cfg()))
        scores.append(SampleScore(sample_id=s.id, species_id=s.species_id,
                                  view_bucket=classify_view(s.pose),
                                  l2=l2, dssim=d))
    if missing:
        warnings.warn(f"{len(missing)} validation outputs missing in {method_dir}")
    summary = summarize_scores(scores, missing)
    if out_dir is not None:
        write_report(scores, missing, out_dir)
    return scores, missing, summary


def write_report(scores: list[SampleScore], missing: list[str], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", encoding="utf-8") as f:
        f.write("sample_id,species,view_bucket,l2,dssim\n")
        for s in scores:
            f.write(f"{s.sample_id},{s.species_id},{s.view_bucket},"
                    f"{s.l2:.8g},{s.dssim:.8g}\n")
    with open(out / "histogram.csv", "w", encoding="utf-8") as f:
        f.write("metric,bin_lo,bin_hi,count\n")
        for metric in ("l2", "dssim"):
            if scores:
                for m, lo, hi, c in histogram_rows(scores, metric):
                    f.write(f"{m},{lo:.8g},{hi:.8g},{c}\n")
    (out / "summary.txt").write_text(summarize_scores(scores, missing) + "\n",
                                     encoding="utf-8")


def depth_ablation(manifest, levels=(8, 16, 32, 64), render_size: int = 128,
                   iso_value: float = 0.1, ao_samples: int = 8):
    """Mean DSSIM between depth-band-limited ground truth and the original.

    Levels above a volume's actual depth are clamped to it (a level equal
    to the depth is an exact identity, scoring 0). Returns an ordered
    {level: mean dssim} over the validation split.
    """
    axis_pose = ViewPose.from_direction((0.0, 0.0, 1.0))

    def canon_cfg():
        return RenderConfig(iso_value=iso_value, pose=axis_pose,
                            resolution=(render_size, render_size),
                            ao_samples=ao_samples)

    sums = {lv: 0.0 for lv in levels}
    count = 0
    for s in manifest.split_samples("val"):
        gt = load_volume(manifest.resolve(s.volume_path))
        ref = render_iso(gt, canon_cfg())
        count += 1
        for lv in levels:
            rt = depth_resample_roundtrip(gt, min(lv, gt.nz))
            sums[lv] += dssim(render_iso(rt, canon_cfg()), ref)
    if count == 0:
        raise ValueError("manifest has no validation samples")
    return {lv: sums[lv] / count for lv in levels}
