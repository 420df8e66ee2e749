"""Reference reconstruction methods: nearest-neighbor retrieval and the oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, Sample
from .metrics import volume_l2
from .projector import XRayImage, load_image
from .volume import Volume, load_volume


@dataclass
class BaselineIndex:
    """Train-split index; exhaustive scan, no approximation.

    Images are held in memory; volumes stream from disk unless preloaded
    (desk-scale sets fit comfortably in RAM). Ties break on the
    lexicographically lowest sample id, so results are deterministic.
    """

    manifest: DatasetManifest
    samples: list[Sample]
    images: np.ndarray                  # (n, h, w) float32
    volumes: np.ndarray | None = None   # (n, nz, ny, nx) float32 when preloaded

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest,
                      preload_volumes: bool = False) -> "BaselineIndex":
        samples = sorted(manifest.split_samples("train"), key=lambda s: s.id)
        if not samples:
            raise ValueError("manifest has no train samples to index")
        images = np.stack([load_image(manifest.resolve(s.image_path)).data
                           for s in samples])
        volumes = None
        if preload_volumes:
            volumes = np.stack([load_volume(manifest.resolve(s.volume_path)).data
                                for s in samples])
        return cls(manifest=manifest, samples=samples, images=images, volumes=volumes)

    def volume_of(self, i: int) -> Volume:
        if self.volumes is not None:
            return Volume(self.volumes[i].copy())
        return load_volume(self.manifest.resolve(self.samples[i].volume_path))


def nearest_neighbor(query_image: XRayImage, index: BaselineIndex) -> Volume:
    """Volume of the train sample whose image is closest in mean squared error."""
    if query_image.data.shape != index.images.shape[1:]:
        raise ValueError(
            f"query image {query_image.data.shape} does not match index images "
            f"{index.images.shape[1:]}")
    d = index.images.astype(np.float64) - query_image.data.astype(np.float64)
    dists = np.mean(d * d, axis=(1, 2))
    return index.volume_of(int(np.argmin(dists)))


def oracle(ground_truth: Volume, index: BaselineIndex) -> Volume:
    """Train volume closest to the ground truth itself (ignores the x-ray).

    An upper bound on any approach that memorizes the training set.
    """
    gt = ground_truth.data.astype(np.float64)
    best_i = -1
    best = np.inf
    for i in range(len(index.samples)):
        if index.volumes is not None:
            cand = index.volumes[i]
            if cand.shape != gt.shape:
                raise ValueError(
                    f"volume dims differ: {cand.shape} vs {gt.shape}")
            d = float(np.sqrt(np.mean((cand - gt) ** 2)))
        else:
            d = volume_l2(index.volume_of(i), ground_truth)
        if d < best:
            best, best_i = d, i
    return index.volume_of(best_i)
