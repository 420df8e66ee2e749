#!/usr/bin/env python3
"""Desk-scale pilot: build the 40x50 dataset, train, compare with baselines.

Writes everything under the directory given as argv[1] (default runs/pilot).
"""

import sys
import time
from pathlib import Path

import numpy as np

from xray2vol import net as nets
from xray2vol import training
from xray2vol.baselines import BaselineIndex, nearest_neighbor, oracle
from xray2vol.dataset import build_dataset, load_manifest
from xray2vol.metrics import volume_l2
from xray2vol.net import network_forward
from xray2vol.projector import ProjectorConfig, load_image
from xray2vol.volume import load_volume


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/pilot")
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10
    out.mkdir(parents=True, exist_ok=True)
    ds = out / "dataset"

    t0 = time.time()
    if (ds / "manifest.txt").exists():
        manifest = load_manifest(ds / "manifest.txt")
        print(f"reusing dataset ({len(manifest.samples)} samples)")
    else:
        manifest = build_dataset(40, 50, ds, ProjectorConfig(resolution=(64, 64)),
                                 seed=0, volume_size=32)
        print(f"dataset built in {time.time()-t0:.0f}s")

    cfg = nets.NetworkConfig()
    hyper = training.Hyper(epochs=epochs)
    t0 = time.time()
    weights = training.train(
        manifest, cfg, hyper, log_path=out / "losses.csv",
        progress=lambda e, tr, va, s: print(
            f"epoch {e:3d}  train {tr:.6f}  val {va:.6f}  {s:.0f}s", flush=True))
    print(f"trained in {time.time()-t0:.0f}s")
    nets.save_weights(weights, out / "weights.xnnw")

    model = nets.net_from_weights(weights)
    index = BaselineIndex.from_manifest(manifest, preload_volumes=True)
    rows = []
    t0 = time.time()
    for s in manifest.split_samples("val"):
        img = load_image(manifest.resolve(s.image_path))
        gt = load_volume(manifest.resolve(s.volume_path))
        ours = network_forward(img, cfg, model)
        nn_v = nearest_neighbor(img, index)
        or_v = oracle(gt, index)
        rows.append((volume_l2(ours, gt), volume_l2(nn_v, gt), volume_l2(or_v, gt)))
    rows = np.array(rows)
    print(f"eval in {time.time()-t0:.0f}s over {len(rows)} val samples")
    print(f"mean volume L2   ours {rows[:,0].mean():.6f}   "
          f"nn {rows[:,1].mean():.6f}   oracle {rows[:,2].mean():.6f}")
    print(f"oracle<=nn per-sample: {(rows[:,2] <= rows[:,1]).all()}")
    print(f"ours beats nn: {rows[:,0].mean() < rows[:,1].mean()}, "
          f"ours beats oracle: {rows[:,0].mean() < rows[:,2].mean()}")
    np.savetxt(out / "pilot_l2.csv", rows, delimiter=",",
               header="ours,nn,oracle", comments="")


if __name__ == "__main__":
    main()
