"""Minibatch training loop with Adam and a per-epoch loss log."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import TrainingDivergedError
from .net import (CONFIG_TENSOR, Net, NetworkConfig, config_to_record, loss_l2,
                  loss_l2_grad, volume_to_target)
from .projector import load_image
from .volume import load_volume


@dataclass
class Hyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0


class Adam:
    """Adaptive-moment optimizer over a named parameter map (in-place updates)."""

    def __init__(self, params: dict[str, np.ndarray], hyper: Hyper):
        self.params = params
        self.h = hyper
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        h = self.h
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            p -= (h.lr / bc1) * m / (np.sqrt(v / bc2) + h.eps)


def load_training_arrays(manifest: DatasetManifest, split: str):
    """All images and depth-as-channels targets of a split, stacked."""
    samples = manifest.split_samples(split)
    if not samples:
        return np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32)
    images = []
    targets = []
    for s in samples:
        images.append(load_image(manifest.resolve(s.image_path)).data[:, :, None])
        targets.append(volume_to_target(load_volume(manifest.resolve(s.volume_path))))
    return np.stack(images), np.stack(targets)


def _epoch_val_loss(net: Net, images: np.ndarray, targets: np.ndarray,
                    batch_size: int) -> float:
    if images.shape[0] == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, images.shape[0], batch_size):
        xb = images[lo:lo + batch_size]
        out = net.forward(xb, training=False)
        total += loss_l2(out, targets[lo:lo + batch_size]) * xb.shape[0]
    return total / images.shape[0]


def train(manifest: DatasetManifest, cfg: NetworkConfig, hyper: Hyper | None = None,
          log_path=None, progress=None) -> dict[str, np.ndarray]:
    """Train on the manifest's train split; returns the best-validation weights.

    Weights carry the '_config' record. When the manifest has no validation
    samples the final-epoch weights win. The loss log CSV has one row per
    epoch: epoch, train_loss, val_loss, seconds.
    """
    hyper = hyper or Hyper()
    rng = np.random.default_rng(hyper.seed)
    tr_x, tr_y = load_training_arrays(manifest, "train")
    va_x, va_y = load_training_arrays(manifest, "val")
    n_train = tr_x.shape[0]
    if n_train < 1:
        raise ValueError("manifest has no training samples")
    if tr_x.shape[1] != cfg.input_size:
        raise ValueError(
            f"dataset images are {tr_x.shape[1]}px but config expects {cfg.input_size}")
    if tr_y.shape[3] != cfg.out_depth or tr_y.shape[1] != cfg.output_size:
        raise ValueError(
            f"dataset volumes {tr_y.shape[1:]} do not match config output "
            f"{cfg.output_size}x{cfg.output_size}x{cfg.out_depth}")

    net = Net(cfg, rng)
    opt = Adam(net.named_params(), hyper)
    best_val = np.inf
    best_state = {k: v.copy() for k, v in net.state_dict().items()}
    log_rows = []
    for epoch in range(1, hyper.epochs + 1):
        t0 = time.time()
        order = rng.permutation(n_train)
        total = 0.0
        for lo in range(0, n_train, hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            out = net.forward(tr_x[idx], training=True)
            batch_loss = loss_l2(out, tr_y[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, sample offset {lo}")
            total += batch_loss * idx.size
            net.backward(loss_l2_grad(out, tr_y[idx]).astype(out.dtype))
            opt.step(net.named_grads())
        train_loss = total / n_train
        val_loss = _epoch_val_loss(net, va_x, va_y, hyper.batch_size)
        seconds = time.time() - t0
        log_rows.append((epoch, train_loss, val_loss, seconds))
        if progress:
            progress(epoch, train_loss, val_loss, seconds)
        if np.isnan(val_loss) or val_loss < best_val:
            best_val = val_loss if not np.isnan(val_loss) else np.inf
            best_state = {k: v.copy() for k, v in net.state_dict().items()}

    if log_path is not None:
        write_loss_log(log_rows, log_path)
    best_state[CONFIG_TENSOR] = config_to_record(cfg)
    return best_state


def write_loss_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,val_loss,seconds\n")
        for epoch, tr, va, sec in rows:
            f.write(f"{epoch},{tr:.8g},{va:.8g},{sec:.3f}\n")


def read_loss_log(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = []
    for line in lines[1:]:
        e, tr, va, sec = line.split(",")
        rows.append((int(e), float(tr), float(va), float(sec)))
    return rows
