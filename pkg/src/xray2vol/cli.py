"""Batch command line: dataset generation, training, inference, baselines,
evaluation, ablation, rendering and x-ray re-synthesis."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import baselines, fusion, metrics, net as nets, render, training
from .dataset import build_dataset, load_manifest
from .projector import (ProjectorConfig, gamma_encode, load_image, project,
                        resample_image, save_image, save_png16)
from .volume import ViewPose, load_volume, save_volume


def _parse_vec3(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z - got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad vector {text!r}") from exc


def _parse_box(text: str):
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError(f"expected x0,y0,z0,x1,y1,z1 - got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_levels(text: str):
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc


def cmd_gen_dataset(args) -> int:
    cfg = ProjectorConfig(chi=args.chi, n_steps=args.steps,
                          resolution=(args.img_size, args.img_size))
    manifest = build_dataset(args.species, args.views, args.out, cfg,
                             seed=args.seed, volume_size=args.vol_size)
    counts = manifest.counts
    print(f"wrote {len(manifest.samples)} samples "
          f"(train={counts['train']} val={counts['val']}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    first = manifest.split_samples("train")[0]
    img = load_image(manifest.resolve(first.image_path))
    vol = load_volume(manifest.resolve(first.volume_path))
    cfg = nets.NetworkConfig(
        input_size=args.input_size or img.dims[0],
        min_resolution=args.min_res,
        base_channels=args.base_ch,
        out_depth=args.out_depth or vol.nz,
        blocks_per_stage=args.blocks)
    hyper = training.Hyper(lr=args.lr, batch_size=args.batch,
                           epochs=args.epochs, seed=args.seed)
    log_path = args.log or (str(args.out) + ".losses.csv")

    def progress(epoch, tr, va, sec):
        print(f"epoch {epoch:3d}  train {tr:.6f}  val {va:.6f}  {sec:.1f}s",
              flush=True)

    weights = training.train(manifest, cfg, hyper, log_path=log_path,
                             progress=progress)
    nets.save_weights(weights, args.out)
    print(f"wrote {args.out} and {log_path}")
    return 0


def cmd_infer(args) -> int:
    weights = nets.load_weights(args.weights)
    model = nets.net_from_weights(weights)
    cfg = model.cfg
    image = load_image(args.image)
    net_input = image
    if image.dims != (cfg.input_size, cfg.input_size):
        net_input = resample_image(image, (cfg.input_size, cfg.input_size))
    coarse = nets.network_forward(net_input, cfg, model, mode="infer")
    if args.no_fusion:
        save_volume(coarse, args.out)
    else:
        fcfg = fusion.FusionConfig(beta=args.fusion_beta,
                                   policy=args.fusion_policy,
                                   error_mode=args.fusion_error_mode,
                                   chi=args.chi)
        save_volume(fusion.fuse_volume(coarse, image, fcfg), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_baseline(args) -> int:
    manifest = load_manifest(args.manifest)
    index = baselines.BaselineIndex.from_manifest(manifest)
    if args.method == "nn":
        result = baselines.nearest_neighbor(load_image(args.query), index)
    else:
        result = baselines.oracle(load_volume(args.query), index)
    save_volume(result, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    scores, missing, summary = metrics.evaluate(
        manifest, args.method_dir, out_dir=args.out,
        render_size=args.render_size, iso_value=args.iso,
        ao_samples=args.ao_samples)
    print(summary)
    if not scores:
        print("no outputs evaluated", file=sys.stderr)
        return 1
    print(f"wrote report to {args.out}")
    return 0


def cmd_ablate_depth(args) -> int:
    manifest = load_manifest(args.manifest)
    table = metrics.depth_ablation(manifest, levels=args.levels,
                                   render_size=args.render_size,
                                   ao_samples=args.ao_samples)
    lines = ["depth,dssim"]
    print("slices  mean DSSIM vs full depth")
    for lv, d in table.items():
        print(f"{lv:6d}  {d:.6f}")
        lines.append(f"{lv},{d:.8g}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    vol = load_volume(args.volume)
    pose = ViewPose.from_direction(args.view, mirrored=args.mirror)
    cfg = render.RenderConfig(
        iso_value=args.iso, pose=pose, resolution=(args.size, args.size),
        ao_samples=args.ao_samples, clip_box=args.cutaway,
        eye_separation_deg=args.eye_sep)
    if args.stereo:
        img = render.render_stereo(vol, cfg)
    elif args.cutaway is not None:
        img = render.render_cutaway(vol, cfg)
    else:
        img = render.render_iso(vol, cfg)
    render.save_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_resynth(args) -> int:
    vol = load_volume(args.volume)
    pose = ViewPose.from_direction(args.pose, mirrored=args.mirror)
    w = args.size or vol.nx
    h = args.size or vol.ny
    steps = args.steps or vol.nz
    cfg = ProjectorConfig(chi=args.chi, n_steps=steps, resolution=(w, h))
    img = project(vol, pose, cfg)
    if args.gamma is not None:
        img = gamma_encode(img, args.gamma)
    if str(args.out).endswith(".png"):
        save_png16(img, args.out)
    else:
        save_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="xray2vol",
        description="Single-image x-ray tomography pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate a phantom dataset")
    p.add_argument("--species", type=int, required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img-size", type=int, default=64)
    p.add_argument("--vol-size", type=int, default=32)
    p.add_argument("--chi", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=128)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the encoder-decoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="loss CSV (default <out>.losses.csv)")
    p.add_argument("--input-size", type=int, default=None,
                   help="default: dataset image size")
    p.add_argument("--out-depth", type=int, default=None,
                   help="default: dataset volume depth")
    p.add_argument("--min-res", type=int, default=8)
    p.add_argument("--base-ch", type=int, default=32)
    p.add_argument("--blocks", type=int, default=3)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="reconstruct a volume from one x-ray")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--fusion-policy", default="proportional",
                   choices=fusion.POLICIES)
    p.add_argument("--fusion-beta", type=float, default=2.0)
    p.add_argument("--fusion-error-mode", default="exact", choices=fusion.ERROR_MODES)
    p.add_argument("--chi", type=float, default=10.0,
                   help="extinction of the projector that made the image")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("baseline", help="nearest-neighbor or oracle reconstruction")
    p.add_argument("--method", required=True, choices=("nn", "oracle"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--query", required=True,
                   help=".ximg for nn, ground-truth .xvol for oracle")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("eval", help="score method outputs against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render-size", type=int, default=128)
    p.add_argument("--iso", type=float, default=0.1)
    p.add_argument("--ao-samples", type=int, default=8)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-depth",
                       help="DSSIM cost of reduced depth resolution")
    p.add_argument("--manifest", required=True)
    p.add_argument("--levels", type=_parse_levels, default=(8, 16, 32, 64))
    p.add_argument("--out", default=None)
    p.add_argument("--render-size", type=int, default=128)
    p.add_argument("--ao-samples", type=int, default=8)
    p.set_defaults(fn=cmd_ablate_depth)

    p = sub.add_parser("render", help="iso-surface render of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=_parse_vec3, default=np.array([0.0, 0.0, 1.0]))
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--iso", type=float, default=0.1)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--ao-samples", type=int, default=16)
    p.add_argument("--cutaway", type=_parse_box, default=None,
                   help="x0,y0,z0,x1,y1,z1 box to remove")
    p.add_argument("--stereo", action="store_true", help="write an anaglyph")
    p.add_argument("--eye-sep", type=float, default=4.0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("resynth", help="re-synthesize an x-ray from a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True, help=".ximg, or .png for 16-bit export")
    p.add_argument("--pose", type=_parse_vec3, default=np.array([0.0, 0.0, 1.0]))
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--gamma", type=float, default=None,
                   help="gamma-encode the output (e.g. 2.2)")
    p.add_argument("--chi", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=None,
                   help="default: the volume's depth (exact fusion round trip)")
    p.add_argument("--size", type=int, default=None,
                   help="default: the volume's x/y dims")
    p.set_defaults(fn=cmd_resynth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
