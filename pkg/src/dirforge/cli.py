"""Command-line front end: phantom generation, training, registration,
evaluation, and container inspection.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
All commands are deterministic for a fixed seed and re-runs produce
byte-identical outputs (timing files excluded).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys

import numpy as np

from . import __version__
from .metrics import (BODY_HU_DEFAULT, BONE_HU_DEFAULT, evaluate_pair,
                      write_report)
from .phantom import make_phantom, spec_from_json
from .pipeline import (TrainConfig, load_generators, mean_pool_volume,
                       predict_dvf, register, save_checkpoints, to_net,
                       train_global, train_local)
from .transform import load_dvf, save_dvf, upsample_dvf, warp
from .volume import (DataError, _atomic_write_bytes, _atomic_write_text,
                     load_landmarks, load_volume, read_container,
                     save_landmarks, save_volume)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("DIRFORGE_WORKERS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    with open(args.spec) as f:
        text = f.read()
    spec = spec_from_json(text)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    moving, target, truth, lm_mov, lm_tgt = make_phantom(spec)

    save_volume(moving, os.path.join(args.out, "moving"))
    save_volume(target, os.path.join(args.out, "target"))
    save_dvf(truth, spec.spacing, os.path.join(args.out, "truth_dvf"))
    save_landmarks(lm_mov, os.path.join(args.out, "landmarks_moving.csv"))
    save_landmarks(lm_tgt, os.path.join(args.out, "landmarks_target.csv"))

    files = [
        "moving.json", "moving.bin", "target.json", "target.bin",
        "truth_dvf.json", "truth_dvf.bin",
        "landmarks_moving.csv", "landmarks_target.csv",
    ]
    manifest = {
        "seed": spec.seed,
        "spec": json.loads(text),
        "files": {name: _sha256(os.path.join(args.out, name)) for name in files},
    }
    if args.seed is not None:
        manifest["spec"]["seed"] = args.seed
    _atomic_write_text(os.path.join(args.out, "manifest.json"),
                       json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"phantom written to {args.out} ({len(files)} files)")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _load_pairs(manifest_path):
    with open(manifest_path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"malformed pairs manifest: {e}") from e
    if "pairs" not in obj or not obj["pairs"]:
        raise DataError("pairs manifest must contain a non-empty 'pairs' list")
    base = os.path.dirname(os.path.abspath(manifest_path))
    pairs = []
    for entry in obj["pairs"]:
        mov = entry["moving"]
        tgt = entry["target"]
        mov = mov if os.path.isabs(mov) else os.path.join(base, mov)
        tgt = tgt if os.path.isabs(tgt) else os.path.join(base, tgt)
        pairs.append((load_volume(mov), load_volume(tgt)))
    return pairs


def cmd_train(args) -> int:
    if args.config:
        with open(args.config) as f:
            cfg = TrainConfig.from_json(f.read())
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, worker_count=args.workers)
    pairs = _load_pairs(args.pairs)

    gg, gdisc, hist_g = train_global(pairs, cfg)
    deformed_pairs = []
    for mov, tgt in pairs:
        mov_low = mean_pool_volume(mov, cfg.global_downsample_target)
        tgt_low = mean_pool_volume(tgt, cfg.global_downsample_target)
        g_low = predict_dvf(to_net(mov_low.voxels), to_net(tgt_low.voxels), gg, cfg.max_disp)
        g_full = upsample_dvf(g_low, mov.dims) if g_low.dims != mov.dims else g_low
        deformed_pairs.append((warp(mov, g_full), tgt))
    lg, ldisc, hist_l = train_local(deformed_pairs, cfg)

    staging = args.out.rstrip("/\\") + ".staging"
    if os.path.exists(staging):
        shutil.rmtree(staging)
    try:
        save_checkpoints(staging, gg, gdisc, lg, ldisc, cfg, hist_g + hist_l)
        os.makedirs(args.out, exist_ok=True)
        for name in os.listdir(staging):
            os.replace(os.path.join(staging, name), os.path.join(args.out, name))
    finally:
        if os.path.exists(staging):
            shutil.rmtree(staging)
    print(f"checkpoints written to {args.out}")
    return 0


# --------------------------------------------------------------------------
# register
# --------------------------------------------------------------------------

def cmd_register(args) -> int:
    moving = load_volume(args.moving)
    target = load_volume(args.target)
    gg, lg, cfg = load_generators(args.ckpt)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, worker_count=args.workers)
    result = register(moving, target, gg, lg, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_dvf(result.final_dvf, moving.spacing, os.path.join(args.out, "final_dvf"))
    save_dvf(result.global_dvf, moving.spacing, os.path.join(args.out, "global_dvf"))
    save_dvf(result.local_dvf, moving.spacing, os.path.join(args.out, "local_dvf"))
    save_volume(result.deformed, os.path.join(args.out, "deformed"))
    timing = dict(result.timing)
    timing["patch_count"] = result.patch_count
    _atomic_write_text(os.path.join(args.out, "timing.json"),
                       json.dumps(timing, sort_keys=True, indent=2) + "\n")
    print(f"registration written to {args.out} "
          f"({result.patch_count} patches, {timing['total_s']:.2f}s)")
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    deformed = load_volume(args.deformed)
    target = load_volume(args.target)
    dvf, _spacing = load_dvf(args.dvf)
    lm_mov = load_landmarks(args.landmarks_moving)
    lm_tgt = load_landmarks(args.landmarks_target)
    if dvf.dims != target.dims:
        raise DataError(f"dvf dims {dvf.dims} do not match target dims {target.dims}")
    report = evaluate_pair(deformed, target, dvf, lm_mov, lm_tgt,
                           body_hu=args.body_hu, bone_hu=args.bone_hu)
    write_report({"1": report}, args.out, extra={
        "body_hu": args.body_hu,
        "bone_hu": args.bone_hu,
        "inputs": {
            "deformed": args.deformed, "target": args.target, "dvf": args.dvf,
            "landmarks_moving": args.landmarks_moving,
            "landmarks_target": args.landmarks_target,
        },
    })
    print(f"tre_mean={report.tre_mean:.4f}mm mae={report.mae:.2f}HU "
          f"ncc={report.ncc:.4f} dsc={report.dsc:.4f} fold={report.fold_fraction:.4f}")
    print(f"report written to {args.out}.csv / {args.out}.json")
    return 0


# --------------------------------------------------------------------------
# info
# --------------------------------------------------------------------------

def _write_pgm(path, image: np.ndarray, lo: float, hi: float) -> None:
    span = max(hi - lo, 1e-9)
    scaled = np.clip((image.astype(np.float64) - lo) / span, 0.0, 1.0)
    pixels = (scaled * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[0]} {image.shape[1]}\n255\n".encode()
    _atomic_write_bytes(path, header + pixels.T.tobytes())


def cmd_info(args) -> int:
    header, data = read_container(args.file)
    stem = os.path.splitext(args.file)[0] if args.file.endswith((".json", ".bin")) else args.file
    payload_sha = _sha256(stem + ".bin")
    print(f"dims: {header['dims'][0]} {header['dims'][1]} {header['dims'][2]}")
    print(f"spacing_mm: {header['spacing_mm'][0]} {header['spacing_mm'][1]} {header['spacing_mm'][2]}")
    print(f"channels: {header['channels']}")
    print(f"min: {data.min():.4f}")
    print(f"max: {data.max():.4f}")
    print(f"sha256: {payload_sha}")
    if args.slice is not None:
        nz = header["dims"][2]
        if not (0 <= args.slice < nz):
            raise DataError(f"slice {args.slice} out of range [0, {nz})")
        if header["channels"] == 1:
            img = data[0][:, :, args.slice]
        else:
            img = np.sqrt((data.astype(np.float64) ** 2).sum(axis=0))[:, :, args.slice]
        if args.window:
            try:
                lo, hi = (float(v) for v in args.window.split(":"))
            except ValueError as e:
                raise UsageError(f"bad --window '{args.window}', expected lo:hi") from e
        elif header["channels"] == 1:
            lo, hi = -300.0, 300.0
        else:
            lo, hi = 0.0, max(float(img.max()), 1e-9)
        out = args.out or f"{stem}_z{args.slice}.pgm"
        _write_pgm(out, img, lo, hi)
        print(f"slice image written to {out}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="dirforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dirforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom pair with ground truth")
    p.add_argument("--spec", required=True, help="phantom spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("train", help="train the coarse and fine stages")
    p.add_argument("--pairs", required=True, help="JSON manifest with a 'pairs' list")
    p.add_argument("--config", default=None, help="training config JSON (defaults used if omitted)")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("register", help="register a moving volume onto a target")
    p.add_argument("--moving", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory from 'train'")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("evaluate", help="compute registration quality metrics")
    p.add_argument("--deformed", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--dvf", required=True)
    p.add_argument("--landmarks-moving", required=True)
    p.add_argument("--landmarks-target", required=True)
    p.add_argument("--out", required=True, help="report stem (.csv and .json are written)")
    p.add_argument("--body-hu", type=float, default=BODY_HU_DEFAULT)
    p.add_argument("--bone-hu", type=float, default=BONE_HU_DEFAULT)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("info", help="print container header, stats and checksum")
    p.add_argument("--file", required=True)
    p.add_argument("--slice", type=int, default=None, help="also write one axial slice as PGM")
    p.add_argument("--window", default=None, help="display window lo:hi for the slice")
    p.add_argument("--out", default=None, help="slice image path")
    p.set_defaults(fn=cmd_info)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
