"""``lapfusion`` command-line interface.

Every command reads an optional TOML config (``--config``); ``--set
section.key=value`` and the dedicated flags override it. Exit status is 0
on success, 2 for configuration errors, 3 for I/O errors and 4 for
numerical failures (diverged training, singular systems).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .config import ConfigError, RunConfig, load_config, parse_override
from .fusion import (TrainingError, build_training_pairs, load_detail_model, reconstruct_frame,
                     save_detail_model, train_base, train_detail, transfer_details)
from .laplacian import SolverError, uniform_angle_laplacian
from .neural import CheckpointError
from .skinning import Pose, RigError
from .synthetic import bend_sequence, make_synthetic_rig, make_synthetic_scans

log = logging.getLogger("lapfusion")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _frame_name(i: int, ext: str) -> str:
    return f"frame_{i:04d}.{ext}"


def cmd_synth(cfg: RunConfig, args) -> int:
    s = cfg.synth
    rig = make_synthetic_rig(s.rig)
    poses = bend_sequence(rig.n_joints, s.frames, seed=cfg.seed, max_angle=s.max_angle)
    camera = None if s.camera is None else np.asarray(s.camera, dtype=np.float64)
    scans = make_synthetic_scans(rig, poses, s.wrinkle, noise=s.noise, sample_count=s.points,
                                 seed=cfg.seed + 1, camera=camera)
    out = io.ensure_dir(cfg.paths.output)
    scan_dir = io.ensure_dir(cfg.paths.scans)
    gt_dir = io.ensure_dir(out / "ground_truth")
    io.ensure_dir(Path(cfg.paths.rig).parent)
    io.save_rig(cfg.paths.rig, rig)
    io.write_poses(cfg.paths.poses, poses)
    for t, (frame, gt) in enumerate(zip(scans.frames, scans.ground_truth)):
        io.write_point_cloud(scan_dir / _frame_name(t, "ply"), frame)
        io.write_obj(gt_dir / _frame_name(t, "obj"), gt)
    print(f"wrote rig, {len(poses)} poses, scans to {scan_dir} and ground truth to {gt_dir}")
    return EXIT_OK


def _load_scans(cfg: RunConfig, n: int):
    d = Path(cfg.paths.scans)
    files = sorted(d.glob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no .ply scans in {d}")
    if len(files) != n:
        raise ConfigError(f"{len(files)} scans in {d} but {n} poses in {cfg.paths.poses}")
    frames = [io.read_point_cloud(f, t) for t, f in enumerate(files)]
    if cfg.synth.camera is not None:
        frames = [replace(f, viewpoint=np.asarray(cfg.synth.camera, dtype=np.float64)) for f in frames]
    return frames


def cmd_fit(cfg: RunConfig, args) -> int:
    rig = io.load_rig(cfg.paths.rig)
    poses = io.read_poses(cfg.paths.poses, rig.n_joints)
    frames = _load_scans(cfg, len(poses))
    base = train_base(rig, frames, poses, cfg.fit)
    log.info("base mesh trained: loss %.6g -> %.6g", base.history[0]["loss"], base.history[-1]["loss"])
    pairs = build_training_pairs(base, frames, poses, k=cfg.fit.k)
    log.info("%d training pairs (%d points skipped)", len(pairs), pairs.skipped)
    detail = train_detail(base, pairs, cfg.fit)
    log.info("detail field trained: loss %.6g -> %.6g", detail.history[0]["loss"], detail.history[-1]["loss"])
    ckpt = Path(cfg.paths.checkpoint)
    io.ensure_dir(ckpt.parent)
    save_detail_model(detail, ckpt)
    with open(ckpt.with_suffix(".losses.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "loss", "e_d", "e_r", "e_a"])
        for h in base.history:
            w.writerow(["base", h["epoch"], repr(h["loss"]), repr(h["e_d"]), repr(h["e_r"]), repr(h["e_a"])])
        for h in detail.history:
            w.writerow(["detail", h["epoch"], repr(h["loss"]), "", "", ""])
    print(f"wrote {ckpt}")
    return EXIT_OK


def _poses_for(cfg: RunConfig, args, n_joints: int) -> list[Pose]:
    path = args.poses or cfg.paths.poses
    poses = io.read_poses(path, n_joints)
    if args.frames:
        poses = [poses[i] for i in args.frames]
    if args.interpolate:
        dense = []
        for a, b in zip(poses[:-1], poses[1:]):
            dense += [a.interpolate(b, t) for t in np.arange(args.interpolate + 1) / (args.interpolate + 1)]
        poses = dense + poses[-1:]
    return poses


def _detail_with_cfg(cfg: RunConfig, rig, path=None):
    detail = load_detail_model(path or cfg.paths.checkpoint, rig)
    # reconstruction settings come from the run config, the networks from the checkpoint
    fit = replace(detail.base.config, anchor_weight=cfg.fit.anchor_weight)
    detail.base.config = fit
    return detail


def _write_meshes(meshes, out_dir: Path, names=None) -> None:
    io.ensure_dir(out_dir)
    for i, m in enumerate(meshes):
        io.write_obj(out_dir / (names[i] if names else _frame_name(i, "obj")), m)


def _reconstruct_all(cfg: RunConfig, args, scale: float, sub: str) -> int:
    rig = io.load_rig(cfg.paths.rig)
    detail = _detail_with_cfg(cfg, rig)
    poses = _poses_for(cfg, args, rig.n_joints)
    meshes = [reconstruct_frame(detail, p, scale=scale) for p in poses]
    if args.dump_matrix:
        B = detail.base.subdivided(poses[0])
        io.write_matrix_market(args.dump_matrix, uniform_angle_laplacian(B).matrix)
    out = Path(args.out or Path(cfg.paths.output) / sub)
    _write_meshes(meshes, out)
    print(f"wrote {len(meshes)} meshes to {out}")
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    return _reconstruct_all(cfg, args, 1.0, "reconstruct")


def cmd_scale(cfg: RunConfig, args) -> int:
    s = cfg.scale if args.scale is None else args.scale
    return _reconstruct_all(cfg, args, s, f"scale_{s:g}")


def cmd_animate(cfg: RunConfig, args) -> int:
    return _reconstruct_all(cfg, args, cfg.scale, "animate")


def cmd_transfer(cfg: RunConfig, args) -> int:
    rig_a = io.load_rig(cfg.paths.rig)
    detail_a = _detail_with_cfg(cfg, rig_a)
    rig_b = io.load_rig(args.target_rig or cfg.paths.rig)
    target = _detail_with_cfg(cfg, rig_b, args.target or cfg.paths.checkpoint)
    poses = _poses_for(cfg, args, rig_b.n_joints)
    meshes = [transfer_details(detail_a, target.base, p, scale=cfg.scale) for p in poses]
    out = Path(args.out or Path(cfg.paths.output) / "transfer")
    _write_meshes(meshes, out)
    print(f"wrote {len(meshes)} meshes to {out}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    from .validation import format_table, run_oracles

    results = run_oracles()
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


HELP = {
    "synth": "write a synthetic capsule rig, poses, scans and ground-truth meshes",
    "fit": "train the base mesh and the detail field; write a checkpoint and a loss log",
    "reconstruct": "reconstruct detailed meshes for the given poses",
    "transfer": "rebuild the checkpoint's details on another subject's base mesh",
    "scale": "reconstruct with the detail field multiplied by --scale",
    "animate": "reconstruct a pose sequence, optionally interpolated",
    "validate": "run the operator oracle suite and print a pass/fail table",
}

COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "transfer": cmd_transfer,
    "scale": cmd_scale,
    "animate": cmd_animate,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lapfusion", description="Detailed surface reconstruction from point-cloud "
                                "sequences with neural Laplacian fields.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. fit.lam_r=0.5 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed for all randomness")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("--output", help="output directory")
    common.add_argument("--rig", help="rig file")
    common.add_argument("--poses", help="pose file")
    common.add_argument("--scans", help="directory of .ply scans")
    common.add_argument("--checkpoint", help="model checkpoint file")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name in ("reconstruct", "scale", "animate", "transfer"):
            sp.add_argument("--out", help="directory for the OBJ files")
            sp.add_argument("--frames", type=int, nargs="*", help="pose indices to use")
            sp.add_argument("--interpolate", type=int, default=0,
                            help="insert this many interpolated poses between consecutive poses")
        if name in ("reconstruct", "scale", "animate"):
            sp.add_argument("--dump-matrix", help="write the first pose's Laplacian in Matrix Market format")
        if name == "scale":
            sp.add_argument("--scale", type=float, help="multiplier s on the predicted Laplacian field")
        if name == "transfer":
            sp.add_argument("--target", help="checkpoint whose base mesh receives the details")
            sp.add_argument("--target-rig", help="rig file of the target checkpoint")
    return p


def _resolve(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    flags: dict = {}
    if args.seed is not None:
        flags.setdefault("fit", {})["seed"] = args.seed
    if args.threads is not None:
        flags["threads"] = args.threads
    if args.deterministic is not None:
        flags["deterministic"] = args.deterministic
    for key in ("output", "rig", "scans", "checkpoint"):
        if getattr(args, key) is not None:
            flags.setdefault("paths", {})[key] = getattr(args, key)
    if args.poses is not None and args.command in ("synth", "fit"):
        flags.setdefault("paths", {})["poses"] = args.poses
    if getattr(args, "scale", None) is not None:
        flags["scale"] = args.scale
    return load_config(args.config, overrides + [flags])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        threads = 1 if cfg.deterministic else cfg.threads
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, RigError, io.FormatError, CheckpointError) as exc:
        print(f"lapfusion: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"lapfusion: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"lapfusion: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
