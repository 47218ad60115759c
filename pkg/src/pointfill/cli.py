"""Command-line entry point: ``pointfill <command> ...``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
Every command prints its fully resolved settings before doing any work.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, selftest
from . import tensor as T
from .ca_decoder import export_attention
from .checkpoint import load_checkpoint, restore
from .config import PRESETS, ModelConfig, parse_assignment, resolve_config
from .dataset import (SHAPES, VIEWS, MaskSpec, apply_mask, build_dataset, load_cloud, load_dataset,
                      load_pgm, save_xyz)
from .errors import CheckpointError, ConfigError, ContractError, NumericalError, ReconError, ParseError
from .model import Batch, CrossModalReconstructor, PreparedSample, check_image, group_in_frame
from .training import TrainLog, evaluate, run_schedule, start_state

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, ContractError, CheckpointError, ParseError, FileNotFoundError, NotADirectoryError)


def _print_settings(title, items):
    print(f"# {title}")
    for key, value in items:
        print(f"{key} = {value}")


def _print_config(cfg: ModelConfig):
    print("# resolved config")
    sys.stdout.write(cfg.to_text())


def _overrides(args):
    """Command-line flags, applied last (flags > config file > defaults)."""
    values = {}
    for item in args.set or []:
        values.update(parse_assignment(item))
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return values


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    if not ckpt.checksum_ok:
        print(f"warning: checksum mismatch in {path}", file=sys.stderr)
    cfg = ckpt.config
    with T.precision(cfg.precision):
        model = restore(CrossModalReconstructor(cfg), ckpt)
    return model, ckpt


# -- commands --------------------------------------------------------------

def cmd_dataset(args):
    shapes = tuple(s.strip() for s in args.shapes.split(",") if s.strip())
    _print_settings("dataset", [("out", args.out), ("shapes", ",".join(shapes)), ("n", args.n),
                                ("count", args.count), ("seed", args.seed), ("image_size", args.image_size),
                                ("view", args.view)])
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"output path exists and is not a directory: {out}")
    try:
        rows = build_dataset(out, shapes, args.n, args.count, args.seed, args.image_size, args.view)
    except PermissionError as exc:
        raise ConfigError(f"cannot write to {out}: {exc.strerror}") from None
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_OK


def cmd_train(args):
    dataset = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and not resume.checksum_ok:
        print(f"warning: checksum mismatch in {args.resume}", file=sys.stderr)
    base = resume.config if resume is not None else None
    cfg = resolve_config(args.config, _overrides(args), base)
    _print_config(cfg)
    print(f"stage = {args.stage}")
    for sample in dataset:
        check_image(sample.image, cfg, sample.id)

    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    with T.precision(cfg.precision):
        model = CrossModalReconstructor(cfg)
        log = TrainLog()
        log.start(log_path)
        state = start_state(model, args.stage, resume, log=log, allow_stage_regression=args.allow_stage_regression)
        for w in log.warnings:
            print(f"warning: {w}", file=sys.stderr)
        run_schedule(dataset, state, cfg.epochs, log, out, cfg.checkpoint_every,
                     on_epoch=lambda s: print(f"epoch {s.epoch} stage {s.stage} loss {log.losses[-1]:.6g}"))
    print(f"checkpoint: {out}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_reconstruct(args):
    model, ckpt = _model_from_checkpoint(args.ckpt)
    cfg = model.config
    _print_config(cfg)
    _print_settings("reconstruct", [("stage", ckpt.stage), ("mask_seed", args.mask_seed)])
    cloud = load_cloud(args.cloud)
    image = load_pgm(args.image)
    check_image(image, cfg, args.image)
    grouped, centroid, scale = group_in_frame(cloud, cfg)
    masked = apply_mask(grouped, MaskSpec(cfg.mask_ratio, args.mask_seed))
    prep = PreparedSample(Path(args.cloud).stem, grouped.centers, grouped.groups, image,
                          masked.visible_idx, masked.masked_idx)
    batch = Batch.collate([prep])
    keep = args.dump_attn is not None
    if keep and ckpt.stage == 1:
        raise ContractError("--dump-attn needs a stage-2 or stage-3 checkpoint; stage 1 runs no cross-attention")
    with T.precision(cfg.precision), T.no_grad():
        recon = model(batch, stage=ckpt.stage, keep_attention=keep)
    # back to the input cloud's frame
    points = recon.points.data[0].astype(np.float64) * scale + centroid
    visible = grouped.absolute()[masked.visible_idx].reshape(-1, 3) * scale + centroid
    out = Path(args.out)
    save_xyz(out, points)
    masked_out = Path(args.masked_out) if args.masked_out else out.with_name(out.stem + ".input.xyz")
    save_xyz(masked_out, visible)
    print(f"reconstruction: {out} ({len(points)} points)")
    print(f"masked input: {masked_out} ({len(visible)} points)")
    if keep:
        export_attention(recon.fused, args.dump_attn)
        print(f"attention: {args.dump_attn}")
    return EXIT_OK


def cmd_eval(args):
    model, ckpt = _model_from_checkpoint(args.ckpt)
    _print_config(model.config)
    ratio = model.config.mask_ratio if args.mask_ratio is None else args.mask_ratio
    MaskSpec(ratio, 0)
    _print_settings("eval", [("stage", ckpt.stage), ("mask_ratio", repr(ratio)),
                             ("identity_bypass", args.identity_bypass)])
    dataset = load_dataset(args.data)
    with T.precision(model.config.precision):
        report = evaluate(dataset, model, stage=ckpt.stage, mask_ratio=ratio, identity_bypass=args.identity_bypass)
    Path(args.out).write_text(report.to_csv())
    print(f"mean chamfer_l2sq = {report.mean_l2sq!r}")
    print(f"mean chamfer_l1 = {report.mean_l1!r}")
    print(f"table: {args.out} ({len(report.rows)} rows)")
    return EXIT_OK


def cmd_tokenize(args):
    cfg = resolve_config(args.config, _overrides(args))
    _print_config(cfg)
    grouped, _, _ = group_in_frame(load_cloud(args.cloud), cfg)
    save_xyz(args.centers, grouped.centers)
    pts = grouped.absolute()
    with open(args.groups, "w") as fh:
        fh.write("group,x,y,z\n")
        for g in range(grouped.num_groups):
            for p in pts[g]:
                fh.write(f"{g},{p[0]!r},{p[1]!r},{p[2]!r}\n")
    print(f"centers: {args.centers} ({grouped.num_groups} rows)")
    print(f"groups: {args.groups} ({grouped.num_groups * grouped.group_size} rows)")
    return EXIT_OK


def cmd_selftest(args):
    _print_settings("selftest", [("inject_fault", args.inject_fault or "none")])
    return EXIT_OK if selftest.run(fault=args.inject_fault) else EXIT_RUNTIME


# -- parser ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="pointfill", description="Image-guided masked point cloud reconstruction.")
    parser.add_argument("--version", action="version", version=f"pointfill {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="synthesize paired clouds and depth renders")
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", default="sphere", help=f"comma-separated subset of {','.join(SHAPES)}")
    p.add_argument("--n", type=int, default=1024, help="points per cloud")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--view", choices=VIEWS, default="+z")
    p.set_defaults(func=cmd_dataset)

    def config_flags(p):
        p.add_argument("--config", help=f"config file or preset name ({', '.join(PRESETS)})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--data", required=True)
    config_flags(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="CSV log path (default: <out>.log.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--allow-stage-regression", action="store_true",
                   help="permit resuming into an earlier stage (ablations)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one masked cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True, help=".xyz or ASCII .ply")
    p.add_argument("--image", required=True, help="binary .pgm")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="reconstruction .xyz")
    p.add_argument("--masked-out", help="visible input points .xyz (default: <out>.input.xyz)")
    p.add_argument("--dump-attn", help="write cross-attention weights (ATTN v1)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="per-sample Chamfer table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--identity-bypass", action="store_true",
                   help="debug: pass ground truth through instead of the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tokenize", help="write FPS centers and KNN groups of a cloud")
    p.add_argument("--cloud", required=True)
    config_flags(p)
    p.add_argument("--centers", required=True, help="centers .xyz")
    p.add_argument("--groups", required=True, help="CSV of group,x,y,z")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("selftest", help="fast invariant suite")
    p.add_argument("--inject-fault", choices=selftest.FAULTS, help="debug: corrupt a backward rule")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ReconError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
