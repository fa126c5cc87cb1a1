"""Command-line entry point: generate, train, extract, eval and ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NumericError
from .config import MODES, ConfigError, RunConfig, describe_defaults
from .depth_normals import DepthDataError, estimate_dataset_normals
from .field import SdfFieldModel
from .mesh import MetricError, evaluate_meshes, read_obj, write_metrics, write_obj
from .scene import DEPTH_MODES, SHAPES, generate_dataset, load_dataset, make_shape, save_dataset
from .train import TrainingDiverged

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("nisurf")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config_help() -> str:
    return "config keys (section.key = default):\n" + describe_defaults()


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(
        prog="nisurf",
        description="Reconstruct SDF surfaces from images and depth-derived normals on synthetic scenes.",
        epilog=_config_help(),
        formatter_class=fmt,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--shape", choices=sorted(SHAPES), default="sphere")
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--depth-mode", choices=DEPTH_MODES, default="metric")
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a field on a dataset", epilog=_config_help(), formatter_class=fmt)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON run config; omitted keys take their defaults")
    t.add_argument("--mode", choices=MODES, help="overrides train.mode")
    t.add_argument("--steps", type=int, help="overrides train.steps")
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint or a dataset's analytic shape")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--data", help="dataset directory; extracts its ground-truth shape")
    e.add_argument("--res", type=int, default=128)
    e.add_argument("--out", required=True)

    v = sub.add_parser("eval", help="Chamfer distance and normal MAE between two OBJ meshes")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--samples", type=int, default=100000)
    v.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train every normal mode with one seed and compare",
                       epilog=_config_help(), formatter_class=fmt)
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--steps", type=int, help="overrides train.steps")
    a.add_argument("--out", required=True)
    a.add_argument("--threads", type=int, default=1)
    return p


def _load_config(path, parser) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        parser.error(str(exc))
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}", EXIT_IO) from exc


def cmd_generate(args, parser) -> None:
    if args.views < 2:
        parser.error("--views must be at least 2")
    if args.res < 8:
        parser.error("--res must be at least 8")
    if args.noise < 0:
        parser.error("--noise must be non-negative")
    ds = generate_dataset(make_shape(args.shape), args.views, args.res, args.depth_mode, args.noise, args.seed)
    estimate_dataset_normals(ds)
    save_dataset(ds, args.out)
    fg = sum(int(v.mask.sum()) for v in ds.views)
    print(f"generated {args.shape}: {args.views} views at {args.res}x{args.res}, "
          f"depth={args.depth_mode}, {fg} foreground pixels -> {args.out}")


def _prepare_training(args, parser):
    cfg = _load_config(args.config, parser)
    if getattr(args, "mode", None):
        cfg.train.mode = args.mode
    if args.steps is not None:
        if args.steps < 1:
            parser.error("--steps must be positive")
        cfg.train.steps = args.steps
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return cfg, _load_data(args.data)


def cmd_train(args, parser) -> None:
    from .pipeline import train_model

    cfg, ds = _prepare_training(args, parser)
    trainer, records = train_model(ds, cfg, args.out, args.threads)
    last = records[-1] if records else None
    summary = f"trained {len(records)} steps (mode={cfg.train.mode})"
    if last:
        summary += f"; final L_color={last.L_color:.5g} L_eik={last.L_eik:.5g} L_dnc={last.L_dnc:.5g} s={last.s:.4g}"
    print(summary + f" -> {args.out}")


def cmd_extract(args, parser) -> None:
    from .pipeline import extract_mesh, ground_truth_mesh

    if args.res < 8:
        parser.error("--res must be at least 8")
    if args.checkpoint:
        try:
            model, step = SdfFieldModel.load(args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load checkpoint: {exc}", EXIT_IO) from exc
        mesh = extract_mesh(model, args.res)
    else:
        ds = _load_data(args.data)
        if ds.shape is None:
            raise CliError(f"{args.data} records no analytic shape", EXIT_IO)
        mesh = ground_truth_mesh(ds.shape, args.res)
    write_obj(mesh, args.out)
    print(f"extracted {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")


def cmd_eval(args, parser) -> None:
    try:
        pred, gt = read_obj(args.pred), read_obj(args.gt)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read mesh: {exc}", EXIT_IO) from exc
    metrics = evaluate_meshes(pred, gt, args.samples, args.seed)
    write_metrics(metrics, args.out)
    print(f"chamfer={metrics['chamfer']:.6g} normal_mae={metrics['normal_mae_deg']:.4g} deg -> {args.out}")


def cmd_ablate(args, parser) -> None:
    from .pipeline import run_ablation
    from .report import write_table

    cfg, ds = _prepare_training(args, parser)
    rows = run_ablation(ds, cfg, args.out, args.threads)
    write_table(rows, sys.stdout)
    print(f"ablation table -> {Path(args.out) / 'ablation.tsv'}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "extract": cmd_extract,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args, parser)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NumericError, MetricError, DepthDataError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; diagnostics: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
