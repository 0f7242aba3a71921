"""Command-line entry point: ``bevdistill {gen,pseudo,train,infer,eval,render}``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Errors are printed to
stderr as a single line ``bevdistill: error kind=<usage|runtime> type=<name> msg=<text>``.
Log verbosity comes from the ``BEVDISTILL_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``...; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .container import DatasetError, read_array
from .featprov import ProceduralFeatureProvider
from .losses import LossWeights
from .metrics import EvalConfig, evaluate
from .pseudolabel import PseudoLabelConfig, build_pseudo_labels, read_pseudo_labels, write_pseudo_labels
from .render import pca_rgb, tracks_svg, write_ppm
from .scene import generate_scene, read_dataset, write_dataset
from .tracker import read_tracks, write_tracks
from .trainer import (
    Model,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    default_backbone,
    infer_sequence,
    load_checkpoint,
    make_sample,
    save_checkpoint,
    train,
    with_flags,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DISTILL_SWEEP = (0.0, 3.0, 7.0, 14.0)

log = logging.getLogger("bevdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(kind: str, exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"bevdistill: error kind={kind} type={type(exc).__name__} msg={msg}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    scene = generate_scene(args.seed, args.frames, args.objects, args.cameras)
    write_dataset(scene, args.out, render=not args.no_render)
    print(f"scene written to {args.out} ({len(scene)} frames)")
    return EXIT_OK


def pseudo_config(args) -> PseudoLabelConfig:
    return PseudoLabelConfig(accumulate=not args.no_accumulate, dynamic=not args.no_dynamic, causal=args.causal)


def foundation_provider(scene) -> ProceduralFeatureProvider:
    return ProceduralFeatureProvider(scene.config.seed, scene.config.feature_channels)


def cmd_pseudo(args) -> int:
    scene = read_dataset(args.scene)
    cfg = pseudo_config(args)
    labels = build_pseudo_labels(scene, foundation_provider(scene), cfg)
    write_pseudo_labels(args.scene, labels, cfg)
    cov = [lab.coverage for lab in labels]
    print(f"pseudo-labels written: coverage per frame {cov} total {sum(cov)}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig.overfit() if args.preset == "overfit" else TrainConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown train config keys {sorted(unknown)}")
        if "weights" in raw:
            raw["weights"] = LossWeights(**raw["weights"])
        if "betas" in raw:
            raw["betas"] = tuple(raw["betas"])
        cfg = replace(cfg, **raw)
    over = {}
    if args.steps is not None:
        over["steps"] = args.steps
    if args.lr is not None:
        over["lr"] = args.lr
    if args.seed is not None:
        over["seed"] = args.seed
    if args.distill_weight is not None:
        over["weights"] = replace(cfg.weights, distill=args.distill_weight)
    return replace(cfg, **over) if over else cfg


def cmd_train(args) -> int:
    if args.no_bev and args.no_pv:
        raise UsageError("--no-bev and --no-pv together leave the decoder without features")
    cfg = _load_train_config(args)
    model_cfg = with_flags(ModelConfig(seed=cfg.seed), use_bev=not args.no_bev, use_pv=not args.no_pv)
    model = Model(model_cfg)
    sequences = []
    for d in args.scenes:
        scene = read_dataset(d)
        labels = read_pseudo_labels(d) if model_cfg.decoder.use_bev and cfg.weights.distill > 0 else [None] * len(scene)
        if len(labels) != len(scene):
            raise DatasetError(f"{d}: {len(labels)} pseudo-label grids for {len(scene)} frames")
        backbone = default_backbone(scene.config.seed, model_cfg.lift.image_channels)
        sequences.append([make_sample(f, backbone, model_cfg, lab) for f, lab in zip(scene.frames, labels)])
    result = train(model, sequences, cfg)
    out = Path(args.out)
    save_checkpoint(out, model, {"train": {"steps": cfg.steps, "lr": cfg.lr, "optimizer": cfg.optimizer, "distill_weight": cfg.weights.distill}})
    keys = ["step", "total", "det", "distill", "depth", "lr", "grad_norm"]
    lines = [",".join(keys)] + [",".join(repr(float(h.get(k, 0.0))) for k in keys) for h in result.history]
    (out / "loss.csv").write_text("\n".join(lines) + "\n")
    last = result.history[-1]
    print(f"checkpoint written to {out}: {result.steps} steps, final loss {last['total']:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    scene = read_dataset(args.scene)
    backbone = default_backbone(scene.config.seed, model.cfg.lift.image_channels)
    tracks = infer_sequence(model, scene, backbone, args.tau)
    write_tracks(args.out, tracks)
    n = sum(len(v) for v in tracks.frames.values())
    print(f"{n} track records written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    tracks = read_tracks(args.tracks)
    scene = read_dataset(args.scene)
    report = evaluate(tracks, scene.frames, EvalConfig())
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out + ".txt").write_text(text)
        Path(args.out + ".csv").write_text(report.to_csv())
    return EXIT_OK


def cmd_render(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    if src.is_dir() and (src / "pseudolabels" / "pseudolabels.json").exists():
        src = src / "pseudolabels"
    if src.is_dir() and (src / "pseudolabels.json").exists():
        out.mkdir(parents=True, exist_ok=True)
        labels = read_pseudo_labels(src.parent)
        for k, lab in enumerate(labels):
            write_ppm(out / f"pseudo_{k}.ppm", pca_rgb(lab.grid, lab.valid_mask), args.upscale)
        print(f"{len(labels)} images written to {out}")
    elif src.suffix == ".bin":
        grid = read_array(src).astype(np.float64)
        if grid.ndim == 2:
            grid = grid[..., None]
        if grid.ndim != 3:
            raise ValueError(f"{src}: expected an H×W×C grid, got shape {grid.shape}")
        write_ppm(out, pca_rgb(grid), args.upscale)
        print(f"image written to {out}")
    elif src.is_file():
        out.write_text(tracks_svg(read_tracks(src), args.extent))
        print(f"image written to {out}")
    else:
        raise FileNotFoundError(f"nothing to render at {src}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevdistill", description="BEV distillation and query-propagation tracking pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=6)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--cameras", type=int, default=6)
    g.add_argument("--out", required=True)
    g.add_argument("--no-render", action="store_true", help="skip the per-camera depth images")
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("pseudo", help="build BEV pseudo-labels for a scene")
    q.add_argument("scene")
    q.add_argument("--no-accumulate", action="store_true", help="use only the current frame's points")
    q.add_argument("--no-dynamic", action="store_true", help="drop points on moving objects")
    q.add_argument("--causal", action="store_true", help="accumulate past frames only")
    q.set_defaults(func=cmd_pseudo)

    t = sub.add_parser("train", help="train a model on one or more scenes")
    t.add_argument("scenes", nargs="+")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--preset", choices=("default", "overfit"), default="default")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--distill-weight", type=float, help=f"distillation loss weight (sweep values {DISTILL_SWEEP})")
    t.add_argument("--no-bev", action="store_true", help="drop the BEV branch")
    t.add_argument("--no-pv", action="store_true", help="drop perspective-view aggregation")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a checkpoint over a scene and write tracks")
    i.add_argument("scene")
    i.add_argument("checkpoint")
    i.add_argument("--out", required=True)
    i.add_argument("--tau", type=float, default=0.4, help="confidence threshold for reporting")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a track file against a scene's ground truth")
    e.add_argument("tracks")
    e.add_argument("scene")
    e.add_argument("--out", help="prefix for <out>.txt and <out>.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a pseudo-label set, a grid array or a track file")
    r.add_argument("input")
    r.add_argument("--out", required=True)
    r.add_argument("--upscale", type=int, default=8)
    r.add_argument("--extent", type=float, default=24.0)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("BEVDISTILL_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(_error_line("usage", exc), file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError, ValueError, KeyError, TrainingDiverged) as exc:
        print(_error_line("runtime", exc), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
