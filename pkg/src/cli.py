"""
Command-Line Interface

    python -m src.cli gen-data  --out DIR --count N --shift PRESET --seed S [--image-size H W]
    python -m src.cli train     --config FILE [--arm ARM] [--ablate dq,tw,hr,bmc] [--preset NAME] [--set k=v ...]
    python -m src.cli eval      --checkpoint CKPT --data DIR [--split val] [--domain target]
    python -m src.cli diagnose  --checkpoint CKPT --data DIR [--out DIR] [--samples N]

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
`eval` prints only the EvalReport JSON on stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from src import __version__
from src.analysis.covering_bound import bound_inputs_from_discriminator, covering_bound
from src.analysis.detection_metrics import evaluate_map
from src.analysis.domain_divergence import proxy_a_distance
from src.analysis.feature_dumps import STAGES, dump_features, layer_features
from src.config import ExperimentConfig, load_config, write_resolved_config
from src.data.dataset_io import MANIFEST_FILE, load_split, read_manifest, write_dataset
from src.data.preprocessing import DOMAIN_NAMES, IMAGE_SIZE, MAX_OBJECTS, SOURCE, SPLITS, TARGET
from src.data.synthetic_scenes import SHIFT_PRESETS, Scene, shift_preset
from src.errors import ConfigError, DivergenceError, SFAError
from src.training.trainer import (ARMS, SCENARIO_PRESETS, apply_preset, build_model, fit, load_datasets,
                                  load_trained_model)
from src.visualisation.pr_curves import write_gnuplot

logger = logging.getLogger(__name__)

DOMAINS_BY_NAME = {name: domain for domain, name in DOMAIN_NAMES.items()}
DIVERGENCE_FILE = "divergence.json"
BOUND_FILE = "bound.json"


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def check_dataset_fits(config: ExperimentConfig, data_dir: Path | str, scenes: Sequence[Scene]) -> None:
    """Raise ConfigError when the data's classes, image size or object count do not fit the model."""
    k = config.model.num_classes
    if (Path(data_dir) / MANIFEST_FILE).is_file():
        manifest = read_manifest(data_dir)
        classes = manifest.get("classes")
        if classes is not None and len(classes) != k:
            raise ConfigError(f"model has {k} classes but {data_dir} declares {len(classes)} ({', '.join(classes)})")
        size = manifest.get("image_size")
        if size is not None and tuple(size) != config.model.image_size:
            raise ConfigError(f"model expects {config.model.image_size} images but {data_dir} holds {tuple(size)}")
        most = manifest.get("max_objects")
        if most is not None and most > config.model.num_object_queries:
            raise ConfigError(f"{data_dir} has up to {most} objects per scene, "
                              f"more than the {config.model.num_object_queries} object queries")
    for scene in scenes:
        if len(scene.annotations) and int(scene.annotations.classes.max()) >= k:
            raise ConfigError(f"{scene.name}: class id {int(scene.annotations.classes.max())} "
                              f"out of range for a {k}-class model")


# === gen-data ===

def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.count < 0 or (args.val_count is not None and args.val_count < 0):
        raise ConfigError("scene counts must be non-negative")
    if min(args.image_size) < 8 or args.max_objects < 1:
        raise ConfigError("images need at least 8 pixels per side and scenes at least one object")
    manifest = write_dataset(args.out, args.count, shift_preset(args.shift), seed=args.seed,
                             val_count=args.val_count, image_size=tuple(args.image_size),
                             max_objects=args.max_objects, shift_name=args.shift)
    total = sum(entry["count"] for entry in manifest["splits"].values())
    print(f"✅ Wrote {total} scenes ({args.shift} shift) to: {Path(args.out).resolve()}")
    return 0


# === train ===

def resolve_train_config(args: argparse.Namespace) -> ExperimentConfig:
    """File, then SFA_SEED, then --preset/--ablate/--set, then the explicit flags."""
    config = load_config(args.config, env=os.environ)
    if args.preset:
        apply_preset(config, args.preset)
    if args.ablate:
        config.ablation.ablate(args.ablate.split(","))
    for assignment in args.set or ():
        config.set(assignment)
    if args.arm:
        config.train.arm = args.arm
    if args.seed is not None:
        config.train.seed = args.seed
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.data:
        config.paths.data_dir = args.data
    if args.out:
        config.paths.output_dir = args.out
    return config.validate()


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    datasets = load_datasets(config.paths.data_dir)
    check_dataset_fits(config, config.paths.data_dir, datasets.source_train + datasets.source_val)
    output_dir = Path(config.paths.output_dir)
    write_resolved_config(config, output_dir)
    logger.info("training arm %s (seed %d, %d epochs) into %s", config.train.arm, config.seed,
                config.train.epochs, output_dir)
    result = fit(datasets, config, output_dir, resume=args.resume)
    best = result.state.best_metric
    print(f"✅ Training finished after epoch {result.state.epoch}: {output_dir.resolve()}")
    if best is not None:
        print(f"📊 Best target mAP@0.5 = {best:.4f} (epoch {result.state.best_epoch})")
    return 0


# === eval ===

def cmd_eval(args: argparse.Namespace) -> int:
    model, config, _ = load_trained_model(args.checkpoint)
    scenes = load_split(args.data, DOMAINS_BY_NAME[args.domain], args.split)
    check_dataset_fits(config, args.data, scenes)
    threshold = config.train.score_threshold if args.score_threshold is None else args.score_threshold
    report = evaluate_map(model.detector, scenes, score_threshold=threshold,
                          batch_size=config.train.eval_batch_size)
    report.arm = config.train.arm
    report.checkpoint = str(args.checkpoint)
    if args.pr_out:
        write_gnuplot(report, args.pr_out)
    print(report.to_json())
    return 0


# === diagnose ===

def _sample(scenes: list[Scene], count: int | None) -> list[Scene]:
    return scenes if count is None else scenes[:count]


def divergence_by_layer(detector, source: list[Scene], target: list[Scene], seed: int) -> dict:
    """stage -> layer -> proxy A-distance of mean-pooled per-image features (None if not computable)."""
    table = {}
    for stage in STAGES:
        fs = layer_features(detector, source, stage, pooled=True)
        ft = layer_features(detector, target, stage, pooled=True)
        table[stage] = {}
        for layer in sorted(fs):
            if layer not in ft:
                table[stage][str(layer)] = None
                continue
            try:
                table[stage][str(layer)] = proxy_a_distance(fs[layer][0], ft[layer][0], seed=seed)
            except DivergenceError as exc:
                logger.warning("%s layer %d: %s", stage, layer, exc)
                table[stage][str(layer)] = None
    return table


def bound_report(model, config: ExperimentConfig, scenes: list[Scene]) -> dict:
    """Covering bound of every discriminator, relative to its re-initialised counterpart."""
    reference = build_model(config)
    stages = {"enc_discriminator": "encoder", "dec_discriminator": "decoder", "cnn_discriminator": "backbone"}
    report = {}
    for name, stage in stages.items():
        disc, ref = getattr(model, name), getattr(reference, name)
        if disc is None:
            continue
        norms = []
        for domain in (SOURCE, TARGET):
            group = [s for s in scenes if s.domain == domain]
            feats = layer_features(model.detector, group, stage) if group else {}
            # the backbone discriminator only sees the last map
            layers = [max(feats)] if stage == "backbone" and feats else sorted(feats)
            norms.extend(float(np.linalg.norm(feats[layer][0], axis=1).max()) for layer in layers)
        input_norm = max(norms) if norms else 1.0
        inputs = bound_inputs_from_discriminator(disc, ref, input_norm=max(input_norm, 1e-12))
        report[name] = {
            "spectral_norms": list(inputs.spectral_norms),
            "reference_distances": list(inputs.reference_distances),
            "width": inputs.width,
            "input_norm": inputs.input_norm,
            "epsilon": inputs.epsilon,
            "log_covering_bound": covering_bound(inputs),
        }
    return report


def cmd_diagnose(args: argparse.Namespace) -> int:
    model, config, _ = load_trained_model(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    source = _sample(load_split(args.data, SOURCE, args.split), args.samples)
    target = _sample(load_split(args.data, TARGET, args.split), args.samples)
    check_dataset_fits(config, args.data, source + target)

    for stage in STAGES:
        dump_features(model.detector, source + target, stage, out=out / f"features_{stage}.csv")

    divergence = divergence_by_layer(model.detector, source, target, seed=config.seed)
    (out / DIVERGENCE_FILE).write_text(json.dumps(divergence, indent=2) + "\n", encoding="utf-8")
    bound = bound_report(model, config, source + target)
    (out / BOUND_FILE).write_text(json.dumps(bound, indent=2) + "\n", encoding="utf-8")

    print(f"✅ Diagnostics saved to: {out.resolve()}")
    for stage, layers in divergence.items():
        values = ", ".join(f"{layer}: {'n/a' if d is None else f'{d:.3f}'}" for layer, d in layers.items())
        print(f"📊 proxy A-distance [{stage}] {values}")
    return 0


# === Parser ===

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.cli",
                                     description="Sequence feature alignment for detection transformers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings only")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate the synthetic two-domain benchmark")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, default=500, help="Train scenes per domain (default: 500)")
    gen.add_argument("--val-count", type=int, default=None, help="Val scenes per domain (default: 2/5 of count)")
    gen.add_argument("--shift", choices=sorted(SHIFT_PRESETS), default="fog", help="Target-domain shift")
    gen.add_argument("--seed", type=int, default=0, help="Base seed (default: 0)")
    gen.add_argument("--image-size", type=int, nargs=2, default=list(IMAGE_SIZE), metavar=("H", "W"),
                     help="Image height and width (default: 64 64)")
    gen.add_argument("--max-objects", type=int, default=MAX_OBJECTS, help="Objects per scene, at most (default: 5)")
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="Train one arm")
    train.add_argument("--config", default=None, help="TOML or JSON config file")
    train.add_argument("--arm", choices=ARMS, default=None, help="Override train.arm")
    train.add_argument("--ablate", default=None, help="Comma list of dq,tw,hr,bmc or single flags to switch off")
    train.add_argument("--preset", choices=sorted(SCENARIO_PRESETS), default=None, help="Loss-weight preset")
    train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Generic override (repeatable)")
    train.add_argument("--seed", type=int, default=None, help="Override the seed")
    train.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    train.add_argument("--data", default=None, help="Dataset root (paths.data_dir)")
    train.add_argument("--out", default=None, help="Run directory (paths.output_dir)")
    train.add_argument("--resume", action="store_true", help="Continue from checkpoint_last.npz")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="mAP@0.5 of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--split", choices=SPLITS, default="val")
    evaluate.add_argument("--domain", choices=sorted(DOMAINS_BY_NAME), default="target")
    evaluate.add_argument("--score-threshold", type=float, default=None)
    evaluate.add_argument("--pr-out", default=None, help="Write per-class PR curves (gnuplot format)")
    evaluate.set_defaults(handler=cmd_eval)

    diagnose = commands.add_parser("diagnose", help="Feature dumps, proxy A-distance and covering bound")
    diagnose.add_argument("--checkpoint", required=True)
    diagnose.add_argument("--data", required=True)
    diagnose.add_argument("--split", choices=SPLITS, default="val")
    diagnose.add_argument("--out", default=None, help="Output directory (default: next to the checkpoint)")
    diagnose.add_argument("--samples", type=int, default=None, help="Scenes per domain (default: whole split)")
    diagnose.set_defaults(handler=cmd_diagnose)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SFAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


__all__ = [
    "configure_logging",
    "check_dataset_fits",
    "resolve_train_config",
    "divergence_by_layer",
    "bound_report",
    "build_parser",
    "main",
]


if __name__ == "__main__":
    sys.exit(main())
