#!/usr/bin/env python3
"""
Command-line front end.

    python -m scripts.cli dataset    --config cfg.json --out data/blob
    python -m scripts.cli synthesize --image img.png [--mask m.png] [--task source] --out out/
    python -m scripts.cli train      --manifest data/blob --out runs/blob.ckpt [--steps N] [--tasks a,b] [--ablation]
    python -m scripts.cli eval       --checkpoint runs/blob.ckpt --manifest data/ring --out report.json [--transfer]
    python -m scripts.cli gradcheck  [--coords 64]

Every subcommand accepts --config, --seed, --threads and --log-level.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

import argparse
import itertools
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
from dotenv import load_dotenv
from loguru import logger

from scripts.encoders import DualEncoder, init_frozen
from scripts.errors import ConfigError, MediProbeError
from scripts.evalkit import evaluate, transfer_eval
from scripts.phantom_data import DatasetManifest, build_dataset, generate_phantom, load_image, load_mask, save_image, save_mask
from scripts.prompt_adapter import PromptAdapterModel
from scripts.run_config import LOG_LEVEL_ENV, RunConfig, resolve_config
from scripts.seeding import derive_seed, make_rng
from scripts.synthesis import draw_task_parameters, sample_mask_for_task, sample_task, synthesize
from scripts.trainer import (
    SupportSet,
    TrainConfig,
    grad_check,
    load_checkpoint,
    resolve_tasks,
    sample_episode,
    save_checkpoint,
    train,
    write_loss_history,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
GRADCHECK_TOLERANCE = 1e-4
LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def configure_logging(level: Optional[str] = None) -> None:
    load_dotenv()
    level = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    logger.remove()
    logger.add(sys.stdout, format=LOG_FORMAT, level=level)


def write_provenance(out_dir: Path, config: RunConfig, command: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}_provenance.json"
    record = {"command": command, "seed": config.seed, "config_digest": config.digest(), "config": config.to_dict()}
    record.update(extra or {})
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def cmd_dataset(config: RunConfig, args: argparse.Namespace) -> int:
    data = config.data
    out_dir = Path(args.out)
    manifest = build_dataset(
        data.phantom_family(),
        k=data.k,
        n_test_normal=data.n_test_normal,
        n_test_anomaly=data.n_test_anomaly,
        seed=config.seed,
        out_dir=out_dir,
        size=data.size,
        synthesis_config=config.synthesis,
    )
    write_provenance(out_dir, config, "dataset")
    print(f"Dataset written to {manifest.root} ({len(manifest.train)} train, "
          f"{len(manifest.test_normal)}+{len(manifest.test_anomaly)} test)")
    return EXIT_OK


def cmd_synthesize(config: RunConfig, args: argparse.Namespace) -> int:
    X = load_image(args.image)
    if X.shape[0] != X.shape[1]:
        raise UsageError(f"synthesize needs a square image, got {X.shape}")
    synthesis = config.synthesis
    if args.task:
        task = resolve_tasks(args.task)[0]
    else:
        task = sample_task(make_rng(config.seed, "cli-task"), synthesis.tasks, synthesis.weights())
    if args.mask:
        Y = load_mask(args.mask)
    else:
        Y = sample_mask_for_task(task, derive_seed(config.seed, "cli-mask"), X.shape[0], synthesis)

    apply_seed = derive_seed(config.seed, "cli-apply")
    X_hat = synthesize(X, Y, task, apply_seed, synthesis)
    out_dir = Path(args.out)
    save_image(X_hat, out_dir / "synthesized.png")
    save_mask(Y, out_dir / "mask.png")
    parameters = draw_task_parameters(task, apply_seed, synthesis)
    write_provenance(out_dir, config, "synthesize", {"task": task.value, "parameters": parameters})
    print(json.dumps({"task": task.value, "parameters": parameters, "area": Y.area_fraction}))
    return EXIT_OK


def _train_one(
    config: RunConfig, support: SupportSet, manifest: DatasetManifest, checkpoint: Path, encoders: DualEncoder
) -> Tuple[PromptAdapterModel, Path]:
    model = config.build_model(encoders)
    model, history = train(support, model, config.train, config.synthesis)
    loss_csv = checkpoint.with_name(f"{checkpoint.stem}_loss.csv")
    write_loss_history(history, loss_csv)
    metadata = {
        "steps": config.train.steps,
        "seed": config.seed,
        "family": manifest.family,
        "tasks": [t.value for t in config.synthesis.tasks],
        "loss_csv": loss_csv.name,
        "config_digest": config.digest(),
    }
    return model, save_checkpoint(model, checkpoint, metadata)


def ablation_variants(tasks) -> List[tuple]:
    """Every non-empty subset of the enabled tasks, singles first."""
    return [combo for r in range(1, len(tasks) + 1) for combo in itertools.combinations(tasks, r)]


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    if args.steps is not None:
        config.train.steps = args.steps
    if args.tasks:
        config = config.with_tasks(resolve_tasks(args.tasks))
    config.validate()
    manifest = DatasetManifest.load(args.manifest)
    support = SupportSet.from_manifest(manifest)
    encoders = init_frozen(config.encoder, config.encoder_seed)

    if not args.ablation:
        _, checkpoint = _train_one(config, support, manifest, Path(args.out), encoders)
        write_provenance(checkpoint.parent, config, "train", {"checkpoint": checkpoint.name})
        print(f"Checkpoint written to {checkpoint}")
        return EXIT_OK

    out_dir = Path(args.out)
    rows = []
    for variant in ablation_variants(config.synthesis.tasks):
        name = "+".join(t.value for t in variant)
        logger.info(f"Ablation variant: {name}")
        variant_config = config.with_tasks(variant)
        model, checkpoint = _train_one(variant_config, support, manifest, out_dir / f"{name}.ckpt", encoders)
        model_report = evaluate(model, manifest, provenance={"variant": name, "checkpoint": checkpoint.name})
        model_report.save(out_dir / f"{name}_report.json")
        rows.append({"variant": name, "image_auroc": model_report.image_auroc, "pixel_auroc": model_report.pixel_auroc})
    summary = pd.DataFrame(rows, columns=["variant", "image_auroc", "pixel_auroc"])
    summary.to_csv(out_dir / "ablation.csv", index=False)
    write_provenance(out_dir, config, "train", {"ablation": [row["variant"] for row in rows]})
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.transfer or args.baseline:
        report = transfer_eval(args.checkpoint, manifest, include_baseline=True, heatmap_dir=args.heatmaps)
    else:
        model, metadata = load_checkpoint(args.checkpoint)
        provenance = {
            "checkpoint": str(args.checkpoint),
            "train_family": metadata.get("family"),
            "test_family": manifest.family,
            "train_seed": metadata.get("seed"),
            "dataset_seed": manifest.seed,
            "config_digest": metadata.get("config_digest"),
        }
        report = evaluate(model, manifest, args.heatmaps, provenance)
    report.save(args.out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "scores"}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> int:
    family = config.data.phantom_family()
    size = config.encoder.image_size
    images = [generate_phantom(family, derive_seed(config.seed, "gradcheck-support", i), size) for i in range(2)]
    support = SupportSet(images=images)
    encoders = init_frozen(config.encoder, config.encoder_seed)
    model = config.build_model(encoders)
    episode_config = TrainConfig(batch_size=args.batch, p_empty=config.train.p_empty, seed=config.seed)
    batch = sample_episode(support, make_rng(config.seed, "gradcheck"), episode_config, size, config.synthesis)
    error = grad_check(model, batch, h=args.h, coords=args.coords, seed=config.seed)
    print(f"max relative error: {error:.3e}")
    if error >= GRADCHECK_TOLERANCE:
        logger.error(f"Gradient check failed: {error:.3e} >= {GRADCHECK_TOLERANCE}")
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="Override the run seed")
    common.add_argument("--threads", type=int, help="Cap torch and synthesis worker threads")
    common.add_argument("--log-level", help=f"Log level (default INFO or ${LOG_LEVEL_ENV})")

    parser = _Parser(prog="mediprobe", description="Few-shot anomaly detection on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", parents=[common], help="Generate a phantom dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="Synthesize one anomaly")
    p.add_argument("--image", required=True)
    p.add_argument("--mask")
    p.add_argument("--task", choices=["cutpaste", "gauss_intensity_change", "source"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="Train prompts and adapters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="Checkpoint path (a directory with --ablation)")
    p.add_argument("--steps", type=int)
    p.add_argument("--tasks", help="Comma-separated subset of synthesis tasks")
    p.add_argument("--ablation", action="store_true", help="Train one model per task subset")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--transfer", action="store_true", help="Cross-family report with untrained baseline")
    p.add_argument("--baseline", action="store_true", help="Add untrained-baseline metrics")
    p.add_argument("--heatmaps", help="Directory for per-image heatmap PNGs")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=2)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"mediprobe: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    configure_logging(args.log_level)
    try:
        config = resolve_config(args.config, seed=args.seed, threads=args.threads)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    torch.set_num_threads(config.train.threads)

    try:
        return COMMANDS[args.command](config, args)
    except (UsageError, ConfigError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except (MediProbeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
