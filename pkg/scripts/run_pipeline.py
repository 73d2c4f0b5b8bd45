#!/usr/bin/env python3
"""
Main orchestrator script for the MediProbe pipeline.

This script coordinates one complete run:
1. Generate the phantom dataset
2. Train prompts and adapters on the k-shot support set
3. Evaluate the checkpoint (with the untrained baseline) on the held-out split

Errors in any step are logged and turn the run into a failure.
"""

import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

from loguru import logger

from scripts.cli import configure_logging, write_provenance
from scripts.encoders import init_frozen
from scripts.evalkit import transfer_eval
from scripts.phantom_data import build_dataset
from scripts.run_config import RunConfig, resolve_config
from scripts.trainer import SupportSet, save_checkpoint, train, write_loss_history


def run_pipeline(config: RunConfig, workdir: Union[str, Path]) -> bool:
    """Run dataset → train → eval under `workdir`; returns True on success."""
    start_time = time.time()
    workdir = Path(workdir)
    logger.info(f"Starting MediProbe pipeline at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    # Step 1: Generate dataset
    logger.info("Step 1: Generating phantom dataset")
    try:
        data = config.data
        manifest = build_dataset(
            data.phantom_family(),
            k=data.k,
            n_test_normal=data.n_test_normal,
            n_test_anomaly=data.n_test_anomaly,
            seed=config.seed,
            out_dir=workdir / "data",
            size=data.size,
            synthesis_config=config.synthesis,
        )
    except Exception as e:
        logger.error(f"Error in dataset step: {e}")
        return False

    # Step 2: Train
    logger.info("Step 2: Training prompts and adapters")
    checkpoint = workdir / "model.ckpt"
    try:
        encoders = init_frozen(config.encoder, config.encoder_seed)
        model = config.build_model(encoders)
        model, history = train(SupportSet.from_manifest(manifest), model, config.train, config.synthesis)
        write_loss_history(history, workdir / "model_loss.csv")
        save_checkpoint(
            model,
            checkpoint,
            {
                "steps": config.train.steps,
                "seed": config.seed,
                "family": manifest.family,
                "loss_csv": "model_loss.csv",
                "config_digest": config.digest(),
            },
        )
    except Exception as e:
        logger.error(f"Error in train step: {e}")
        return False

    # Step 3: Evaluate
    logger.info("Step 3: Evaluating on the held-out split")
    try:
        report = transfer_eval(checkpoint, manifest, encoders, include_baseline=True)
        report.save(workdir / "report.json")
    except Exception as e:
        logger.error(f"Error in eval step: {e}")
        return False

    write_provenance(workdir, config, "pipeline")
    execution_time = time.time() - start_time
    logger.info(f"Pipeline completed successfully in {execution_time:.2f} seconds")
    return True


def main(config_path: Optional[str] = None, workdir: str = "runs/latest") -> bool:
    configure_logging()
    try:
        config = resolve_config(config_path)
    except Exception as e:
        logger.error(f"Cannot load configuration: {e}")
        return False
    return run_pipeline(config, workdir)


if __name__ == "__main__":
    success = main(*sys.argv[1:3])
    sys.exit(0 if success else 1)
