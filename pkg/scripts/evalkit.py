"""
Inference, AUROC metrics and the cross-family transfer harness.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from PIL import Image as PILImage
from scipy.stats import rankdata

from scripts.encoders import DualEncoder
from scripts.errors import ShapeError, UndefinedMetricError
from scripts.mask_gen import AnomalyMask
from scripts.phantom_data import DatasetManifest, Image, load_image, load_mask
from scripts.prompt_adapter import PromptAdapterModel
from scripts.trainer import load_checkpoint, resize_pair

INFERENCE_BATCH = 16


@dataclass
class AnomalyResult:
    anomaly_map: np.ndarray
    score: float


@dataclass
class EvalReport:
    """Metrics of one evaluation; pixel AUROC is None when the split has no anomaly pixels."""

    image_auroc: Optional[float]
    pixel_auroc: Optional[float]
    scores: pd.DataFrame = field(repr=False)
    provenance: Dict[str, Any] = field(default_factory=dict)
    baseline_image_auroc: Optional[float] = None
    baseline_pixel_auroc: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_auroc": self.image_auroc,
            "pixel_auroc": self.pixel_auroc,
            "baseline_image_auroc": self.baseline_image_auroc,
            "baseline_pixel_auroc": self.baseline_pixel_auroc,
            "provenance": self.provenance,
            "scores": self.scores.to_dict(orient="records"),
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        logger.info(f"Evaluation report written to {path}")
        return path


def _check_query(query: np.ndarray, model: PromptAdapterModel) -> None:
    size = model.image_size
    if query.shape[-2:] != (size, size):
        logger.error(f"Query of shape {query.shape} does not match the {size}x{size} encoder input")
        raise ShapeError(f"expected {size}x{size} query, got {query.shape}")


def infer(query: Image, model: PromptAdapterModel) -> AnomalyResult:
    """
    Anomaly map S_a of one query image and its image score max(S_a).

    Raises:
        ShapeError: If the query is not image_size × image_size
    """
    query = np.asarray(query)
    if query.ndim != 2:
        raise ShapeError(f"expected a 2-D query image, got shape {query.shape}")
    _check_query(query, model)
    with torch.no_grad():
        maps = model(torch.as_tensor(query, dtype=model.encoders.dtype))
    anomaly = maps.anomaly.cpu().numpy()
    return AnomalyResult(anomaly_map=anomaly, score=float(anomaly.max()))


def infer_many(queries: Sequence[Image], model: PromptAdapterModel) -> List[AnomalyResult]:
    """Batched `infer`; the text features are computed once per batch."""
    results = []
    for start in range(0, len(queries), INFERENCE_BATCH):
        chunk = np.stack([np.asarray(q) for q in queries[start:start + INFERENCE_BATCH]])
        _check_query(chunk, model)
        with torch.no_grad():
            maps = model(torch.as_tensor(chunk, dtype=model.encoders.dtype))
        for anomaly in maps.anomaly.cpu().numpy():
            results.append(AnomalyResult(anomaly_map=anomaly, score=float(anomaly.max())))
    return results


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Normalized Mann-Whitney U: P(anomaly score > normal score), ties counted half.

    Raises:
        UndefinedMetricError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    positive = labels == 1
    if not np.all(positive | (labels == 0)):
        raise UndefinedMetricError("labels must be 0 or 1")
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[Union[AnomalyMask, np.ndarray]]) -> float:
    """AUROC over the pooled pixels of all images; mask pixels are the positives."""
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps but {len(masks)} masks")
    pooled_scores, pooled_labels = [], []
    for anomaly_map, mask in zip(maps, masks):
        values = mask.values if isinstance(mask, AnomalyMask) else np.asarray(mask)
        anomaly_map = np.asarray(anomaly_map)
        if anomaly_map.shape != values.shape:
            raise ShapeError(f"map {anomaly_map.shape} and mask {values.shape} differ")
        pooled_scores.append(anomaly_map.ravel())
        pooled_labels.append((values.ravel() > 0).astype(np.int8))
    return auroc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))


def save_heatmap(anomaly_map: np.ndarray, path: Union[str, Path]) -> Path:
    """S_a scaled linearly to 8-bit grayscale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.asarray(anomaly_map, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(pixels).save(path)
    return path


def _metric_or_none(metric, *args) -> Optional[float]:
    try:
        return metric(*args)
    except UndefinedMetricError as e:
        logger.warning(f"{metric.__name__} undefined on this split: {e}")
        return None


def evaluate(
    model: PromptAdapterModel,
    manifest: DatasetManifest,
    heatmap_dir: Optional[Union[str, Path]] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """
    Run `infer` over the manifest's test split.

    Normal test images contribute all-negative masks to the pixel population. Images and
    masks are resized to the encoder input the same way training episodes are.
    """
    paths = list(manifest.test_normal) + [entry["image"] for entry in manifest.test_anomaly]
    labels = [0] * len(manifest.test_normal) + [1] * len(manifest.test_anomaly)
    logger.info(f"Evaluating {len(manifest.test_normal)} normal and {len(manifest.test_anomaly)} anomalous images")

    pairs = []
    for rel in manifest.test_normal:
        image = load_image(manifest.resolve(rel))
        pairs.append(resize_pair(image, AnomalyMask.empty(image.shape), model.image_size))
    for entry in manifest.test_anomaly:
        image, mask = load_image(manifest.resolve(entry["image"])), load_mask(manifest.resolve(entry["mask"]))
        pairs.append(resize_pair(image, mask, model.image_size))
    if manifest.size != model.image_size:
        logger.info(f"Resized {manifest.size}x{manifest.size} test images to the {model.image_size}px encoder input")
    images = [image for image, _ in pairs]
    masks = [mask for _, mask in pairs]
    results = infer_many(images, model)

    if heatmap_dir is not None:
        for rel, result in zip(paths, results):
            save_heatmap(result.anomaly_map, Path(heatmap_dir) / f"{Path(rel).stem}_heatmap.png")
        logger.info(f"{len(results)} heatmaps written to {heatmap_dir}")

    scores = pd.DataFrame({"image": paths, "label": labels, "score": [r.score for r in results]})
    image_metric = _metric_or_none(auroc, scores.score.to_numpy(), scores.label.to_numpy())
    pixel_metric = None
    if manifest.test_anomaly:
        pixel_metric = _metric_or_none(pixel_auroc, [r.anomaly_map for r in results], masks)
    logger.info(f"Image AUROC: {image_metric}, pixel AUROC: {pixel_metric}")
    return EvalReport(
        image_auroc=image_metric,
        pixel_auroc=pixel_metric,
        scores=scores,
        provenance=dict(provenance or {}),
    )


def transfer_eval(
    checkpoint: Union[str, Path],
    manifest: DatasetManifest,
    encoders: Optional[DualEncoder] = None,
    include_baseline: bool = True,
    heatmap_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """
    Evaluate a checkpoint trained on one phantom family on another family's test split.

    With `include_baseline`, the untrained model (same init seed) is evaluated on the
    same split and its metrics are added to the report.
    """
    model, metadata = load_checkpoint(checkpoint, encoders)
    train_family = metadata.get("family")
    if train_family == manifest.family:
        logger.warning(f"Train and test family are both '{manifest.family}'; reporting the diagonal case")

    provenance = {
        "checkpoint": str(checkpoint),
        "train_family": train_family,
        "test_family": manifest.family,
        "train_seed": metadata.get("seed"),
        "dataset_seed": manifest.seed,
        "encoder_seed": model.encoders.seed,
        "init_seed": model.init_seed,
        "config_digest": metadata.get("config_digest"),
    }
    report = evaluate(model, manifest, heatmap_dir, provenance)
    if include_baseline:
        logger.info("Evaluating the untrained baseline")
        baseline = evaluate(PromptAdapterModel(model.encoders, **model.settings()), manifest)
        report.baseline_image_auroc = baseline.image_auroc
        report.baseline_pixel_auroc = baseline.pixel_auroc
    return report
