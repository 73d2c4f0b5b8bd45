"""
This module generates deterministic "phantom" medical-style images and handles all
image and dataset I/O.

Phantoms stand in for real scans: a smooth background gradient plus organ-like
structures (Gaussian blobs or elliptic rings) and faint pixel noise. A dataset is a
directory of 8-bit grayscale PNGs described by a `manifest.json`:
- train: k normal images (the support set)
- test_normal: held-out normal images
- test_anomaly: held-out images with synthesized lesions, each paired with its mask
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from scripts.errors import ImageFormatError, PlacementError, RejectedInputError
from scripts.mask_gen import AnomalyMask
from scripts.seeding import derive_seed, make_rng
from scripts.synthesis import (
    Image,
    SynthesisConfig,
    sample_mask_for_task,
    sample_task,
    synthesize,
)

MIN_IMAGE_SIZE = 16
MANIFEST_NAME = "manifest.json"
MAX_SYNTHESIS_RETRIES = 8


class FamilyId(str, Enum):
    BLOB = "blob"
    RING = "ring"


@dataclass(frozen=True)
class PhantomFamily:
    """Generation parameters of one phantom family (one imaging "modality")."""

    family_id: FamilyId
    background_range: Tuple[float, float] = (0.05, 0.35)
    structure_count_range: Tuple[int, int] = (3, 8)
    # blob sigma / ring semi-axis as a fraction of the image side
    structure_scale_range: Tuple[float, float] = (0.08, 0.20)
    amplitude_range: Tuple[float, float] = (0.2, 0.5)
    ring_width_range: Tuple[float, float] = (0.04, 0.08)
    noise_amplitude: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "family_id", FamilyId(self.family_id))
        if not 0.0 <= self.noise_amplitude < 0.1:
            raise RejectedInputError(f"noise amplitude must lie in [0, 0.1), got {self.noise_amplitude}")

    @classmethod
    def named(cls, name: Union[str, FamilyId]) -> "PhantomFamily":
        family_id = FamilyId(name)
        if family_id == FamilyId.RING:
            return cls(family_id=family_id, structure_count_range=(1, 3), structure_scale_range=(0.15, 0.35))
        return cls(family_id=family_id)


@dataclass
class DatasetManifest:
    """
    Paths of one generated dataset, stored relative to `root`.

    test_anomaly entries are {"image": ..., "mask": ...}.
    """

    family: str
    seed: int
    train: List[str]
    test_normal: List[str]
    test_anomaly: List[Dict[str, str]]
    size: int = 64
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "seed": self.seed,
            "size": self.size,
            "train": list(self.train),
            "test_normal": list(self.test_normal),
            "test_anomaly": [dict(entry) for entry in self.test_anomaly],
        }

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def validate(self) -> None:
        """Check split hygiene and the one-mask-per-anomaly rule."""
        train = set(self.train)
        test = set(self.test_normal) | {entry["image"] for entry in self.test_anomaly}
        overlap = train & test
        if overlap:
            raise RejectedInputError(f"paths in both train and test: {sorted(overlap)[:3]}")
        for entry in self.test_anomaly:
            if not entry.get("mask"):
                raise RejectedInputError(f"test anomaly {entry.get('image')} has no mask")

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text())
            manifest = cls(
                family=data["family"],
                seed=int(data["seed"]),
                train=list(data["train"]),
                test_normal=list(data["test_normal"]),
                test_anomaly=[dict(entry) for entry in data["test_anomaly"]],
                size=int(data.get("size", 64)),
                root=path.parent,
            )
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            logger.error(f"Invalid manifest at {path}: {e}")
            raise RejectedInputError(f"invalid manifest {path}: {e}") from e
        manifest.validate()
        return manifest


def generate_phantom(family: PhantomFamily, seed: int, size: int) -> Image:
    """
    Deterministic phantom image.

    Args:
        family: Phantom family parameters
        seed: Image seed
        size: Side length in pixels (>= 16)

    Returns:
        size×size float64 array in [0, 1]

    Raises:
        RejectedInputError: If size < 16
    """
    if size < MIN_IMAGE_SIZE:
        logger.error(f"Phantom size {size} is below the minimum of {MIN_IMAGE_SIZE}")
        raise RejectedInputError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")

    rng = make_rng(seed, "phantom", family.family_id.value)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)

    # Background: linear gradient with a random orientation
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    low, high = np.sort(rng.uniform(*family.background_range, size=2))
    image = low + (high - low) * ramp

    count = int(rng.integers(family.structure_count_range[0], family.structure_count_range[1] + 1))
    for _ in range(count):
        amplitude = rng.uniform(*family.amplitude_range)
        if family.family_id == FamilyId.BLOB:
            center = rng.uniform(0.15, 0.85, size=2) * size
            sigma = rng.uniform(*family.structure_scale_range) * size
            dist2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
            image += amplitude * np.exp(-dist2 / (2.0 * sigma**2))
        else:
            center = rng.uniform(0.3, 0.7, size=2) * size
            a, b = rng.uniform(*family.structure_scale_range, size=2) * size
            theta = rng.uniform(0.0, np.pi)
            width = rng.uniform(*family.ring_width_range) * size
            u = (rows - center[0]) * np.cos(theta) + (cols - center[1]) * np.sin(theta)
            v = -(rows - center[0]) * np.sin(theta) + (cols - center[1]) * np.cos(theta)
            rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
            shell = (rho - 1.0) * 0.5 * (a + b)
            image += amplitude * np.exp(-(shell**2) / (2.0 * width**2))

    peak = image.max()
    if peak > 0.9:
        image *= 0.9 / peak

    image += rng.uniform(-family.noise_amplitude, family.noise_amplitude, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def save_image(image: Image, path: Union[str, Path]) -> None:
    """
    Write an image as an 8-bit grayscale PNG.

    Raises:
        RejectedInputError: If the image is not 2-D or has values outside [0, 1]
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise RejectedInputError("images must be 2-D with finite values in [0, 1]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(image * 255.0).astype(np.uint8)
    PILImage.fromarray(pixels).save(path, format="PNG")


def load_image(path: Union[str, Path]) -> Image:
    """
    Read an 8-bit grayscale or 8-bit RGB PNG; RGB is averaged to one channel.

    Raises:
        ImageFormatError: For corrupt files and unsupported modes/bit depths
    """
    try:
        with PILImage.open(path) as pil:
            pil.load()
            mode = pil.mode
            pixels = np.asarray(pil)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        logger.error(f"Could not read image {path}: {e}")
        raise ImageFormatError(f"corrupt or unreadable image {path}: {e}") from e

    if mode == "L":
        return pixels.astype(np.float64) / 255.0
    if mode == "RGB":
        return pixels.astype(np.float64).mean(axis=-1) / 255.0
    logger.error(f"Unsupported image mode {mode} for {path}")
    raise ImageFormatError(f"unsupported image mode {mode} in {path}; expected 8-bit L or RGB")


def save_mask(mask: AnomalyMask, path: Union[str, Path]) -> None:
    """Masks are stored as 0 / 255 grayscale PNGs."""
    save_image(mask.values.astype(np.float64), path)


def load_mask(path: Union[str, Path]) -> AnomalyMask:
    return AnomalyMask.from_array(load_image(path) > 0.5)


def build_dataset(
    family: PhantomFamily,
    k: int,
    n_test_normal: int,
    n_test_anomaly: int,
    seed: int,
    out_dir: Union[str, Path],
    size: int = 64,
    synthesis_config: Optional[SynthesisConfig] = None,
) -> DatasetManifest:
    """
    Generate a k-shot dataset and write it to `out_dir`.

    Test anomalies are normal phantoms passed through `synthesis` with seeds drawn from
    their own stream, disjoint from every training-time stream.

    Args:
        family: Phantom family
        k: Number of normal support images (>= 1)
        n_test_normal: Held-out normal images
        n_test_anomaly: Held-out synthesized anomalies
        seed: Dataset seed
        out_dir: Output directory (created if missing)
        size: Image side in pixels
        synthesis_config: Synthesis ranges for the test anomalies

    Returns:
        The manifest, also written to out_dir/manifest.json

    Raises:
        RejectedInputError: If k < 1 or a count is negative
        OSError: If out_dir cannot be written
    """
    if k < 1 or n_test_normal < 0 or n_test_anomaly < 0:
        raise RejectedInputError(f"invalid split sizes k={k}, normal={n_test_normal}, anomaly={n_test_anomaly}")
    synthesis_config = synthesis_config or SynthesisConfig()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create dataset directory {out_dir}: {e}")
        raise

    logger.info(f"Building {family.family_id.value} dataset in {out_dir}: k={k}, test {n_test_normal}+{n_test_anomaly}")

    train = []
    for i in range(k):
        rel = f"train/normal_{i:03d}.png"
        save_image(generate_phantom(family, derive_seed(seed, "train", i), size), out_dir / rel)
        train.append(rel)

    test_normal = []
    for i in range(n_test_normal):
        rel = f"test/normal/normal_{i:03d}.png"
        save_image(generate_phantom(family, derive_seed(seed, "test-normal", i), size), out_dir / rel)
        test_normal.append(rel)

    test_anomaly = []
    for i in range(n_test_anomaly):
        base = generate_phantom(family, derive_seed(seed, "test-anomaly-base", i), size)
        anomaly, mask = _synthesize_test_anomaly(base, seed, i, synthesis_config)
        image_rel = f"test/anomaly/anomaly_{i:03d}.png"
        mask_rel = f"test/mask/anomaly_{i:03d}_mask.png"
        save_image(anomaly, out_dir / image_rel)
        save_mask(mask, out_dir / mask_rel)
        test_anomaly.append({"image": image_rel, "mask": mask_rel})

    manifest = DatasetManifest(
        family=family.family_id.value,
        seed=seed,
        train=train,
        test_normal=test_normal,
        test_anomaly=test_anomaly,
        size=size,
        root=out_dir,
    )
    manifest.validate()
    path = manifest.save()
    logger.info(f"Dataset manifest written to {path}")
    return manifest


def _synthesize_test_anomaly(
    base: Image, seed: int, index: int, config: SynthesisConfig
) -> Tuple[Image, AnomalyMask]:
    rng = make_rng(seed, "test-synthesis", index)
    task = sample_task(rng, config.tasks, config.weights())
    for attempt in range(MAX_SYNTHESIS_RETRIES):
        stream = derive_seed(seed, "test-synthesis", index, attempt)
        mask = sample_mask_for_task(task, derive_seed(stream, "mask"), base.shape[0], config)
        try:
            return synthesize(base, mask, task, derive_seed(stream, "apply"), config), mask
        except PlacementError as e:
            logger.debug(f"Test anomaly {index}: {e}; redrawing mask")
    raise PlacementError(f"test anomaly {index}: no valid {task.value} synthesis after {MAX_SYNTHESIS_RETRIES} tries")


def load_support(manifest: DatasetManifest) -> List[Image]:
    """Load the training split as a list of images."""
    return [load_image(manifest.resolve(rel)) for rel in manifest.train]
