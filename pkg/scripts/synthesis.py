"""
Anomaly synthesis: turns a normal image X and a lesion mask Y into a training image X̂.

Three tasks are supported, each simulating a different kind of medical abnormality:
- CutPaste: a patch from elsewhere in the same image is Poisson-blended into Y
  (misplacement-like anomalies, e.g. fractures)
- GaussIntensityChange: a smoothed binary noise field shifts intensities inside Y
  (density changes, e.g. tumours or cysts)
- Source: content inside a parametric mask is pushed away from its center
  (proliferative anomalies, e.g. an enlarged organ)
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy import ndimage

from scripts.errors import (
    PlacementError,
    PreconditionError,
    RejectedInputError,
    ShapeError,
    UnsupportedShapeError,
)
from scripts.mask_gen import (
    MIN_AREA_FRACTION,
    AnomalyMask,
    MaskKind,
    parametric_mask,
    perlin_mask,
    radius_in_direction,
)
from scripts.seeding import derive_seed, make_rng

Image = npt.NDArray[np.float64]

POISSON_TOLERANCE = 1e-8
# Largest share of the CutPaste window a mask may cover
CUTPASTE_WINDOW_FILL = 0.6


class SynthesisTask(str, Enum):
    CUTPASTE = "cutpaste"
    GAUSS_INTENSITY_CHANGE = "gauss_intensity_change"
    SOURCE = "source"


ALL_TASKS: Tuple[SynthesisTask, ...] = tuple(SynthesisTask)


@dataclass
class SynthesisConfig:
    """Sampling ranges shared by training episodes, test-set synthesis and the CLI."""

    gamma_range: Tuple[float, float] = (0.4, 0.6)
    alpha_range: Tuple[float, float] = (math.sqrt(2.0), 4.0)
    # Gaussian filter width at reference_size; scales with the image side
    sigma_g: float = 4.0
    reference_size: int = 64
    cutpaste_area_range: Tuple[float, float] = (0.02, 0.08)
    gauss_area_range: Tuple[float, float] = (0.02, 0.30)
    tasks: Tuple[SynthesisTask, ...] = ALL_TASKS
    task_weights: Optional[Dict[str, float]] = None

    def __post_init__(self):
        self.tasks = tuple(SynthesisTask(t) for t in self.tasks)
        if not self.tasks:
            raise RejectedInputError("at least one synthesis task must be enabled")

    def sigma_for(self, size: int) -> float:
        return self.sigma_g * size / self.reference_size

    def weights(self) -> Optional[Sequence[float]]:
        if not self.task_weights:
            return None
        return [float(self.task_weights.get(t.value, 0.0)) for t in self.tasks]


@dataclass
class GaussIntensityParams:
    gamma: float
    sigma_g: float
    noise: np.ndarray = field(repr=False)
    smoothed: np.ndarray = field(repr=False)


@dataclass
class SourceDeformParams:
    alpha: float
    center: Tuple[float, float]
    radius: Callable[[np.ndarray], Any] = field(repr=False)


def sample_task(
    rng: np.random.Generator,
    tasks: Sequence[SynthesisTask] = ALL_TASKS,
    weights: Optional[Sequence[float]] = None,
) -> SynthesisTask:
    """Draw a task; uniform over `tasks` unless weights are given."""
    tasks = tuple(SynthesisTask(t) for t in tasks)
    if weights is None:
        return tasks[int(rng.integers(len(tasks)))]
    p = np.asarray(weights, dtype=np.float64)
    if p.shape != (len(tasks),) or np.any(p < 0) or p.sum() <= 0:
        raise RejectedInputError(f"invalid task weights {list(weights)}")
    return tasks[int(rng.choice(len(tasks), p=p / p.sum()))]


def _check_pair(X: Image, Y: AnomalyMask) -> None:
    if X.shape != Y.shape:
        logger.error(f"Image shape {X.shape} does not match mask shape {Y.shape}")
        raise ShapeError(f"image {X.shape} and mask {Y.shape} differ")


def _touches_border(values: np.ndarray) -> bool:
    return bool(values[0, :].any() or values[-1, :].any() or values[:, 0].any() or values[:, -1].any())


def _neighbor_sum(f: np.ndarray) -> np.ndarray:
    return f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:]


def poisson_residual(f: np.ndarray, guide: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Discrete Poisson residual Δf − Δg on the region pixels (interior slice layout)."""
    lap_f = 4.0 * f[1:-1, 1:-1] - _neighbor_sum(f)
    lap_g = 4.0 * guide[1:-1, 1:-1] - _neighbor_sum(guide)
    return np.where(region[1:-1, 1:-1], lap_f - lap_g, 0.0)


def poisson_blend(
    dst: Image,
    src: Image,
    region: AnomalyMask,
    tolerance: float = POISSON_TOLERANCE,
    max_iterations: Optional[int] = None,
) -> Image:
    """
    Seamless cloning of `src` into `dst` over `region` by red-black Gauss-Seidel.

    Solves, for every region pixel p with 4-neighbours N(p),
    sum_q (f_p - f_q) = sum_q (g_p - g_q), with f_q = dst_q outside the region.
    The iterate starts from dst and stops once the max residual drops below
    `tolerance` or after 10·|region| sweeps.

    Raises:
        ShapeError: If the three arrays differ in shape
        PreconditionError: If the region has a positive pixel on the image border
    """
    if dst.shape != src.shape or dst.shape != region.shape:
        raise ShapeError(f"dst {dst.shape}, src {src.shape} and region {region.shape} must match")
    mask = region.values > 0
    if _touches_border(mask):
        logger.error("Poisson region touches the image border")
        raise PreconditionError("region must lie strictly inside the image")

    f = np.array(dst, dtype=np.float64, copy=True)
    count = int(mask.sum())
    if count == 0:
        return f

    guide = np.asarray(src, dtype=np.float64)
    lap_g = 4.0 * guide[1:-1, 1:-1] - _neighbor_sum(guide)
    inner = mask[1:-1, 1:-1]
    rows, cols = np.indices(inner.shape)
    red = inner & ((rows + cols) % 2 == 0)
    black = inner & ((rows + cols) % 2 == 1)
    interior = f[1:-1, 1:-1]

    limit = max_iterations if max_iterations is not None else 10 * count
    residual = np.abs(poisson_residual(f, guide, mask)).max()
    sweeps = 0
    while residual >= tolerance and sweeps < limit:
        for colour in (red, black):
            update = (_neighbor_sum(f) + lap_g) / 4.0
            interior[colour] = update[colour]
        sweeps += 1
        residual = np.abs(poisson_residual(f, guide, mask)).max()

    if residual >= tolerance:
        logger.warning(f"Poisson solver stopped after {sweeps} sweeps with residual {residual:.3e}")
    else:
        logger.debug(f"Poisson solver converged in {sweeps} sweeps over {count} pixels")
    return f


def disjoint_origins(shape: Tuple[int, int], box: Tuple[int, int, int, int]) -> np.ndarray:
    """(row, col) origins of every same-size patch that does not overlap `box` = (top, left, bottom, right)."""
    H, W = shape
    top, left, bottom, right = box
    h, w = bottom - top, right - left
    rows, cols = np.indices((H - h + 1, W - w + 1))
    free = (rows + h <= top) | (rows >= bottom) | (cols + w <= left) | (cols >= right)
    return np.argwhere(free)


def cutpaste(
    X: Image,
    Y: AnomalyMask,
    seed: int,
    source_origin: Optional[Tuple[int, int]] = None,
) -> Image:
    """
    Copy a patch of X congruent to Y's bounding box from a location drawn uniformly among
    those that do not overlap that box, and Poisson-blend it into the Y region.

    Args:
        X: Source/destination image
        Y: Destination region (strictly inside the image)
        seed: Placement seed
        source_origin: Forces the (row, col) of the source patch instead of sampling

    Raises:
        PlacementError: If no disjoint source placement is found
    """
    _check_pair(X, Y)
    positives = Y.positive_locations
    if positives.size == 0:
        return np.array(X, dtype=np.float64, copy=True)

    top, left = positives.min(axis=0)
    bottom, right = positives.max(axis=0) + 1
    h, w = bottom - top, right - left
    H, W = X.shape

    if source_origin is not None:
        src_r, src_c = source_origin
    else:
        origins = disjoint_origins((H, W), (top, left, bottom, right))
        if len(origins) == 0:
            logger.error(f"No source patch of {h}x{w} avoids the mask box in a {H}x{W} image")
            raise PlacementError(f"no disjoint source placement for a {h}x{w} patch in a {H}x{W} image")
        src_r, src_c = (int(v) for v in origins[make_rng(seed).integers(len(origins))])

    guide = np.array(X, dtype=np.float64, copy=True)
    guide[top:bottom, left:right] = X[src_r:src_r + h, src_c:src_c + w]
    return poisson_blend(X, guide, Y)


def smoothed_noise_field(seed: int, shape: Tuple[int, int], sigma_g: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Standard-normal noise σ binarized at 0 and Gaussian-filtered (truncated at 3σ_g).

    Returns:
        (σ, σ̂) with σ̂ in [0, 1]
    """
    rng = make_rng(seed)
    noise = rng.standard_normal(shape)
    binary = (noise > 0).astype(np.float64)
    smoothed = ndimage.gaussian_filter(binary, sigma=sigma_g, truncate=3.0, mode="reflect")
    return noise, np.clip(smoothed, 0.0, 1.0)


def apply_intensity_change(X: Image, Y: AnomalyMask, gamma: float, sigma_hat: np.ndarray) -> Image:
    """X̂ = X ⊙ (1 − Y) + (X + γσ̂) ⊙ Y, clamped to [0, 1]."""
    _check_pair(X, Y)
    shifted = np.where(Y.values > 0, X + gamma * sigma_hat, X)
    return np.clip(shifted, 0.0, 1.0)


def gauss_intensity_params(gamma: float, seed: int, shape: Tuple[int, int], sigma_g: float) -> GaussIntensityParams:
    if not 0.4 <= abs(gamma) < 0.6:
        raise RejectedInputError(f"|gamma| must lie in [0.4, 0.6), got {gamma}")
    noise, smoothed = smoothed_noise_field(seed, shape, sigma_g)
    return GaussIntensityParams(gamma=gamma, sigma_g=sigma_g, noise=noise, smoothed=smoothed)


def gauss_intensity_change(X: Image, Y: AnomalyMask, gamma: float, seed: int, sigma_g: float = 4.0) -> Image:
    """Shift intensities inside Y by γ times a smoothed binary noise field."""
    params = gauss_intensity_params(gamma, seed, X.shape, sigma_g)
    return apply_intensity_change(X, Y, params.gamma, params.smoothed)


def source_target_location(
    l: np.ndarray, c: np.ndarray, r: np.ndarray, alpha: float
) -> np.ndarray:
    """
    l̂ = c + r · (l − c)/‖l − c‖ · (‖l − c‖ / r)^α, with l̂ = c at l = c.

    Args:
        l: (..., 2) source locations
        c: (2,) center
        r: (...) boundary distance along each l − c
        alpha: Repulsion exponent
    """
    l = np.asarray(l, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    diff = l - c
    d = np.linalg.norm(diff, axis=-1)
    safe_d = np.where(d > 0, d, 1.0)
    scale = np.where(d > 0, np.asarray(r) * (d / np.asarray(r)) ** alpha / safe_d, 0.0)
    return c + diff * scale[..., None]


def source_params(Y: AnomalyMask, alpha: float) -> SourceDeformParams:
    if not Y.is_parametric:
        raise UnsupportedShapeError("unsupported-shape: Source needs an ellipse or rectangle mask")
    if not math.sqrt(2.0) - 1e-12 <= alpha < 4.0:
        raise RejectedInputError(f"alpha must lie in [sqrt(2), 4), got {alpha}")
    return SourceDeformParams(alpha=alpha, center=Y.center, radius=lambda u: radius_in_direction(Y, u))


def source_deform(X: Image, Y: AnomalyMask, alpha: float) -> Image:
    """
    Push the content of a parametric mask away from its center.

    Every l in Y is replaced by X sampled bilinearly at l̂; pixels outside Y are untouched.

    Raises:
        UnsupportedShapeError: For Perlin masks
        PreconditionError: If the mask touches the image border
    """
    _check_pair(X, Y)
    params = source_params(Y, alpha)
    if _touches_border(Y.values):
        raise PreconditionError("Source mask must lie strictly inside the image")

    locations = Y.positive_locations.astype(np.float64)
    out = np.array(X, dtype=np.float64, copy=True)
    if locations.size == 0:
        return out

    c = np.asarray(params.center)
    diff = locations - c
    at_center = np.linalg.norm(diff, axis=-1) == 0
    # any direction works at the center; its target is c regardless
    diff[at_center] = (1.0, 0.0)
    radius = np.atleast_1d(params.radius(diff))
    targets = source_target_location(locations, c, radius, params.alpha)
    targets[at_center] = c

    sampled = ndimage.map_coordinates(X, [targets[:, 0], targets[:, 1]], order=1, mode="nearest")
    rows = locations[:, 0].astype(np.int64)
    cols = locations[:, 1].astype(np.int64)
    out[rows, cols] = sampled
    return out


def sample_mask_for_task(
    task: SynthesisTask, seed: int, size: int, config: Optional[SynthesisConfig] = None
) -> AnomalyMask:
    """
    Draw a mask compatible with `task`.

    CutPaste gets a Perlin mask confined to a random window of side size/3 kept off the
    border; GaussIntensityChange a whole-image Perlin mask; Source an ellipse or rectangle.
    """
    config = config or SynthesisConfig()
    task = SynthesisTask(task)
    rng = make_rng(seed, "mask-params")
    mask_seed = derive_seed(seed, "mask")

    if task == SynthesisTask.SOURCE:
        kind = MaskKind.ELLIPSE if rng.random() < 0.5 else MaskKind.RECTANGLE
        return parametric_mask(mask_seed, size, kind)

    if task == SynthesisTask.CUTPASTE:
        # side <= size/3 guarantees a disjoint source placement
        side = size // 3
        top = int(rng.integers(1, size - side))
        left = int(rng.integers(1, size - side))
        capacity = CUTPASTE_WINDOW_FILL * side * side / (size * size)
        target = max(min(rng.uniform(*config.cutpaste_area_range), capacity), MIN_AREA_FRACTION)
        return perlin_mask(mask_seed, size, target, window=(top, left, side, side))

    target = rng.uniform(*config.gauss_area_range)
    return perlin_mask(mask_seed, size, target)


def draw_task_parameters(
    task: SynthesisTask, seed: int, config: Optional[SynthesisConfig] = None
) -> Dict[str, float]:
    """Scalar parameters a task draws from `seed` (γ with random sign, or α)."""
    config = config or SynthesisConfig()
    task = SynthesisTask(task)
    rng = make_rng(seed, "task-params")
    if task == SynthesisTask.GAUSS_INTENSITY_CHANGE:
        magnitude = rng.uniform(*config.gamma_range)
        sign = -1.0 if rng.random() < 0.5 else 1.0
        return {"gamma": float(sign * magnitude)}
    if task == SynthesisTask.SOURCE:
        return {"alpha": float(rng.uniform(*config.alpha_range))}
    return {}


def synthesize(
    X: Image,
    Y: AnomalyMask,
    task: SynthesisTask,
    seed: int,
    config: Optional[SynthesisConfig] = None,
) -> Image:
    """
    Apply one synthesis task, drawing its parameters from `seed`.

    Returns:
        X̂ clamped to [0, 1]

    Raises:
        UnsupportedShapeError: Source requested with a Perlin mask
        PlacementError: CutPaste could not place its source patch
    """
    config = config or SynthesisConfig()
    task = SynthesisTask(task)
    _check_pair(X, Y)
    if task == SynthesisTask.SOURCE and not Y.is_parametric:
        logger.error("Source task requested with a non-parametric mask")
        raise UnsupportedShapeError("unsupported-shape: Source needs an ellipse or rectangle mask")

    params = draw_task_parameters(task, seed, config)
    if task == SynthesisTask.CUTPASTE:
        out = cutpaste(X, Y, derive_seed(seed, "placement"))
    elif task == SynthesisTask.GAUSS_INTENSITY_CHANGE:
        out = gauss_intensity_change(
            X, Y, params["gamma"], derive_seed(seed, "noise"), config.sigma_for(X.shape[0])
        )
    else:
        out = source_deform(X, Y, params["alpha"])
    return np.clip(out, 0.0, 1.0)
