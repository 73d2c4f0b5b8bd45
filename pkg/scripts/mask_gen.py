"""
Anomaly-region masks.

Two families of masks are produced here:
- Perlin masks: a single-octave gradient-lattice noise field binarized at a threshold
  found by bisection, so that the lesion covers a requested fraction of the image.
  Used for CutPaste and GaussIntensityChange.
- Parametric masks: rotated ellipses or rectangles that carry their center, semi-axes
  and rotation, so the boundary distance in any direction can be evaluated exactly.
  Used for Source deformation.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy import ndimage

from scripts.errors import (
    DegenerateFieldError,
    RejectedInputError,
    UnsupportedShapeError,
)
from scripts.seeding import derive_seed, make_rng

ScalarField = npt.NDArray[np.float64]

MIN_AREA_FRACTION = 0.02
MAX_AREA_FRACTION = 0.30
MIN_COMPONENT_PIXELS = 9
MAX_PERLIN_ATTEMPTS = 16
# semi-axes / half-extents as a fraction of the image side
PARAMETRIC_EXTENT_RANGE = (0.08, 0.25)

Window = Tuple[int, int, int, int]


class MaskKind(str, Enum):
    PERLIN = "perlin"
    ELLIPSE = "ellipse"
    RECTANGLE = "rectangle"


@dataclass(frozen=True, eq=False)
class AnomalyMask:
    """
    Binary lesion mask Y with optional parametric shape metadata.

    `values` is an H×W uint8 array holding 0/1. For ellipses and rectangles,
    `center` is (row, col), `semi_axes` is (a, b) where a lies along the row axis
    at rotation 0, and `rotation` is in radians. Masks read back from disk and
    empty masks of normal episodes are carried with kind PERLIN (no metadata).
    """

    values: npt.NDArray[np.uint8]
    kind: MaskKind = MaskKind.PERLIN
    center: Optional[Tuple[float, float]] = None
    semi_axes: Optional[Tuple[float, float]] = None
    rotation: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def is_parametric(self) -> bool:
        return self.kind in (MaskKind.ELLIPSE, MaskKind.RECTANGLE)

    @property
    def area_fraction(self) -> float:
        return float(self.values.sum()) / self.values.size

    @property
    def positive_locations(self) -> npt.NDArray[np.int64]:
        """(N, 2) array of (row, col) positions where the mask is 1."""
        return np.argwhere(self.values > 0)

    @classmethod
    def empty(cls, shape: Tuple[int, int]) -> "AnomalyMask":
        return cls(values=np.zeros(shape, dtype=np.uint8))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "AnomalyMask":
        return cls(values=(np.asarray(values) > 0).astype(np.uint8))


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    return a + (b - a) * t


def perlin_field(seed: int, size: int, lattice_period: int) -> ScalarField:
    """
    Single-octave 2-D Perlin gradient noise.

    Random unit gradients live on lattice points every `lattice_period` pixels; the
    field is exactly 0 on every lattice point. If the period does not divide `size`
    the field is generated on the next multiple and cropped.

    Args:
        seed: Seed of the gradient lattice
        size: Side of the square output in pixels
        lattice_period: Lattice spacing in pixels (>= 2)

    Returns:
        size×size float64 array with values in [-1, 1]

    Raises:
        RejectedInputError: If lattice_period < 2 or size < 1
    """
    if lattice_period < 2:
        logger.error(f"Lattice period must be at least 2, got {lattice_period}")
        raise RejectedInputError(f"lattice_period must be >= 2, got {lattice_period}")
    if size < 1:
        raise RejectedInputError(f"size must be positive, got {size}")

    cells = -(-size // lattice_period)
    rng = make_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells + 1, cells + 1))
    grad_r, grad_c = np.cos(angles), np.sin(angles)

    # integer arithmetic keeps lattice points exactly on frac == 0
    coords = np.arange(cells * lattice_period)
    cell = coords // lattice_period
    frac = (coords % lattice_period) / lattice_period

    r0 = cell[:, None]
    c0 = cell[None, :]
    fr = frac[:, None]
    fc = frac[None, :]

    def corner(dr: int, dc: int) -> np.ndarray:
        gr = grad_r[r0 + dr, c0 + dc]
        gc = grad_c[r0 + dr, c0 + dc]
        return gr * (fr - dr) + gc * (fc - dc)

    sr, sc = _fade(fr), _fade(fc)
    top = _lerp(corner(0, 0), corner(0, 1), sc)
    bottom = _lerp(corner(1, 0), corner(1, 1), sc)
    field = _lerp(top, bottom, sr)
    return np.clip(field[:size, :size], -1.0, 1.0)


def binarize(field: ScalarField, threshold: float) -> npt.NDArray[np.uint8]:
    """Positive where field > threshold."""
    return (field > threshold).astype(np.uint8)


def remove_small_components(
    binary: np.ndarray, min_size: int = MIN_COMPONENT_PIXELS
) -> npt.NDArray[np.uint8]:
    """Drop 4-connected components with fewer than `min_size` pixels."""
    labels, count = ndimage.label(binary)
    if count == 0:
        return np.zeros_like(binary, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels].astype(np.uint8)


def _threshold_for_count(field: ScalarField, target_count: float) -> float:
    """Bisection on the threshold so the filtered positive count approaches target_count."""
    finite = field[np.isfinite(field)]
    # bracket: at lo every finite pixel is on, at hi nothing is
    lo, hi = float(finite.min()) - 1e-9, float(finite.max())
    lo_count, hi_count = float(finite.size), 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        count = float(remove_small_components(binarize(field, mid)).sum())
        if count > target_count:
            lo, lo_count = mid, count
        else:
            hi, hi_count = mid, count
    return hi if target_count - hi_count <= lo_count - target_count else lo


def perlin_mask(
    seed: int,
    size: int,
    target_area: float,
    window: Optional[Window] = None,
    lattice_period: Optional[int] = None,
) -> AnomalyMask:
    """
    Binarized Perlin lesion mask with a controlled area.

    The lattice period is drawn from {size/4, size/8} unless given. The threshold is
    chosen by bisection so the positive fraction (after dropping components smaller
    than 9 px) lies within ±20% of `target_area` and inside [0.02, 0.30]; a field that
    cannot meet the band is redrawn from a derived seed.

    Args:
        seed: Mask seed
        size: Image side in pixels
        target_area: Requested positive fraction in [0.02, 0.30]
        window: Optional (top, left, height, width) outside which the mask stays 0
        lattice_period: Fixed lattice period instead of the sampled one

    Returns:
        AnomalyMask of kind PERLIN

    Raises:
        RejectedInputError: If target_area is outside [0.02, 0.30]
        DegenerateFieldError: If 16 fields in a row miss the area band
    """
    if not MIN_AREA_FRACTION <= target_area <= MAX_AREA_FRACTION:
        raise RejectedInputError(
            f"target_area must lie in [{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}], got {target_area}"
        )

    total = size * size
    band_lo = max(0.8 * target_area, MIN_AREA_FRACTION)
    band_hi = min(1.2 * target_area, MAX_AREA_FRACTION)
    aim = 0.5 * (band_lo + band_hi) * total

    for attempt in range(MAX_PERLIN_ATTEMPTS):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "perlin-resample", attempt)
        rng = make_rng(attempt_seed)
        period = lattice_period or int(rng.choice([max(size // 4, 2), max(size // 8, 2)]))
        field = perlin_field(derive_seed(attempt_seed, "field"), size, period)
        if window is not None:
            top, left, height, width = window
            outside = np.ones_like(field, dtype=bool)
            outside[top:top + height, left:left + width] = False
            field = np.where(outside, -np.inf, field)

        threshold = _threshold_for_count(field, aim)
        values = remove_small_components(binarize(field, threshold))
        fraction = values.sum() / total
        if band_lo <= fraction <= band_hi:
            return AnomalyMask(values=values, kind=MaskKind.PERLIN)
        logger.debug(
            f"Perlin attempt {attempt} missed area band: {fraction:.4f} not in [{band_lo:.4f}, {band_hi:.4f}]"
        )

    logger.error(f"Perlin mask for seed {seed} failed after {MAX_PERLIN_ATTEMPTS} attempts")
    raise DegenerateFieldError(f"degenerate field: seed={seed}, target_area={target_area}")


def _shape_frame(
    rows: np.ndarray, cols: np.ndarray, center: Tuple[float, float], rotation: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates in the shape frame: u along the first semi-axis, v along the second."""
    dr = rows - center[0]
    dc = cols - center[1]
    cos_t, sin_t = np.cos(rotation), np.sin(rotation)
    u = dr * cos_t + dc * sin_t
    v = -dr * sin_t + dc * cos_t
    return u, v


def _half_extents(kind: MaskKind, semi_axes: Tuple[float, float], rotation: float) -> Tuple[float, float]:
    a, b = semi_axes
    cos_t, sin_t = abs(np.cos(rotation)), abs(np.sin(rotation))
    if kind == MaskKind.ELLIPSE:
        return float(np.hypot(a * cos_t, b * sin_t)), float(np.hypot(a * sin_t, b * cos_t))
    return a * cos_t + b * sin_t, a * sin_t + b * cos_t


def make_parametric_mask(
    size: int,
    kind: Union[MaskKind, str],
    center: Tuple[float, float],
    semi_axes: Tuple[float, float],
    rotation: float = 0.0,
) -> AnomalyMask:
    """
    Rasterize an ellipse or rectangle; a pixel is positive when its center lies
    inside the shape.
    """
    kind = MaskKind(kind)
    if kind == MaskKind.PERLIN:
        raise UnsupportedShapeError("unsupported-shape: parametric masks are ellipse or rectangle")
    a, b = semi_axes
    if a <= 0 or b <= 0:
        raise RejectedInputError(f"semi-axes must be positive, got {semi_axes}")

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = _shape_frame(rows, cols, center, rotation)
    if kind == MaskKind.ELLIPSE:
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    return AnomalyMask(
        values=inside.astype(np.uint8),
        kind=kind,
        center=(float(center[0]), float(center[1])),
        semi_axes=(float(a), float(b)),
        rotation=float(rotation),
    )


def parametric_mask(seed: int, size: int, kind: Union[MaskKind, str]) -> AnomalyMask:
    """
    Random ellipse or rectangle that fits entirely inside the image.

    Semi-axes (half-extents for rectangles) are uniform in [8%, 25%] of the side,
    rotation uniform in [0, pi), and the center uniform over positions that keep the
    whole shape at least one pixel away from the border.
    """
    kind = MaskKind(kind)
    if kind == MaskKind.PERLIN:
        raise RejectedInputError("parametric_mask kind must be ellipse or rectangle")

    for attempt in range(MAX_PERLIN_ATTEMPTS):
        rng = make_rng(seed if attempt == 0 else derive_seed(seed, "parametric-resample", attempt))
        a, b = rng.uniform(*PARAMETRIC_EXTENT_RANGE, size=2) * size
        rotation = rng.uniform(0.0, np.pi)
        ext_r, ext_c = _half_extents(kind, (a, b), rotation)
        center_r = rng.uniform(ext_r + 1.0, size - 2.0 - ext_r)
        center_c = rng.uniform(ext_c + 1.0, size - 2.0 - ext_c)
        mask = make_parametric_mask(size, kind, (center_r, center_c), (a, b), rotation)
        if MIN_AREA_FRACTION <= mask.area_fraction <= MAX_AREA_FRACTION:
            return mask
    raise DegenerateFieldError(f"degenerate field: no parametric {kind.value} in area band for seed {seed}")


def radius_in_direction(mask: AnomalyMask, direction: np.ndarray) -> Union[float, np.ndarray]:
    """
    Distance from the mask center to its boundary along `direction`.

    Args:
        mask: Ellipse or rectangle mask with metadata
        direction: (row, col) vector, or an array (..., 2) of them; need not be unit length

    Returns:
        Boundary distance in pixels (float for a single direction, array otherwise)

    Raises:
        UnsupportedShapeError: For Perlin masks
        RejectedInputError: For a zero direction vector
    """
    if not mask.is_parametric:
        raise UnsupportedShapeError("unsupported-shape: radius is defined for ellipse/rectangle masks only")

    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction, axis=-1)
    if np.any(norm == 0):
        raise RejectedInputError("direction must be non-zero")
    dr = direction[..., 0] / norm
    dc = direction[..., 1] / norm

    cos_t, sin_t = np.cos(mask.rotation), np.sin(mask.rotation)
    u = dr * cos_t + dc * sin_t
    v = -dr * sin_t + dc * cos_t
    a, b = mask.semi_axes

    if mask.kind == MaskKind.ELLIPSE:
        radius = 1.0 / np.sqrt((u / a) ** 2 + (v / b) ** 2)
    else:
        with np.errstate(divide="ignore"):
            radius = np.minimum(
                np.where(u != 0, a / np.abs(u), np.inf),
                np.where(v != 0, b / np.abs(v), np.inf),
            )
    return float(radius) if np.ndim(radius) == 0 else radius
