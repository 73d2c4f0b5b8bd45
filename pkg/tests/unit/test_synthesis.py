from collections import Counter

import numpy as np
import pytest

from scripts.errors import PlacementError, PreconditionError, RejectedInputError, UnsupportedShapeError
from scripts.mask_gen import AnomalyMask, MaskKind, make_parametric_mask, perlin_mask
from scripts.phantom_data import PhantomFamily, generate_phantom
from scripts.synthesis import (
    SynthesisConfig,
    SynthesisTask,
    apply_intensity_change,
    cutpaste,
    disjoint_origins,
    gauss_intensity_change,
    poisson_blend,
    poisson_residual,
    sample_mask_for_task,
    sample_task,
    smoothed_noise_field,
    source_deform,
    source_target_location,
    synthesize,
)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomFamily.named("blob"), seed=21, size=64)


def dense_poisson_solve(dst, src, region):
    """Direct solve of the same discrete Poisson system, one unknown per region pixel."""
    pixels = [tuple(p) for p in np.argwhere(region)]
    index = {p: i for i, p in enumerate(pixels)}
    A = np.zeros((len(pixels), len(pixels)))
    b = np.zeros(len(pixels))
    for i, (r, c) in enumerate(pixels):
        A[i, i] = 4.0
        for q in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            b[i] += src[r, c] - src[q]
            if q in index:
                A[i, index[q]] = -1.0
            else:
                b[i] += dst[q]
    solution = np.array(dst, dtype=np.float64, copy=True)
    for (r, c), value in zip(pixels, np.linalg.solve(A, b)):
        solution[r, c] = value
    return solution


def random_region(rng, size=16, max_side=8):
    h, w = rng.integers(2, max_side + 1, size=2)
    top = rng.integers(1, size - h)
    left = rng.integers(1, size - w)
    region = np.zeros((size, size), dtype=bool)
    region[top:top + h, left:left + w] = rng.random((h, w)) < 0.7
    region[top, left] = True
    return region


def test_poisson_identity_source_equals_destination():
    """
    Test that blending an image into itself leaves it unchanged.
    """
    rng = np.random.default_rng(0)
    dst = rng.random((16, 16))
    region = AnomalyMask.from_array(random_region(rng))
    np.testing.assert_array_equal(poisson_blend(dst, dst, region), dst)


def test_poisson_constant_boundary_gives_constant_interior():
    """
    Test that a constant source with a constant destination boundary fills the region with that constant.
    """
    dst = np.full((12, 12), 0.3)
    src = np.full((12, 12), 0.8)
    region = np.zeros((12, 12), dtype=bool)
    region[3:9, 2:10] = True
    out = poisson_blend(dst, src, AnomalyMask.from_array(region))
    np.testing.assert_allclose(out, 0.3, atol=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_poisson_matches_dense_solve(seed):
    """
    Test that the iterative solver matches a dense linear solve on regions up to 8×8.
    """
    rng = np.random.default_rng(seed)
    dst, src = rng.random((16, 16)), rng.random((16, 16))
    region = random_region(rng)
    out = poisson_blend(dst, src, AnomalyMask.from_array(region))
    np.testing.assert_allclose(out, dense_poisson_solve(dst, src, region), atol=1e-6)


def test_poisson_five_by_five_region():
    """
    Test the 5×5 square region against the dense oracle.
    """
    rng = np.random.default_rng(42)
    dst, src = rng.random((9, 9)), rng.random((9, 9))
    region = np.zeros((9, 9), dtype=bool)
    region[2:7, 2:7] = True
    out = poisson_blend(dst, src, AnomalyMask.from_array(region))
    np.testing.assert_allclose(out, dense_poisson_solve(dst, src, region), atol=1e-6)


def test_poisson_rejects_border_region():
    """
    Test that a region touching the border raises a precondition error.
    """
    region = np.zeros((10, 10), dtype=bool)
    region[0, 3:6] = True
    with pytest.raises(PreconditionError):
        poisson_blend(np.zeros((10, 10)), np.ones((10, 10)), AnomalyMask.from_array(region))


def test_cutpaste_identity_hook(phantom):
    """
    Test that sourcing the patch from the destination itself reproduces X within 1e-3.
    """
    Y = sample_mask_for_task(SynthesisTask.CUTPASTE, seed=3, size=64)
    top, left = Y.positive_locations.min(axis=0)
    out = cutpaste(phantom, Y, seed=0, source_origin=(int(top), int(left)))
    assert np.abs(out - phantom).max() < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_cutpaste_locality_and_poisson_residual(phantom, seed):
    """
    Test that pixels outside Y are untouched and the blended region solves the Poisson equation.
    """
    Y = sample_mask_for_task(SynthesisTask.CUTPASTE, seed=seed, size=64)
    top, left = Y.positive_locations.min(axis=0)
    bottom, right = Y.positive_locations.max(axis=0) + 1
    h, w = bottom - top, right - left
    out = cutpaste(phantom, Y, seed=seed, source_origin=(0, 0))

    outside = Y.values == 0
    np.testing.assert_array_equal(out[outside], phantom[outside])
    guide = phantom.copy()
    guide[top:bottom, left:right] = phantom[:h, :w]
    assert np.abs(poisson_residual(out, guide, Y.values > 0)).max() < 1e-6


def test_cutpaste_rejects_oversized_mask(phantom):
    """
    Test that a centered mask too large for any non-overlapping source patch cannot be placed.
    """
    Y = make_parametric_mask(64, MaskKind.RECTANGLE, center=(32.0, 32.0), semi_axes=(20.0, 20.0))
    with pytest.raises(PlacementError):
        cutpaste(phantom, Y, seed=0)


def test_disjoint_origins_matches_overlap_check():
    """
    Test that the enumerated origins are exactly the patches that miss the box.
    """
    box = (3, 4, 7, 9)
    found = {tuple(origin) for origin in disjoint_origins((12, 14), box).tolist()}
    expected = {
        (r, c)
        for r in range(12 - 4 + 1)
        for c in range(14 - 5 + 1)
        if r + 4 <= 3 or r >= 7 or c + 5 <= 4 or c >= 9
    }
    assert found == expected
    assert len(disjoint_origins((12, 12), (0, 0, 12, 12))) == 0


@pytest.mark.parametrize("size", [32, 64, 96])
def test_sampled_cutpaste_masks_always_have_a_placement(size):
    """
    Test that every sampled CutPaste mask fits in a size/3 window and leaves a disjoint source patch.
    """
    for seed in range(300):
        Y = sample_mask_for_task(SynthesisTask.CUTPASTE, seed=seed, size=size)
        top, left = Y.positive_locations.min(axis=0)
        bottom, right = Y.positive_locations.max(axis=0) + 1
        assert bottom - top <= size // 3 and right - left <= size // 3
        assert top >= 1 and left >= 1 and bottom <= size - 1 and right <= size - 1
        assert len(disjoint_origins((size, size), (top, left, bottom, right))) > 0


@pytest.mark.parametrize("seed", range(40))
def test_synthesize_cutpaste_never_fails_placement(phantom, seed):
    """
    Test that CutPaste on a sampled mask always finds a source patch and only changes the mask region.
    """
    Y = sample_mask_for_task(SynthesisTask.CUTPASTE, seed=seed, size=64)
    out = synthesize(phantom, Y, SynthesisTask.CUTPASTE, seed=seed)
    outside = Y.values == 0
    np.testing.assert_array_equal(out[outside], phantom[outside])


def test_intensity_change_scalar_case():
    """
    Test the single-pixel closed form X=0.5, Y=1, γ=0.5, σ̂=0.8 → 0.9.
    """
    out = apply_intensity_change(np.array([[0.5]]), AnomalyMask.from_array(np.ones((1, 1))), 0.5, np.array([[0.8]]))
    assert out[0, 0] == pytest.approx(0.9, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_intensity_change_exterior_identical(phantom, seed):
    """
    Test that pixels outside Y are bit-identical to X.
    """
    Y = perlin_mask(seed=seed, size=64, target_area=0.1)
    gamma = 0.5 if seed % 2 else -0.45
    out = gauss_intensity_change(phantom, Y, gamma, seed=seed)
    outside = Y.values == 0
    np.testing.assert_array_equal(out[outside], phantom[outside])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_intensity_change_empty_mask_is_identity(phantom):
    """
    Test that an all-zero mask leaves the image unchanged.
    """
    out = synthesize(phantom, AnomalyMask.empty((64, 64)), SynthesisTask.GAUSS_INTENSITY_CHANGE, seed=1)
    np.testing.assert_array_equal(out, phantom)


@pytest.mark.parametrize("gamma, sign", [(0.5, 1), (-0.5, -1)])
def test_intensity_change_direction(gamma, sign):
    """
    Test that positive γ brightens and negative γ darkens the region.
    """
    X = np.full((64, 64), 0.5)
    Y = perlin_mask(seed=8, size=64, target_area=0.15)
    out = gauss_intensity_change(X, Y, gamma, seed=2)
    inside = Y.values > 0
    assert sign * (out[inside].mean() - X[inside].mean()) > 0


def test_smoothed_noise_range_and_rejects_bad_gamma():
    """
    Test that σ̂ stays in [0, 1] and that |γ| outside [0.4, 0.6) is rejected.
    """
    _, smoothed = smoothed_noise_field(seed=0, shape=(64, 64), sigma_g=4.0)
    assert smoothed.min() >= 0.0 and smoothed.max() <= 1.0
    with pytest.raises(RejectedInputError):
        gauss_intensity_change(np.zeros((8, 8)), AnomalyMask.empty((8, 8)), 0.7, seed=0)


def test_source_target_boundary_center_and_scalar_case():
    """
    Test the boundary and center fixed points and the α=2, r=10, d=5 → 2.5 case.
    """
    c = np.array([32.0, 32.0])
    boundary = np.array([[40.0, 38.0]])
    r = np.linalg.norm(boundary - c, axis=-1)
    np.testing.assert_allclose(source_target_location(boundary, c, r, 3.0), boundary, atol=1e-12)
    np.testing.assert_array_equal(source_target_location(c[None], c, np.array([7.0]), 2.0), c[None])
    target = source_target_location(np.array([[37.0, 32.0]]), c, np.array([10.0]), 2.0)
    assert np.linalg.norm(target[0] - c) == pytest.approx(2.5, abs=1e-12)


def test_source_radial_monotonicity():
    """
    Test that collinear points keep their order and stay on the segment [c, l] after the warp.
    """
    rng = np.random.default_rng(0)
    c = np.array([30.0, 31.0])
    for _ in range(1000):
        alpha = rng.uniform(np.sqrt(2), 4.0)
        r = rng.uniform(3.0, 15.0)
        d1, d2 = np.sort(rng.uniform(0.0, r, size=2))
        if d2 - d1 < 1e-9:
            continue
        u = rng.normal(size=2)
        u /= np.linalg.norm(u)
        points = c + np.outer([d1, d2], u)
        mapped = source_target_location(points, c, np.array([r, r]), alpha)
        m1, m2 = np.linalg.norm(mapped - c, axis=-1)
        assert m1 < m2
        assert m2 <= d2 + 1e-12


def test_source_deform_fixed_points_and_locality(phantom):
    """
    Test that the center pixel and everything outside Y are unchanged.
    """
    Y = make_parametric_mask(64, MaskKind.ELLIPSE, center=(32.0, 30.0), semi_axes=(10.0, 6.0), rotation=0.3)
    out = source_deform(phantom, Y, alpha=2.0)
    assert out[32, 30] == pytest.approx(phantom[32, 30], abs=1e-6)
    outside = Y.values == 0
    np.testing.assert_array_equal(out[outside], phantom[outside])
    assert not np.array_equal(out, phantom)


def test_source_rejects_perlin_mask(phantom):
    """
    Test that Source with a Perlin mask raises unsupported-shape.
    """
    Y = perlin_mask(seed=1, size=64, target_area=0.1)
    with pytest.raises(UnsupportedShapeError, match="unsupported-shape"):
        synthesize(phantom, Y, SynthesisTask.SOURCE, seed=0)


def test_sample_task_equal_frequencies():
    """
    Test that 30000 draws give each task between 9500 and 10500 times.
    """
    rng = np.random.default_rng(123)
    counts = Counter(sample_task(rng) for _ in range(30000))
    assert set(counts) == set(SynthesisTask)
    assert all(9500 <= n <= 10500 for n in counts.values())


def test_sample_task_replay_and_subset():
    """
    Test that a replayed rng gives the same sequence and that a subset is respected.
    """
    first, second = np.random.default_rng(5), np.random.default_rng(5)
    assert [sample_task(first) for _ in range(20)] == [sample_task(second) for _ in range(20)]
    rng = np.random.default_rng(1)
    only = {sample_task(rng, tasks=["source"]) for _ in range(20)}
    assert only == {SynthesisTask.SOURCE}


@pytest.mark.parametrize("task", list(SynthesisTask))
def test_synthesize_deterministic_and_in_range(phantom, task):
    """
    Test that each task is reproducible for a fixed seed and stays in [0, 1].
    """
    Y = sample_mask_for_task(task, seed=4, size=64)
    a = synthesize(phantom, Y, task, seed=9)
    b = synthesize(phantom, Y, task, seed=9)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_synthesis_config_scales_sigma():
    """
    Test that the Gaussian filter width scales with the image side.
    """
    assert SynthesisConfig().sigma_for(32) == pytest.approx(2.0)
    assert SynthesisConfig().sigma_for(64) == pytest.approx(4.0)
