import json

import numpy as np
import pytest
from PIL import Image as PILImage

from scripts.errors import ShapeError, UndefinedMetricError
from scripts.evalkit import auroc, evaluate, infer, infer_many, pixel_auroc, save_heatmap, transfer_eval
from scripts.mask_gen import AnomalyMask
from scripts.phantom_data import PhantomFamily, build_dataset, generate_phantom
from scripts.trainer import SupportSet, TrainConfig, save_checkpoint, train


def pair_count_auroc(scores, labels):
    """All-pairs count of (anomaly, normal) orderings, ties counted half."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_perfect_separation_and_ties():
    """
    Test that perfect separation gives 1.0 and all-equal scores give 0.5.
    """
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


@pytest.mark.parametrize("seed", range(100))
def test_auroc_matches_pair_counting(seed):
    """
    Test exact agreement with brute-force pair counting on random score sets with ties.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.random(n), 1)
    assert auroc(scores, labels) == pytest.approx(pair_count_auroc(scores, labels), abs=1e-12)


def test_auroc_invariant_to_monotone_transform_and_complement():
    """
    Test that a strictly increasing transform keeps AUROC and negating scores gives 1 - AUROC.
    """
    rng = np.random.default_rng(7)
    scores, labels = rng.random(50), rng.integers(0, 2, size=50)
    value = auroc(scores, labels)
    assert auroc(np.exp(3 * scores), labels) == pytest.approx(value, abs=1e-12)
    assert auroc(-scores, labels) == pytest.approx(1.0 - value, abs=1e-12)


def test_auroc_agrees_with_sklearn():
    """
    Test agreement with scikit-learn's ROC AUC.
    """
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(3)
    scores, labels = rng.random(200), rng.integers(0, 2, size=200)
    assert auroc(scores, labels) == pytest.approx(metrics.roc_auc_score(labels, scores), abs=1e-12)


def test_auroc_undefined_cases():
    """
    Test that a single-class population or non-binary labels raise undefined-metric.
    """
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2, 0.3], [0, 0, 0])
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [0, 2])
    with pytest.raises(ShapeError):
        auroc([0.1, 0.2], [0, 1, 1])


def test_pixel_auroc_perfect_and_constant():
    """
    Test that S_a = Y gives 1.0 and one constant map value gives 0.5.
    """
    rng = np.random.default_rng(0)
    masks = [(rng.random((8, 8)) < 0.3).astype(np.uint8) for _ in range(3)]
    masks[0][0, 0], masks[0][0, 1] = 1, 0
    assert pixel_auroc([m.astype(float) for m in masks], masks) == 1.0
    assert pixel_auroc([np.full((8, 8), 0.4) for _ in masks], masks) == 0.5


def test_pixel_auroc_matches_pooled_pair_counting():
    """
    Test two 4×4 images against brute-force pair counting over the pooled pixels.
    """
    rng = np.random.default_rng(1)
    maps = [np.round(rng.random((4, 4)), 1) for _ in range(2)]
    masks = [AnomalyMask.from_array(rng.random((4, 4)) < 0.4) for _ in range(2)]
    masks[1] = AnomalyMask.from_array(np.eye(4, dtype=bool))
    pooled_scores = np.concatenate([m.ravel() for m in maps])
    pooled_labels = np.concatenate([m.values.ravel() for m in masks])
    expected = pair_count_auroc(pooled_scores, pooled_labels)
    assert pixel_auroc(maps, masks) == pytest.approx(expected, abs=1e-12)


def test_pixel_auroc_shape_mismatch():
    """
    Test that a map and mask of different shapes are rejected.
    """
    with pytest.raises(ShapeError):
        pixel_auroc([np.zeros((4, 4))], [np.zeros((5, 5))])


def test_infer_contract(tiny_model):
    """
    Test that infer returns an image-sized map in (0, 1) whose max is the score, deterministically.
    """
    query = generate_phantom(PhantomFamily.named("blob"), seed=5, size=32)
    first = infer(query, tiny_model)
    second = infer(query, tiny_model)
    assert first.anomaly_map.shape == (32, 32)
    assert first.score == float(first.anomaly_map.max())
    assert np.all(first.anomaly_map > 0) and np.all(first.anomaly_map < 1)
    np.testing.assert_array_equal(first.anomaly_map, second.anomaly_map)


def test_infer_many_matches_infer(tiny_model):
    """
    Test that batched inference agrees with one-at-a-time inference.
    """
    family = PhantomFamily.named("ring")
    queries = [generate_phantom(family, seed=s, size=32) for s in range(3)]
    batched = infer_many(queries, tiny_model)
    for query, result in zip(queries, batched):
        np.testing.assert_allclose(result.anomaly_map, infer(query, tiny_model).anomaly_map, atol=1e-5)


def test_infer_rejects_wrong_size(tiny_model):
    """
    Test that a query of the wrong side raises a shape error.
    """
    with pytest.raises(ShapeError):
        infer(np.zeros((64, 64)), tiny_model)


def test_save_heatmap_scaling(tmp_path):
    """
    Test that S_a is written as round(255 · S_a) grayscale.
    """
    path = save_heatmap(np.array([[0.0, 0.5], [1.0, 0.2]]), tmp_path / "map.png")
    with PILImage.open(path) as image:
        pixels = np.asarray(image)
    np.testing.assert_array_equal(pixels, [[0, 128], [255, 51]])


def test_evaluate_report(tiny_model, blob_dataset, tmp_path):
    """
    Test that evaluate scores every test image, defines both metrics and writes heatmaps.
    """
    report = evaluate(tiny_model, blob_dataset, heatmap_dir=tmp_path / "maps", provenance={"run": "unit"})
    assert len(report.scores) == 8
    assert list(report.scores.label) == [0] * 4 + [1] * 4
    assert 0.0 <= report.image_auroc <= 1.0
    assert 0.0 <= report.pixel_auroc <= 1.0
    assert len(list((tmp_path / "maps").glob("*_heatmap.png"))) == 8

    saved = json.loads(report.save(tmp_path / "report.json").read_text())
    assert saved["provenance"] == {"run": "unit"}
    assert len(saved["scores"]) == 8


def test_evaluate_resizes_larger_manifest(tiny_model, tmp_path):
    """
    Test that a 64px manifest trains and evaluates on the 32px encoder, masks resized with the images.
    """
    manifest = build_dataset(PhantomFamily.named("blob"), 2, 3, 3, seed=5, out_dir=tmp_path / "big", size=64)
    model, _ = train(SupportSet.from_manifest(manifest), tiny_model, TrainConfig(steps=1, batch_size=2, seed=1))
    report = evaluate(model, manifest, heatmap_dir=tmp_path / "maps")
    assert report.image_auroc is not None
    assert report.pixel_auroc is not None
    heatmap = np.asarray(PILImage.open(next((tmp_path / "maps").glob("*_heatmap.png"))))
    assert heatmap.shape == (32, 32)


@pytest.fixture
def blob_checkpoint(tmp_path, tiny_model, blob_dataset):
    model, _ = train(SupportSet.from_manifest(blob_dataset), tiny_model, TrainConfig(steps=1, batch_size=2, seed=3))
    return save_checkpoint(model, tmp_path / "blob.ckpt", {"family": "blob", "seed": 3, "config_digest": "abc"})


def test_transfer_eval_cross_family(blob_checkpoint, ring_dataset, tiny_encoders):
    """
    Test that a blob-trained checkpoint is scored on the ring split with provenance and baseline.
    """
    report = transfer_eval(blob_checkpoint, ring_dataset, tiny_encoders)
    provenance = report.provenance
    assert provenance["train_family"] == "blob"
    assert provenance["test_family"] == "ring"
    assert provenance["train_seed"] == 3
    assert provenance["dataset_seed"] == 12
    assert provenance["encoder_seed"] == 0
    assert provenance["config_digest"] == "abc"
    assert report.image_auroc is not None and report.baseline_image_auroc is not None
    assert report.baseline_pixel_auroc is not None


def test_transfer_eval_diagonal_without_baseline(blob_checkpoint, blob_dataset):
    """
    Test the same-family case, rebuilding the encoder from the checkpoint.
    """
    report = transfer_eval(blob_checkpoint, blob_dataset, include_baseline=False)
    assert report.provenance["train_family"] == report.provenance["test_family"] == "blob"
    assert report.baseline_image_auroc is None
