import json
import math

import numpy as np
import pytest

from src.analysis.covering_bound import BoundInputs, bound_inputs_from_discriminator, covering_bound
from src.analysis.detection_metrics import (ImagePredictions, average_precision, evaluate_detections, evaluate_map,
                                            match_detections)
from src.analysis.domain_divergence import proxy_a_distance
from src.analysis.feature_dumps import dump_features, layer_features, pca_project
from src.data.preprocessing import CLASS_NAMES, SOURCE, TARGET
from src.errors import ConfigError, DivergenceError
from src.losses.alignment import Discriminator
from src.losses.matching import GroundTruth


def predictions(labels, scores, boxes):
    return ImagePredictions(np.asarray(labels), np.asarray(scores, dtype=float), np.asarray(boxes, dtype=float))


GT_BOX = [0.3, 0.3, 0.2, 0.2]
FAR_BOX = [0.8, 0.8, 0.1, 0.1]


# === Average precision ===

def test_correct_high_score_and_spurious_low_score():
    pred = predictions([0, 0], [0.9, 0.2], [GT_BOX, FAR_BOX])
    report = evaluate_detections([pred], [GroundTruth([0], [GT_BOX])])
    assert report.per_class_ap["circle"] == pytest.approx(1.0)
    assert report.per_class_ap["square"] is None and report.per_class_ap["triangle"] is None
    assert report.map == pytest.approx(1.0)


def test_spurious_high_score_halves_precision():
    pred = predictions([0, 0], [0.9, 0.2], [FAR_BOX, GT_BOX])
    report = evaluate_detections([pred], [GroundTruth([0], [GT_BOX])])
    assert report.per_class_ap["circle"] == pytest.approx(0.5)


def test_no_predictions_give_zero_ap():
    report = evaluate_detections([predictions([], [], np.zeros((0, 4)))], [GroundTruth([1], [GT_BOX])])
    assert report.per_class_ap["square"] == 0.0
    assert report.map == 0.0


def test_each_object_matches_once():
    pred = predictions([2, 2], [0.9, 0.8], [GT_BOX, GT_BOX])
    scores, is_tp, num_gt = match_detections([pred], [GroundTruth([2], [GT_BOX])], class_id=2)
    assert is_tp.tolist() == [True, False] and num_gt == 1


def test_score_threshold_drops_detections():
    pred = predictions([0, 0], [0.9, 0.2], [FAR_BOX, GT_BOX])
    report = evaluate_detections([pred], [GroundTruth([0], [GT_BOX])], score_threshold=0.5)
    assert report.num_predictions == 1
    assert report.per_class_ap["circle"] == 0.0


def test_all_point_interpolation():
    ap, recall, precision = average_precision(np.array([0.9, 0.8, 0.7]), np.array([True, False, True]), 2)
    np.testing.assert_allclose(recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3])
    assert ap == pytest.approx(0.5 * 1.0 + 0.5 * 2 / 3)


def test_ap_invariant_to_monotone_score_transform(rng):
    preds, gts = [], []
    for _ in range(6):
        n = int(rng.integers(1, 4))
        centres = rng.uniform(0.2, 0.8, size=(n, 2))
        boxes = np.column_stack([centres, np.full((n, 2), 0.2)])
        gts.append(GroundTruth(rng.integers(0, 3, size=n), boxes))
        jitter = boxes + rng.normal(0, 0.03, size=boxes.shape) * [1, 1, 0, 0]
        preds.append(predictions(rng.integers(0, 3, size=n), rng.uniform(0.05, 1.0, size=n), jitter))
    squashed = [predictions(p.labels, p.scores ** 3, p.boxes) for p in preds]
    assert evaluate_detections(squashed, gts).per_class_ap == evaluate_detections(preds, gts).per_class_ap


def test_model_evaluation_report(tiny_detector, tiny_scenes):
    report = evaluate_map(tiny_detector, tiny_scenes[TARGET], batch_size=3)
    assert 0.0 <= report.map <= 1.0
    assert report.num_predictions == 4 * len(tiny_scenes[TARGET])
    data = json.loads(report.to_json())
    assert set(data["per_class_ap"]) == set(CLASS_NAMES)
    assert "pr_curves" not in data


def test_empty_scene_list_scores_zero(tiny_detector):
    assert evaluate_map(tiny_detector, []).map == 0.0


# === Covering bound ===

def test_covering_bound_reference_value():
    inputs = BoundInputs(spectral_norms=[1, 1, 1], reference_distances=[1, 1, 1], width=256)
    assert covering_bound(inputs) == pytest.approx(35.3484, abs=1e-3)
    assert covering_bound(inputs) == pytest.approx(3 * 17 * math.log(2.0), abs=1e-12)


def test_covering_bound_zero_distance():
    assert covering_bound(BoundInputs([2.0, 3.0], [0.0, 0.0], width=8)) == 0.0


def test_covering_bound_scaling():
    base = BoundInputs([1.5, 0.7, 2.0], [0.3, 0.2, 0.4], width=16, input_norm=2.0)
    wider = BoundInputs([1.5, 0.7, 2.0], [0.3, 0.2, 0.4], width=16, input_norm=2.0, epsilon=2.0)
    assert covering_bound(wider) == pytest.approx(covering_bound(base) / 4)
    farther = BoundInputs([1.5, 0.7, 2.0], [0.3, 0.5, 0.4], width=16, input_norm=2.0)
    assert covering_bound(farther) > covering_bound(base)


def test_covering_bound_rejects_zero_spectral_norm():
    with pytest.raises(ConfigError):
        covering_bound(BoundInputs([0.0, 1.0], [1.0, 1.0], width=4))


def test_covering_bound_needs_one_value_per_layer():
    with pytest.raises(ConfigError):
        covering_bound(BoundInputs([1.0, 1.0], [1.0], width=4))


def test_bound_from_discriminator(rng):
    disc = Discriminator(6, rng)
    inputs = bound_inputs_from_discriminator(disc, disc)
    assert len(inputs.spectral_norms) == 3 and inputs.width == 6
    assert covering_bound(inputs) == 0.0
    moved = Discriminator(6, np.random.default_rng(1))
    assert covering_bound(bound_inputs_from_discriminator(moved, disc)) > 0


# === Proxy A-distance ===

def test_disjoint_point_masses_are_fully_separable():
    source = np.zeros((40, 3))
    target = np.ones((40, 3))
    assert proxy_a_distance(source, target, seed=0) == pytest.approx(2.0)


def test_identical_distributions_are_close():
    distances = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        distances.append(proxy_a_distance(rng.normal(size=(200, 4)), rng.normal(size=(200, 4)), seed=seed))
    assert np.median(distances) < 0.4
    assert all(0.0 <= d <= 2.0 for d in distances)


def test_too_few_samples(rng):
    with pytest.raises(DivergenceError):
        proxy_a_distance(rng.normal(size=(19, 2)), rng.normal(size=(40, 2)))


def test_unbalanced_domains(rng):
    with pytest.raises(DivergenceError):
        proxy_a_distance(rng.normal(size=(25, 2)), rng.normal(size=(60, 2)))


# === Feature dumps ===

@pytest.mark.parametrize("stage, rows_per_scene", [("backbone", 16), ("encoder", 2 * 16), ("decoder", 2 * 4)])
def test_dump_row_counts(tmp_path, tiny_detector, tiny_scenes, stage, rows_per_scene):
    scenes = tiny_scenes[SOURCE][:2] + tiny_scenes[TARGET][:2]
    table = dump_features(tiny_detector, scenes, stage, tmp_path / f"{stage}.csv")
    assert len(table) == 4 * rows_per_scene
    assert sorted(table["domain"].unique()) == [SOURCE, TARGET]
    assert sorted(table["scene"].unique()) == [0, 1, 2, 3]
    pca_lines = (tmp_path / f"{stage}.pca.dat").read_text().splitlines()
    assert pca_lines[0].startswith("#") and len(pca_lines) == len(table) + 1


def test_pooled_features_have_one_row_per_scene(tiny_detector, tiny_scenes):
    features = layer_features(tiny_detector, tiny_scenes[SOURCE], "encoder", pooled=True)
    assert sorted(features) == [1, 2]
    feats, domains, scene_idx = features[1]
    assert feats.shape == (4, 8)
    assert scene_idx.tolist() == [0, 1, 2, 3]


def test_unknown_stage(tiny_detector, tiny_scenes):
    with pytest.raises(ConfigError):
        layer_features(tiny_detector, tiny_scenes[SOURCE], "neck")


def test_rank_one_features_have_flat_second_component(rng):
    direction = rng.normal(size=5)
    features = rng.normal(size=(30, 1)) * direction + 3.0
    projected = pca_project(features)
    assert projected.shape == (30, 2)
    assert np.max(np.abs(projected[:, 1])) < 1e-10
    assert np.std(projected[:, 0]) > 0.1
