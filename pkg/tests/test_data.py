import filecmp
import json

import numpy as np
import pytest

from src.data.dataset_io import (ANNOTATIONS_FILE, MANIFEST_FILE, load_split, read_dataset, read_manifest, read_ppm,
                                 write_dataset, write_ppm, write_split)
from src.data.preprocessing import (NUM_CLASSES, SOURCE, TARGET, iterate_batches, paired_batches, prefetch,
                                    scenes_to_batch)
from src.data.synthetic_scenes import ShiftConfig, apply_shift, generate_scene, render_scene, shift_preset
from src.errors import ConfigError, DatasetFormatError, TrainingError

SIZE = (16, 16)


# === Scenes ===

def test_rendering_is_deterministic():
    image_a, gt_a = render_scene(7, SIZE, 3)
    image_b, gt_b = render_scene(7, SIZE, 3)
    np.testing.assert_array_equal(image_a, image_b)
    np.testing.assert_array_equal(gt_a.boxes, gt_b.boxes)
    assert 1 <= len(gt_a) <= 3
    assert np.all((gt_a.classes >= 0) & (gt_a.classes < NUM_CLASSES))
    assert np.all((gt_a.boxes > 0) & (gt_a.boxes <= 1))
    assert image_a.shape == (3,) + SIZE and image_a.min() >= 0 and image_a.max() <= 1


def test_domains_share_annotations():
    fog = shift_preset("fog_style")
    for seed in range(5):
        source = generate_scene(seed, SOURCE, fog, SIZE, 3)
        target = generate_scene(seed, TARGET, fog, SIZE, 3)
        np.testing.assert_array_equal(source.annotations.classes, target.annotations.classes)
        np.testing.assert_array_equal(source.annotations.boxes, target.annotations.boxes)
        assert not np.array_equal(source.image, target.image)


def test_neutral_shift_is_bit_identical():
    source = generate_scene(11, SOURCE, None, SIZE)
    target = generate_scene(11, TARGET, ShiftConfig(), SIZE)
    np.testing.assert_array_equal(source.image, target.image)


def test_crowded_scenes_keep_every_shape_visible():
    for seed in range(50):
        _, gt = render_scene(seed, SIZE, 8)
        assert 1 <= len(gt) <= 8
        x1, y1 = gt.boxes[:, 0] - gt.boxes[:, 2] / 2, gt.boxes[:, 1] - gt.boxes[:, 3] / 2
        x2, y2 = gt.boxes[:, 0] + gt.boxes[:, 2] / 2, gt.boxes[:, 1] + gt.boxes[:, 3] / 2
        area = gt.boxes[:, 2] * gt.boxes[:, 3]
        for i in range(len(gt)):
            for j in range(i):
                inter = max(0.0, min(x2[i], x2[j]) - max(x1[i], x1[j])) * \
                    max(0.0, min(y2[i], y2[j]) - max(y1[i], y1[j]))
                assert inter / min(area[i], area[j]) <= 0.3 + 1e-9


def test_fog_pulls_top_rows_towards_haze():
    image, _ = render_scene(3, SIZE, 2)
    shift = shift_preset("dense_fog")
    fogged = apply_shift(image, shift, np.random.default_rng(0))
    haze = np.asarray(shift.haze_color)[:, None]
    assert np.all(np.abs(fogged[:, 0, :] - haze) <= np.abs(image[:, 0, :] - haze) + 1e-12)
    assert np.abs(fogged[:, 0, :] - haze).mean() < 0.05
    np.testing.assert_array_equal(fogged[:, -1, :], image[:, -1, :])


def test_unknown_shift_preset():
    with pytest.raises(ConfigError):
        shift_preset("sandstorm")


def test_invalid_shift_values():
    with pytest.raises(ConfigError):
        ShiftConfig(fog_density=-1.0).validate()
    with pytest.raises(ConfigError):
        ShiftConfig(haze_color=(0.5, 1.5, 0.5)).validate()


def test_unknown_domain():
    with pytest.raises(ConfigError):
        generate_scene(0, 2)


# === PPM ===

def test_split_round_trip(tmp_path, scene_factory):
    scenes = scene_factory(3, TARGET, shift_preset("fog"))
    write_split(tmp_path / "split", scenes)
    loaded = list(read_dataset(tmp_path / "split"))
    assert [s.name for s in loaded] == ["img_00000.ppm", "img_00001.ppm", "img_00002.ppm"]
    for original, restored in zip(scenes, loaded):
        assert restored.domain == TARGET and restored.seed == original.seed
        assert np.max(np.abs(restored.image - original.image)) <= 0.5 / 255 + 1e-12
        np.testing.assert_array_equal(restored.annotations.classes, original.annotations.classes)
        np.testing.assert_allclose(restored.annotations.boxes, original.annotations.boxes, atol=1e-15)


def test_missing_image_is_named(tmp_path, scene_factory):
    directory = write_split(tmp_path / "split", scene_factory(2, SOURCE))
    (directory / "img_00001.ppm").unlink()
    with pytest.raises(DatasetFormatError) as info:
        list(read_dataset(directory))
    assert info.value.path == directory / "img_00001.ppm"


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(DatasetFormatError) as info:
        read_ppm(path)
    assert info.value.offset == 0


def test_bad_height_token_offset(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P6\n2 x\n255\n")
    with pytest.raises(DatasetFormatError, match="height") as info:
        read_ppm(path)
    assert info.value.offset == 5


def test_truncated_payload_offset(tmp_path):
    path = tmp_path / "a.ppm"
    write_ppm(path, np.full((3, 4, 4), 0.5))
    data = path.read_bytes()[:-7]
    path.write_bytes(data)
    with pytest.raises(DatasetFormatError, match="truncated") as info:
        read_ppm(path)
    assert info.value.offset == len(data)


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80")
    np.testing.assert_allclose(read_ppm(path)[:, 0, 0], [1.0, 0.0, 128 / 255])


def test_absent_image(tmp_path):
    with pytest.raises(DatasetFormatError, match="not found"):
        read_ppm(tmp_path / "nothing.ppm")


# === Annotations ===

def test_malformed_json_reports_offset(tmp_path):
    (tmp_path / ANNOTATIONS_FILE).write_text('[{"file": "a.ppm",, }]')
    with pytest.raises(DatasetFormatError) as info:
        list(read_dataset(tmp_path))
    assert info.value.offset == 18


def test_malformed_entry(tmp_path):
    (tmp_path / ANNOTATIONS_FILE).write_text(json.dumps([{"file": "a.ppm", "domain": 0}]))
    with pytest.raises(DatasetFormatError, match="entry 0"):
        list(read_dataset(tmp_path))


def test_empty_split_yields_nothing(tmp_path):
    write_split(tmp_path / "empty", [])
    assert list(read_dataset(tmp_path / "empty")) == []


# === Full dataset ===

def test_dataset_layout_and_manifest(tmp_path):
    manifest = write_dataset(tmp_path / "data", 3, shift_preset("fog"), seed=5, val_count=1,
                             image_size=SIZE, max_objects=2, shift_name="fog")
    assert read_manifest(tmp_path / "data") == json.loads(json.dumps(manifest))
    assert manifest["splits"] == {"source/train": {"count": 3}, "target/train": {"count": 3},
                                  "source/val": {"count": 1}, "target/val": {"count": 1}}
    assert manifest["shift"]["fog_density"] == 2.0
    source = load_split(tmp_path / "data", SOURCE, "train")
    target = load_split(tmp_path / "data", TARGET, "train")
    assert [s.seed for s in source] == [s.seed for s in target]


def test_regeneration_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / name, 2, shift_preset("fog_style"), seed=1, val_count=1, image_size=SIZE,
                      max_objects=2)
    files = [MANIFEST_FILE] + [f"{d}/{s}/{f}" for d in ("source", "target") for s in ("train", "val")
                               for f in (ANNOTATIONS_FILE, "img_00000.ppm")]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetFormatError, match="not found"):
        read_manifest(tmp_path)


def test_val_split_defaults_to_two_fifths(tmp_path):
    manifest = write_dataset(tmp_path / "data", 5, ShiftConfig(), image_size=SIZE, max_objects=2)
    assert manifest["val_count"] == 2
    assert len(load_split(tmp_path / "data", TARGET, "val")) == 2


# === Batching ===

def test_batch_stacks_one_domain(scene_factory):
    batch = scenes_to_batch(scene_factory(3, SOURCE))
    assert batch.images.shape == (3, 3) + SIZE
    assert len(batch) == 3 and batch.domain == SOURCE


def test_batch_errors(scene_factory):
    with pytest.raises(TrainingError):
        scenes_to_batch([])
    with pytest.raises(TrainingError):
        scenes_to_batch(scene_factory(1, SOURCE) + scene_factory(1, TARGET))


def test_iterate_batches_keeps_file_order(scene_factory):
    scenes = scene_factory(5, SOURCE)
    sizes = [len(b) for b in iterate_batches(scenes, 2)]
    assert sizes == [2, 2, 1]
    first = next(iterate_batches(scenes, 2))
    np.testing.assert_array_equal(first.images[1], scenes[1].image)


def test_paired_batches_cycle_small_target(scene_factory):
    pairs = list(paired_batches(scene_factory(5, SOURCE), scene_factory(2, TARGET), 2, np.random.default_rng(0)))
    assert [(len(s), len(t)) for s, t in pairs] == [(2, 2), (2, 2), (1, 1)]
    assert all(s.domain == SOURCE and t.domain == TARGET for s, t in pairs)


def test_paired_batches_need_both_splits(scene_factory, rng):
    with pytest.raises(TrainingError):
        list(paired_batches(scene_factory(2, SOURCE), [], 2, rng))


def test_prefetch_preserves_order():
    assert list(prefetch(iter(range(50)), depth=3)) == list(range(50))
    assert list(prefetch(iter(range(5)), depth=0)) == list(range(5))


def test_prefetch_reraises_producer_errors():
    def producer():
        yield 1
        yield 2
        raise TrainingError("producer failed")

    seen = []
    with pytest.raises(TrainingError, match="producer failed"):
        for item in prefetch(producer(), depth=2):
            seen.append(item)
    assert seen == [1, 2]
