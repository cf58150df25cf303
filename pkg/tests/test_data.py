import json
import pickle

import numpy as np
import pytest

from modprompt.data import (
    MODALITIES,
    ConfigError,
    DatasetError,
    GenerationConfig,
    GroundTruth,
    SceneLimits,
    generate_scene,
    read_manifest,
    render_modality,
    shape_mask,
    write_dataset,
    load_dataset,
)


def test_generate_scene_is_deterministic():
    a = generate_scene(42)
    b = generate_scene(42)
    assert pickle.dumps(a) == pickle.dumps(b)
    assert a != generate_scene(43)


def test_forced_single_object():
    limits = SceneLimits(min_objects=1, max_objects=1)
    for seed in range(20):
        assert len(generate_scene(seed, limits=limits).objects) == 1


def test_validity_scan_over_1000_seeds():
    limits = SceneLimits()
    H, W = limits.canvas
    for seed in range(1000):
        spec = generate_scene(seed)
        assert limits.min_objects <= len(spec.objects) <= limits.max_objects
        for o in spec.objects:
            x1, y1, x2, y2 = o.box
            assert 0 <= x1 < x2 <= W and 0 <= y1 < y2 <= H, (seed, o)
            assert o.category in ("disk", "rectangle", "triangle")
            assert 0.0 <= o.intensity <= 1.0


@pytest.mark.parametrize(
    "limits",
    [SceneLimits(max_extent=200), SceneLimits(min_extent=30, max_extent=20), SceneLimits(min_objects=0)],
)
def test_unsatisfiable_limits(limits):
    with pytest.raises(ConfigError):
        generate_scene(0, limits=limits)


def test_vocab_checks():
    with pytest.raises(ConfigError):
        generate_scene(0, vocab=[])
    with pytest.raises(ConfigError):
        generate_scene(0, vocab=["person"])
    spec = generate_scene(0, vocab=["disk"])
    assert all(o.category == "disk" for o in spec.objects)


def test_masks_fill_their_boxes():
    for seed in range(50):
        spec = generate_scene(seed)
        for o in spec.objects:
            m = shape_mask(o, spec.canvas)
            ys, xs = np.nonzero(m > 0)
            x1, y1, x2, y2 = o.box
            assert xs.min() >= x1 and xs.max() < x2 and ys.min() >= y1 and ys.max() < y2
            # tight: the mask touches every side of the box
            assert xs.min() <= x1 + 1 and xs.max() >= x2 - 2 and ys.min() <= y1 + 1 and ys.max() >= y2 - 2


@pytest.mark.parametrize("modality", MODALITIES)
def test_render_range_and_shape(modality):
    for seed in range(10):
        img = render_modality(generate_scene(seed), modality)
        assert img.pixels.shape == (96, 96, 3)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_render_unknown_modality():
    with pytest.raises(ValueError):
        render_modality(generate_scene(0), "thermal")


def test_render_deterministic_including_noise():
    spec = generate_scene(5)
    for m in MODALITIES:
        assert render_modality(spec, m).pixels.tobytes() == render_modality(spec, m).pixels.tobytes()


def test_zero_intensity_object_is_visible_in_rgb():
    from dataclasses import replace

    spec = generate_scene(3, limits=SceneLimits(min_objects=1, max_objects=1))
    obj = replace(spec.objects[0], intensity=0.0)
    spec = replace(spec, objects=(obj,))
    with_obj = render_modality(spec, "rgb").pixels
    empty = render_modality(replace(spec, objects=()), "rgb").pixels
    inside = shape_mask(obj, spec.canvas) == 1.0
    assert not np.allclose(with_obj[inside], empty[inside])
    # paired boxes: the ground truth does not depend on the modality
    assert GroundTruth.from_scene(spec).boxes == [obj.box]


def test_pseudo_ir_inverts_contrast():
    spec = generate_scene(1)
    inside = np.zeros(spec.canvas, bool)
    for o in spec.objects:
        inside |= shape_mask(o, spec.canvas) == 1.0
    rgb = render_modality(spec, "rgb").pixels.mean(-1)
    ir = render_modality(spec, "pseudo_ir").pixels.mean(-1)
    assert rgb[inside].mean() < rgb[~inside].mean()
    assert ir[inside].mean() > ir[~inside].mean()


def test_ground_truth_validation():
    with pytest.raises(ValueError):
        GroundTruth([[0, 0, 1, 1]], [])
    with pytest.raises(ValueError):
        GroundTruth([[5, 0, 1, 1]], ["disk"])


def test_write_load_roundtrip(tmp_path):
    cfg = GenerationConfig(str(tmp_path / "ds"), "pseudo_ir", {"train": 6, "test": 4}, seed=3)
    manifest = write_dataset(cfg)
    assert sum(manifest.split_sizes.values()) == 10
    m = read_manifest(tmp_path / "ds")
    assert m.schema == "modprompt-data/1" and m.split_sizes == {"train": 6, "test": 4}
    raw = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert raw["schema"] == "modprompt-data/1"

    from modprompt.data import scene_seed

    for split, n in (("train", 6), ("test", 4)):
        loaded = load_dataset(tmp_path / "ds", split)
        assert len(loaded) == n
        for i, (img, gt) in enumerate(loaded):
            spec = generate_scene(scene_seed(3, split, i))
            ref = render_modality(spec, "pseudo_ir").pixels
            assert np.abs(img.pixels - ref).max() <= 0.5 / 255 + 1e-7
            assert gt.boxes == GroundTruth.from_scene(spec).boxes
            assert gt.categories == GroundTruth.from_scene(spec).categories
            assert (tmp_path / "ds" / split / "images" / f"{i:05d}.png").exists()


def test_rgb_and_ir_are_paired(tmp_path):
    for m in ("rgb", "pseudo_depth"):
        write_dataset(GenerationConfig(str(tmp_path / m), m, {"test": 5}))
    a = load_dataset(tmp_path / "rgb", "test")
    b = load_dataset(tmp_path / "pseudo_depth", "test")
    assert [g.boxes for _, g in a] == [g.boxes for _, g in b]


@pytest.mark.parametrize("corruption", ["garbage", "missing_key", "delete"])
def test_tampered_annotation_is_named(tmp_path, corruption):
    root = tmp_path / "ds"
    write_dataset(GenerationConfig(str(root), "rgb", {"test": 4}))
    bad = root / "test" / "annotations" / "00002.json"
    if corruption == "garbage":
        bad.write_text("{not json")
    elif corruption == "missing_key":
        bad.write_text(json.dumps({"boxes": [[0, 0, 4, 4]]}))
    else:
        bad.unlink()
    with pytest.raises(DatasetError, match="00002.json"):
        load_dataset(root, "test")


def test_missing_manifest_or_split(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "test")
    write_dataset(GenerationConfig(str(tmp_path / "ds"), "rgb", {"test": 1}))
    with pytest.raises(DatasetError, match="train"):
        load_dataset(tmp_path / "ds", "train")
