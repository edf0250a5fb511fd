import dataclasses

import numpy as np
import pytest

from ifer.faces import (CLASSES, NUM_CLASSES, FaceParams, dataset_arrays, dataset_hash, expression_label,
                        export_dataset, face_box, load_manifest, render_face, sample_dataset, sample_params)
from ifer.imageio import heat_overlay, hstack, load_png, save_png, to_uint8


def brute_label(p):
    """Label by priority scan: the first matching rule wins."""
    rules = [
        ("surprise", p.mouth_open > 0.6 and p.eye_open > 0.7),
        ("fear", p.mouth_open > 0.6),
        ("happy", p.mouth_curve > 0.4),
        ("anger", p.brow < -0.4),
        ("sad", p.mouth_curve < -0.4),
        ("disgust", p.eye_open < 0.3),
    ]
    for name, hit in rules:
        if hit:
            return CLASSES.index(name)
    return CLASSES.index("neutral")


def test_seven_classes():
    assert NUM_CLASSES == 7 and CLASSES[0] == "neutral"


def test_label_rule_over_random_grid(rng):
    for _ in range(2000):
        p = FaceParams(eye_open=rng.uniform(0, 1), brow=rng.uniform(-1, 1),
                       mouth_curve=rng.uniform(-1, 1), mouth_open=rng.uniform(0, 1))
        assert expression_label(p) == brute_label(p)


def test_sampled_labels_balanced():
    params = sample_params(70, 3)
    labels = [expression_label(p) for p in params]
    assert labels == [i % 7 for i in range(70)]


def test_render_shape_range_dtype():
    img = render_face(FaceParams())
    assert img.shape == (3, 64, 64) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1


def test_render_reproducible():
    p = sample_params(1, 11)[0]
    assert np.array_equal(render_face(p), render_face(p))


def test_jitter_changes_pixels_not_label():
    p = sample_params(1, 2)[0]
    q = dataclasses.replace(p, jitter_seed=p.jitter_seed + 1)
    assert expression_label(p) == expression_label(q)
    assert not np.array_equal(render_face(p), render_face(q))


def test_expression_params_change_pixels():
    base = FaceParams()
    for change in ({"mouth_open": 1.0}, {"eye_open": 0.0}, {"brow": -1.0}, {"mouth_curve": 1.0}):
        assert not np.array_equal(render_face(base), render_face(dataclasses.replace(base, **change)))


@pytest.mark.parametrize("field,value", [("cx", 0.9), ("eye_open", 1.5), ("brow", float("nan")),
                                         ("jitter_seed", -1)])
def test_out_of_range_rejected(field, value):
    with pytest.raises(ValueError, match=field):
        render_face(dataclasses.replace(FaceParams(), **{field: value}))


def test_splits_disjoint():
    train = set(sample_params(50, 0, "train"))
    test = set(sample_params(50, 0, "test"))
    assert not train & test


def test_unknown_split():
    with pytest.raises(ValueError, match="split"):
        sample_params(3, 0, "holdout")


def test_face_box_contains_face():
    p = FaceParams()
    x0, y0, x1, y1 = face_box(p)
    assert (x0, y0, x1, y1) == pytest.approx((0.19, 0.13, 0.81, 0.87))


def test_dataset_hash_stable():
    a = sample_dataset(7, 5)
    b = sample_dataset(7, 5)
    assert dataset_hash(a) == dataset_hash(b)
    assert dataset_hash(a) != dataset_hash(sample_dataset(7, 6))


def test_dataset_arrays_match_triples():
    images, labels = dataset_arrays(5, 1)
    items = sample_dataset(5, 1)
    assert np.array_equal(images, np.stack([i for i, _, _ in items]))
    assert labels.tolist() == [lab for _, lab, _ in items]


def test_export_roundtrip(tmp_path):
    items = sample_dataset(4, 9, "val")
    manifest = export_dataset(items, tmp_path / "ds")
    back = load_manifest(manifest)
    assert len(back) == 4
    for (img, lab, p), (img2, lab2, p2) in zip(items, back):
        assert lab == lab2 and p == p2
        assert np.abs(img - img2).max() <= 0.5 / 255 + 1e-6


class TestImageIO:
    def test_png_roundtrip_quantised(self, tmp_path):
        img = np.random.default_rng(0).random((3, 8, 8))
        back = load_png(save_png(img, tmp_path / "a.png"))
        assert np.array_equal(back, to_uint8(img).transpose(2, 0, 1) / np.float32(255.0))

    def test_resize_on_load(self, tmp_path):
        path = save_png(np.zeros((3, 32, 32)), tmp_path / "b.png")
        assert load_png(path, 64).shape == (3, 64, 64)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            to_uint8(np.zeros((8, 8)))

    def test_hstack_and_overlay(self):
        a = np.zeros((3, 4, 4))
        assert hstack([a, a, a]).shape == (3, 4, 12)
        assert np.array_equal(heat_overlay(a, np.zeros((4, 4))), a)


def test_render_c_contiguous():
    assert render_face(FaceParams()).flags["C_CONTIGUOUS"]
