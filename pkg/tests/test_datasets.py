import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fewshot.datasets import (
    Augmenter,
    ClassSplit,
    DatasetError,
    GlyphSpec,
    LabeledImageSet,
    augment,
    dataset_fingerprint,
    export_image_directory,
    generate_glyph_dataset,
    hflip,
    load_image_directory,
    split_classes,
)


def test_glyph_counts():
    ds = generate_glyph_dataset(GlyphSpec(n_classes=50, samples_per_class=20, image_size=28, seed=7))
    assert len(ds) == 1000 and ds.n_classes == 50
    assert ds.image_shape == (28, 28, 1)
    assert np.bincount(ds.labels).tolist() == [20] * 50


def test_glyphs_deterministic():
    spec = GlyphSpec(n_classes=6, samples_per_class=4, seed=3)
    a, b = generate_glyph_dataset(spec), generate_glyph_dataset(spec)
    assert dataset_fingerprint(a) == dataset_fingerprint(b)
    c = generate_glyph_dataset(GlyphSpec(n_classes=6, samples_per_class=4, seed=4))
    assert dataset_fingerprint(a) != dataset_fingerprint(c)


def test_glyph_pixels_in_unit_range(glyphs):
    assert glyphs.images.min() >= 0.0 and glyphs.images.max() <= 1.0
    # every glyph leaves ink on the canvas
    assert (glyphs.images.reshape(len(glyphs), -1).max(axis=1) > 0.5).all()


@pytest.mark.parametrize("field,value", [("n_classes", 1), ("samples_per_class", 1), ("image_size", 15),
                                          ("rotation", -0.1), ("stroke_count", (0, 2))])
def test_glyph_spec_validation(field, value):
    with pytest.raises(DatasetError):
        generate_glyph_dataset(GlyphSpec(**{field: value}))


def test_labeled_image_set_invariants():
    with pytest.raises(DatasetError):
        LabeledImageSet(np.zeros((3, 4, 4, 1)), np.array([0, 1]), ["a", "b"])
    with pytest.raises(DatasetError):
        LabeledImageSet(np.zeros((2, 4, 4, 1)), np.array([0, 2]), ["a", "b"])
    with pytest.raises(DatasetError, match="without images"):
        LabeledImageSet(np.zeros((2, 4, 4, 1)), np.array([0, 0]), ["a", "b"])


def test_glyphs_are_learnable(glyphs):
    """A conventionally trained 4-layer CNN separates 10 glyph classes on held-out instances."""
    from fewshot.methods import Baseline, BackboneConfig, BatchStream
    from fewshot.datasets import to_nchw

    classes = np.arange(10)
    idx = np.concatenate([glyphs.indices_by_class[c] for c in classes])
    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for c in classes:
        own = rng.permutation(glyphs.indices_by_class[c])
        cut = int(0.8 * own.size)
        train_idx.extend(own[:cut])
        test_idx.extend(own[cut:])
    sub = LabeledImageSet(glyphs.images[train_idx], glyphs.labels[train_idx], glyphs.class_names[:10])
    assert idx.size == 240
    model = Baseline(BackboneConfig(), np.random.default_rng(1), n_classes=10)
    opt = model.make_optimizer("adam", 1e-3)
    stream = BatchStream(sub, list(classes), batch_size=16, rng=np.random.default_rng(2))
    for _ in range(12):
        model.train_epoch(stream, opt)
    feats = model.embed(to_nchw(glyphs.images[test_idx]), training=False)
    scores = model.head_scores(feats, model.params["head.weight"], model.params["head.bias"]).data
    acc = float(np.mean(scores.argmax(1) == glyphs.labels[test_idx]))
    assert acc >= 0.9, acc


class TestDirectory:
    def test_two_by_three(self, tmp_path):
        for name in ("cat", "dog"):
            (tmp_path / name).mkdir()
            for i in range(3):
                Image.fromarray(np.full((8, 8), 40 * i, np.uint8), "L").save(tmp_path / name / f"{i}.png")
        ds = load_image_directory(tmp_path)
        assert len(ds) == 6 and ds.class_names == ["cat", "dog"] and ds.image_shape == (8, 8, 1)

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image_directory(tmp_path)

    def test_empty_class_directory(self, tmp_path):
        (tmp_path / "a").mkdir()
        with pytest.raises(DatasetError, match="no images"):
            load_image_directory(tmp_path)

    def test_undecodable_file_lists_path(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "broken.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="broken.png"):
            load_image_directory(tmp_path)

    def test_resize_and_rgb(self, tmp_path):
        (tmp_path / "a").mkdir()
        Image.fromarray(np.zeros((10, 10, 3), np.uint8), "RGB").save(tmp_path / "a" / "x.png")
        ds = load_image_directory(tmp_path, image_size=6)
        assert ds.image_shape == (6, 6, 3)

    def test_round_trip(self, tmp_path):
        ds = generate_glyph_dataset(GlyphSpec(n_classes=4, samples_per_class=5, seed=1))
        export_image_directory(ds, tmp_path)
        back = load_image_directory(tmp_path)
        order = np.argsort(ds.labels, kind="stable")
        np.testing.assert_array_equal(back.labels, ds.labels[order])
        assert np.abs(back.images - ds.images[order]).max() <= 1 / 255 + 1e-6


class TestSplit:
    def test_paper_proportions(self):
        s = split_classes(100, (0.64, 0.16, 0.20), seed=0)
        assert (len(s.train_classes), len(s.val_classes), len(s.test_classes)) == (64, 16, 20)

    def test_glyph_default_split(self, glyphs, glyph_split):
        assert [len(c) for c in (glyph_split.train_classes, glyph_split.val_classes, glyph_split.test_classes)] == [50, 10, 20]

    def test_thirds(self):
        s = split_classes(3, (1 / 3, 1 / 3, 1 / 3))
        assert sorted(s.train_classes + s.val_classes + s.test_classes) == [0, 1, 2]

    def test_too_few_classes(self):
        with pytest.raises(DatasetError):
            split_classes(2, (0.5, 0.25, 0.25))

    @pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.5, 0.5)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(DatasetError):
            split_classes(20, ratios)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(5, 120))
    def test_disjoint_and_covering(self, seed, n):
        s = split_classes(n, (0.6, 0.2, 0.2), seed=seed)
        sets = [set(s.train_classes), set(s.val_classes), set(s.test_classes)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert sets[0] | sets[1] | sets[2] == set(range(n))

    def test_deterministic(self):
        assert split_classes(50, seed=4) == split_classes(50, seed=4)

    def test_overlap_rejected(self):
        with pytest.raises(DatasetError):
            ClassSplit([0, 1], [1], [2])

    def test_manifest_round_trip(self, tmp_path):
        names = [f"c{i}" for i in range(10)]
        s = split_classes(10, (0.6, 0.2, 0.2), seed=1)
        s.save(tmp_path / "split.json", names)
        assert ClassSplit.load(tmp_path / "split.json", names) == s


class TestAugment:
    def test_identity(self, rng):
        img = rng.uniform(size=(8, 8, 1)).astype(np.float32)
        np.testing.assert_array_equal(augment(img, rng, ()), img)

    def test_double_flip(self, rng):
        img = rng.uniform(size=(5, 7, 3))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_brightness_mean(self):
        img = np.full((6, 6, 1), 0.5, np.float32)
        rng = np.random.default_rng(0)
        means = [augment(img, rng, ("brightness",)).mean() for _ in range(1000)]
        assert abs(np.mean(means) - img.mean()) <= 0.05

    def test_shape_and_range(self, rng):
        aug = Augmenter(("flip", "crop", "brightness"))
        img = rng.uniform(size=(12, 12, 1)).astype(np.float32)
        for _ in range(20):
            out = aug(img, rng)
            assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_unknown_op(self):
        with pytest.raises(DatasetError):
            Augmenter(("rotate",))
