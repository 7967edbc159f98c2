import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from trapfilter.errors import AlreadyGray, AlreadySplit, DecodeError, EmptyClass
from trapfilter.imageio import (
    ANIMAL,
    EMPTY,
    DatasetManifest,
    ManifestEntry,
    balance,
    equalize,
    histogram_features,
    load_image,
    resize_bilinear,
    save_image,
    split_counts,
    split_dataset,
    to_grayscale,
)
from trapfilter.synth import SynthSpec, synth_generate

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


def _png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return path


class TestLoad:
    def test_black(self, tmp_path):
        img = load_image(_png(tmp_path / "a.png", np.zeros((2, 2, 3))))
        assert img.shape == (3, 2, 2)
        assert img.dtype == np.float32
        assert np.all(img == 0.0)

    def test_red_pixel(self, tmp_path):
        img = load_image(_png(tmp_path / "r.png", [[[255, 0, 0]]]))
        assert img.ravel().tolist() == [1.0, 0.0, 0.0]

    def test_fixture_with_extremes(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(256, 384, 3))
        arr[0, 0] = 0
        arr[-1, -1] = 255
        img = load_image(_png(tmp_path / "f.png", arr))
        assert img.shape == (3, 256, 384)
        assert img.min() == 0.0 and img.max() == 1.0
        np.testing.assert_array_equal(np.rint(img * 255).astype(int), arr.transpose(2, 0, 1))

    def test_save_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (3, 8, 12)) / 255.0
        save_image(img, tmp_path / "x.png")
        np.testing.assert_allclose(load_image(tmp_path / "x.png"), img, atol=1e-7)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")

    def test_garbage(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"not an image at all")
        with pytest.raises(DecodeError):
            load_image(p)


class TestResize:
    def test_constant(self):
        img = np.full((3, 7, 5), 0.5, dtype=np.float32)
        np.testing.assert_allclose(resize_bilinear(img, 11, 3), 0.5, atol=1e-7)

    def test_identity_bitwise(self):
        img = np.random.default_rng(0).random((3, 2, 2)).astype(np.float32)
        out = resize_bilinear(img, 2, 2)
        assert out.tobytes() == img.tobytes()

    def test_checkerboard_block_means(self):
        board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float32)
        board[0, 0] = 0.25  # make the blocks differ
        img = np.stack([board] * 3)
        out = resize_bilinear(img, 2, 2)
        # align_corners=False at 2x sits exactly between the 2x2 source pixels
        expected = board.reshape(2, 2, 2, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(out[0], expected, atol=1e-7)

    @given(arrays(np.float32, (3, 5, 6), elements=unit), st.integers(1, 12), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_range_and_shape(self, img, w, h):
        out = resize_bilinear(img, w, h)
        assert out.shape == (3, h, w)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEqualize:
    def test_four_levels(self):
        ch = np.array([[0, 85], [170, 255]]) / 255.0
        out = equalize(np.stack([ch] * 3))
        np.testing.assert_allclose(out[0], [[0, 1 / 3], [2 / 3, 1]], atol=1e-7)

    def test_uniform_fixed_point(self):
        ch = (np.arange(256) / 255.0).reshape(16, 16)
        img = np.stack([ch] * 3).astype(np.float32)
        assert np.abs(equalize(img) - img).max() <= 1 / 255 + 1e-7

    def test_constant_unchanged(self):
        img = np.full((3, 4, 4), 0.3, dtype=np.float32)
        np.testing.assert_array_equal(equalize(img), img)

    @given(arrays(np.uint8, (3, 6, 6)))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_in_range(self, raw):
        img = raw.astype(np.float32) / 255.0
        once = equalize(img)
        assert once.min() >= 0.0 and once.max() <= 1.0
        assert np.abs(equalize(once) - once).max() <= 1 / 255 + 1e-6


class TestGray:
    def test_extremes(self):
        assert to_grayscale(np.ones((3, 1, 1))).item() == pytest.approx(1.0)
        assert to_grayscale(np.zeros((3, 1, 1))).item() == 0.0

    def test_red(self):
        red = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)
        assert to_grayscale(red).item() == pytest.approx(0.299, abs=1e-7)

    def test_already_gray(self):
        with pytest.raises(AlreadyGray):
            to_grayscale(np.zeros((1, 2, 2)))


class TestHistogram:
    def test_constant_spike(self):
        h = histogram_features(np.full((3, 4, 4), 0.4), 256).reshape(3, 256)
        assert np.all(h.max(axis=1) == 1.0)
        assert np.all((h > 0).sum(axis=1) == 1)

    def test_four_bins(self):
        gray = np.array([[0, 0], [0.5, 1.0]])[None]
        np.testing.assert_allclose(histogram_features(gray, 4), [0.5, 0, 0.25, 0.25])

    @given(arrays(np.float32, (3, 4, 5), elements=unit), st.integers(2, 64))
    @settings(max_examples=40, deadline=None)
    def test_sums_to_channels(self, img, bins):
        assert histogram_features(img, bins).sum() == pytest.approx(3.0)


def _manifest(n_empty, n_animal):
    return DatasetManifest(
        [ManifestEntry(f"e{i}.png", EMPTY) for i in range(n_empty)]
        + [ManifestEntry(f"a{i}.png", ANIMAL) for i in range(n_animal)])


class TestSplit:
    def test_exact_division(self):
        out = split_dataset(_manifest(10, 10), seed=0)
        for label in (EMPTY, ANIMAL):
            assert [len(out.select(s, label)) for s in ("train", "val", "test")] == [6, 2, 2]

    def test_deterministic(self):
        assert split_dataset(_manifest(30, 17), 4) == split_dataset(_manifest(30, 17), 4)

    def test_large_counts(self):
        c = split_counts(45728)
        for name, want in (("train", 27436), ("val", 9146), ("test", 9146)):
            assert abs(c[name] - want) <= 1
        assert sum(c.values()) == 45728

    def test_per_class_test_counts(self):
        # per-class remainders of the stratified split
        assert split_counts(37503)["test"] == 7500
        assert split_counts(8225)["test"] == 1645

    def test_already_split(self):
        m = split_dataset(_manifest(5, 5), 0)
        with pytest.raises(AlreadySplit):
            split_dataset(m, 0)

    @given(st.integers(0, 80), st.integers(0, 80), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_partition(self, ne, na, seed):
        out = split_dataset(_manifest(ne, na), seed)
        assert sorted(e.path for e in out.entries) == sorted(e.path for e in _manifest(ne, na).entries)
        for label, n in ((EMPTY, ne), (ANIMAL, na)):
            got = [len(out.select(s, label)) for s in ("train", "val", "test")]
            assert sum(got) == n
            for g, frac in zip(got, (0.6, 0.2, 0.2)):
                assert abs(g - frac * n) <= 1


def _items(n_empty, n_animal, cluster=0):
    return [(np.array([float(i), cluster]), EMPTY) for i in range(n_empty)] + \
           [(np.array([100.0 + i, cluster]), ANIMAL) for i in range(n_animal)]


class TestBalance:
    def test_already_balanced(self):
        out = balance(_items(100, 100), "global", 0)
        assert len(out) == 200

    def test_global(self):
        out = balance(_items(300, 100), "global", 0)
        labels = [lab for _, lab in out]
        assert labels.count(EMPTY) == 100 and labels.count(ANIMAL) == 100

    def test_per_cluster_never_oversamples(self):
        items = _items(10, 2, cluster=0) + _items(4, 8, cluster=1)
        out = balance(items, "per_cluster", 0)
        tally = {}
        for fv, lab in out:
            tally[(int(fv[-1]), lab)] = tally.get((int(fv[-1]), lab), 0) + 1
        assert tally == {(0, EMPTY): 2, (0, ANIMAL): 2, (1, EMPTY): 4, (1, ANIMAL): 8}

    def test_none(self):
        assert len(balance(_items(30, 3), "none", 0)) == 33

    def test_missing_class(self):
        with pytest.raises(EmptyClass):
            balance(_items(5, 0), "global", 0)

    @given(st.integers(1, 40), st.integers(1, 40), st.sampled_from(["global", "per_cluster"]), st.integers(0, 99))
    @settings(max_examples=50, deadline=None)
    def test_animals_kept_nothing_duplicated(self, ne, na, mode, seed):
        items = _items(ne, na, 0) + _items(ne // 2 + 1, na // 2 + 1, 1)
        out = balance(items, mode, seed)
        keys = [(tuple(fv), lab) for fv, lab in out]
        assert len(set(keys)) == len(keys)
        animals_in = [tuple(fv) for fv, lab in items if lab == ANIMAL]
        assert [tuple(fv) for fv, lab in out if lab == ANIMAL] == animals_in


class TestSynth:
    spec = SynthSpec(n_empty=21, n_animal=14)

    def test_deterministic(self):
        a = synth_generate(self.spec, 3)
        b = synth_generate(self.spec, 3)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.images, b.images))
        assert a.manifest == b.manifest

    def test_scene_distribution(self):
        c = synth_generate(self.spec, 0)
        counts = np.bincount(c.scene_ids[c.labels == EMPTY], minlength=7)
        assert counts.max() - counts.min() <= 1

    def test_diff_only_inside_bbox(self):
        c = synth_generate(self.spec, 5)
        for i, bg in c.backgrounds.items():
            y0, y1, x0, x1 = c.bboxes[i]
            diff = np.abs(c.images[i] - bg).max(axis=0)
            outside = diff.copy()
            outside[y0:y1, x0:x1] = 0
            assert outside.max() == 0
            assert diff[y0:y1, x0:x1].max() > 0

    def test_range(self):
        c = synth_generate(self.spec, 1)
        for img in c.images:
            assert img.shape == (3, 64, 96)
            assert 0.0 <= img.min() and img.max() <= 1.0
