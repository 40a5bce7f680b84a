import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitnoise import datasets as D


class TestIdxContainer:
    @pytest.mark.parametrize("dtype", ["u1", "i1", "i2", "i4", "f4", "f8"])
    def test_round_trip_dtypes(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        arr = (rng.uniform(-100, 100, (4, 3, 2))).astype(dtype)
        path = tmp_path / "a.idx"
        D.write_idx(path, arr)
        back = D.read_idx(path)
        assert back.dtype == np.dtype(dtype)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_round_trip_gzip(self, tmp_path):
        arr = np.arange(24, dtype=np.int32).reshape(2, 3, 4)
        path = tmp_path / "a.idx.gz"
        D.write_idx(path, arr)
        np.testing.assert_array_equal(D.read_idx(path), arr)
        # really gzip on disk
        assert path.read_bytes()[:2] == b"\x1f\x8b"

    def test_round_trip_1d(self, tmp_path):
        arr = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
        path = tmp_path / "v.idx"
        D.write_idx(path, arr)
        np.testing.assert_array_equal(D.read_idx(path), arr)

    def test_write_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(D.DatasetError, match="no IDX type code"):
            D.write_idx(tmp_path / "b.idx", np.zeros(3, dtype=np.complex128))

    def test_read_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x01\x00\x08\x01" + b"\x00" * 8)
        with pytest.raises(D.DatasetError, match="not an IDX file"):
            D.read_idx(path)

    def test_read_rejects_unknown_type_code(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x00\x00\x42\x01" + b"\x00\x00\x00\x01" + b"\x00")
        with pytest.raises(D.DatasetError, match="type code"):
            D.read_idx(path)

    def test_read_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.idx"
        D.write_idx(path, np.arange(10, dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(D.DatasetError, match="truncated"):
            D.read_idx(path)

    def test_read_rejects_trailing_bytes(self, tmp_path):
        path = tmp_path / "bad.idx"
        D.write_idx(path, np.arange(10, dtype=np.uint8))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(D.DatasetError, match="trailing"):
            D.read_idx(path)

    def test_read_rejects_truncated_dims(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x00\x00\x08\x03" + b"\x00\x00\x00\x02")
        with pytest.raises(D.DatasetError, match="dimension"):
            D.read_idx(path)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        rng = np.random.default_rng(seed)
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path_factory.mktemp("idx") / "p.idx"
        D.write_idx(path, arr)
        np.testing.assert_array_equal(D.read_idx(path), arr)


class TestRenderDigit:
    def test_shape_and_dtype(self):
        rng = np.random.Generator(np.random.Philox(1))
        img = D.render_digit(7, 0, rng)
        assert img.shape == (28, 28)
        assert img.dtype == np.uint8

    def test_rejects_bad_digit_and_style(self):
        rng = np.random.Generator(np.random.Philox(1))
        with pytest.raises(D.DatasetError, match="digit"):
            D.render_digit(10, 0, rng)
        with pytest.raises(D.DatasetError, match="style"):
            D.render_digit(3, 4, rng)

    def test_thick_style_has_more_ink(self):
        # dilation must add ink on average; compare matched RNG streams
        inks = {s: 0.0 for s in (0, 2)}
        for s in inks:
            rng = np.random.Generator(np.random.Philox(42))
            inks[s] = float(np.mean([D.render_digit(5, s, rng).sum() for _ in range(20)]))
        assert inks[2] > 1.3 * inks[0]

    def test_slant_shifts_rows_apart(self):
        # shearing moves the top rows sideways relative to the bottom rows
        def row_centroid_spread(style):
            rng = np.random.Generator(np.random.Philox(7))
            spreads = []
            for _ in range(20):
                img = D.render_digit(1, style, rng).astype(float)
                cols = np.arange(28)
                centroids = [
                    (row * cols).sum() / row.sum()
                    for row in img
                    if row.sum() > 0
                ]
                spreads.append(max(centroids) - min(centroids))
            return float(np.mean(spreads))

        assert row_centroid_spread(1) > row_centroid_spread(0) + 2.0

    def test_deterministic_for_same_rng_state(self):
        a = D.render_digit(3, 2, np.random.Generator(np.random.Philox(9)))
        b = D.render_digit(3, 2, np.random.Generator(np.random.Philox(9)))
        np.testing.assert_array_equal(a, b)


class TestSynthDigits:
    def test_deterministic(self):
        a = D.synth_digits(50, seed=4)
        b = D.synth_digits(50, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.styles, b.styles)

    def test_seed_changes_output(self):
        a = D.synth_digits(50, seed=4)
        b = D.synth_digits(50, seed=5)
        assert not np.array_equal(a.images, b.images)

    def test_label_and_style_ranges(self):
        data = D.synth_digits(400, seed=0)
        assert set(np.unique(data.labels)) <= set(range(10))
        assert set(np.unique(data.styles)) <= set(range(4))
        # uniform draw should hit every class by n=400
        assert len(np.unique(data.labels)) == 10
        assert len(np.unique(data.styles)) == 4

    def test_rejects_nonpositive_count(self):
        with pytest.raises(D.DatasetError):
            D.synth_digits(0, seed=1)

    def test_len(self):
        assert len(D.synth_digits(7, seed=0)) == 7


class TestLabeledImages:
    def test_rejects_wrong_image_shape(self):
        with pytest.raises(D.DatasetError, match="28, 28"):
            D.LabeledImages(np.zeros((2, 14, 14), np.uint8),
                            np.zeros(2, np.uint8), np.zeros(2, np.uint8))

    def test_rejects_mismatched_labels(self):
        with pytest.raises(D.DatasetError, match="one entry per image"):
            D.LabeledImages(np.zeros((2, 28, 28), np.uint8),
                            np.zeros(3, np.uint8), np.zeros(2, np.uint8))


class TestModelInput:
    def test_scaling_and_shape(self):
        imgs = np.full((3, 28, 28), 255, np.uint8)
        x = D.to_model_input(imgs)
        assert x.shape == (3, 1, 28, 28)
        assert x.dtype == np.float32
        assert float(x.max()) == 1.0
        assert float(D.to_model_input(np.zeros((1, 28, 28), np.uint8)).min()) == 0.0


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        train = D.synth_digits(12, seed=0)
        test = D.synth_digits(5, seed=1)
        D.write_dataset(tmp_path / "ds", train, test)
        t2, e2 = D.load_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(t2.images, train.images)
        np.testing.assert_array_equal(t2.labels, train.labels)
        np.testing.assert_array_equal(t2.styles, train.styles)
        np.testing.assert_array_equal(e2.images, test.images)

    def test_missing_file_reported(self, tmp_path):
        train = D.synth_digits(3, seed=0)
        D.write_dataset(tmp_path / "ds", train, train)
        (tmp_path / "ds" / "test-styles.idx").unlink()
        with pytest.raises(D.DatasetError, match="missing dataset file"):
            D.load_dataset(tmp_path / "ds")
