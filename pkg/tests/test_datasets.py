import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minprof.datasets import (
    CIFAR_TEST_FILES,
    CIFAR_TRAIN_FILES,
    Dataset,
    FormatError,
    MissingDataError,
    batches,
    load_cifar10_binary,
    load_dataset,
    load_idx,
    resize_bilinear_28,
    split_train_validation,
    stratified_subsample,
    write_idx,
)


def bilinear_oracle(img, out=28):
    """Per-pixel bilinear resample with half-pixel centres and edge clamping."""
    n = img.shape[0]
    scale = n / out
    res = np.zeros((out, out))
    for oy in range(out):
        for ox in range(out):
            sy = max((oy + 0.5) * scale - 0.5, 0.0)
            sx = max((ox + 0.5) * scale - 0.5, 0.0)
            y0, x0 = int(sy), int(sx)
            y1, x1 = min(y0 + 1, n - 1), min(x0 + 1, n - 1)
            fy, fx = sy - y0, sx - x0
            res[oy, ox] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                           + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return res


def tiny(n=50, classes=10, seed=0, name="mnist"):
    rng = np.random.default_rng(seed)
    return Dataset(name, rng.normal(size=(n, 1, 4, 4)).astype(np.float32), np.arange(n) % classes, "train")


class TestIdx:
    def test_round_trip_images_and_labels(self, tmp_path):
        imgs = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
        write_idx(tmp_path / "i", imgs)
        write_idx(tmp_path / "l", np.arange(5, dtype=np.uint8))
        got = load_idx(tmp_path / "i")
        assert got.shape == (5, 1, 28, 28) and got.dtype == np.float32
        np.testing.assert_array_equal(got[:, 0], imgs)
        np.testing.assert_array_equal(load_idx(tmp_path / "l"), np.arange(5))

    def test_gzip_input(self, tmp_path):
        write_idx(tmp_path / "l", np.array([3, 1, 4], dtype=np.uint8))
        (tmp_path / "l.gz").write_bytes(gzip.compress((tmp_path / "l").read_bytes()))
        np.testing.assert_array_equal(load_idx(tmp_path / "l.gz"), [3, 1, 4])

    def test_header_layout(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((2, 3, 4), dtype=np.uint8))
        raw = (tmp_path / "i").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)
        assert len(raw) == 16 + 24

    def test_truncated_file_reports_offset(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((4, 28, 28), dtype=np.uint8))
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "t").write_bytes(raw[:100])
        with pytest.raises(FormatError) as info:
            load_idx(tmp_path / "t")
        assert info.value.offset == 100

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(struct.pack(">II", 0x1234, 0))
        with pytest.raises(FormatError, match="magic"):
            load_idx(tmp_path / "bad")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingDataError):
            load_idx(tmp_path / "nope")

    def test_load_dataset_normalises(self, synthetic_data_dir):
        ds = load_dataset("mnist", "train", synthetic_data_dir)
        raw = load_dataset("mnist", "train", synthetic_data_dir, normalized=False)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
        np.testing.assert_allclose(ds.images, (raw.images - 0.5) / 0.5, atol=1e-6)
        assert raw.images.max() <= 1.0


class TestCifar:
    def write(self, path, labels, seed=0):
        rng = np.random.default_rng(seed)
        recs = np.zeros((len(labels), 3073), dtype=np.uint8)
        recs[:, 0] = labels
        recs[:, 1:] = rng.integers(0, 256, size=(len(labels), 3072))
        path.write_bytes(recs.tobytes())
        return recs

    def test_record_layout(self, tmp_path):
        recs = self.write(tmp_path / "b.bin", [3, 7])
        ds = load_cifar10_binary([tmp_path / "b.bin"])
        assert ds.images.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(ds.labels, [3, 7])
        # channel-major: first 1024 bytes red plane
        np.testing.assert_array_equal(ds.images[1, 0].reshape(-1), recs[1, 1:1025])
        np.testing.assert_array_equal(ds.images[1, 2].reshape(-1), recs[1, 2049:])

    def test_partial_record_rejected(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\x00" * 3000)
        with pytest.raises(FormatError):
            load_cifar10_binary([tmp_path / "b.bin"])

    def test_label_out_of_range(self, tmp_path):
        self.write(tmp_path / "b.bin", [12])
        with pytest.raises(FormatError):
            load_cifar10_binary([tmp_path / "b.bin"])

    def test_load_dataset_layout(self, tmp_path):
        root = tmp_path / "cifar10"
        root.mkdir()
        for i, name in enumerate(CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            self.write(root / name, [i % 10, (i + 1) % 10], seed=i)
        assert len(load_dataset("cifar10", "train", tmp_path)) == 10
        assert len(load_dataset("cifar10", "test", tmp_path)) == 2


class TestSplitAndBatches:
    def test_split_is_disjoint_and_complete(self):
        ds = tiny(100)
        tr, va, plan = split_train_validation(ds, seed=3)
        assert len(va) == 10 and len(tr) == 90
        assert set(tr.indices) | set(va.indices) == set(range(100))
        assert not set(tr.indices) & set(va.indices)

    def test_split_deterministic_per_seed(self):
        ds = tiny(100)
        a = split_train_validation(ds, 1)[1].indices
        b = split_train_validation(ds, 1)[1].indices
        c = split_train_validation(ds, 2)[1].indices
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_split_fraction_validated(self):
        with pytest.raises(ValueError):
            split_train_validation(tiny(), 0, validation_fraction=1.0)

    @given(st.integers(1, 60), st.integers(1, 25), st.one_of(st.none(), st.integers(0, 10)))
    @settings(max_examples=30, deadline=None)
    def test_batches_cover_every_example_once(self, n, bs, seed):
        view = tiny(n).view()
        labels = np.concatenate([y for _, y in batches(view, bs, seed)])
        sizes = [len(y) for _, y in batches(view, bs, seed)]
        assert sorted(labels.tolist()) == sorted(view.labels.tolist())
        assert sizes[:-1] == [bs] * (len(sizes) - 1) and 0 < sizes[-1] <= bs

    def test_batches_order_without_seed(self):
        ys = np.concatenate([y for _, y in batches(tiny(30).view(), 7, None)])
        np.testing.assert_array_equal(ys, np.arange(30) % 10)

    def test_stratified_subsample_balanced(self):
        ds = tiny(1000)
        sub = stratified_subsample(ds, 95, seed=0)
        counts = np.bincount(sub.labels, minlength=10)
        assert counts.sum() == 95 and counts.max() - counts.min() <= 1


class TestResize:
    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(4)
        imgs = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        out = resize_bilinear_28(Dataset("cifar10", imgs, np.zeros(2, dtype=np.int64), "train")).images
        assert out.shape == (2, 3, 28, 28)
        for n in range(2):
            for c in range(3):
                np.testing.assert_allclose(out[n, c], bilinear_oracle(imgs[n, c].astype(np.float64)), atol=1e-5)

    def test_constant_image_preserved(self):
        imgs = np.full((1, 3, 32, 32), 0.25, dtype=np.float32)
        out = resize_bilinear_28(Dataset("cifar10", imgs, np.zeros(1, dtype=np.int64), "train")).images
        np.testing.assert_allclose(out, 0.25, rtol=1e-6)

    def test_28_is_noop(self):
        ds = Dataset("mnist", np.zeros((1, 1, 28, 28), dtype=np.float32), np.zeros(1, dtype=np.int64), "train")
        assert resize_bilinear_28(ds) is ds

    def test_other_sizes_rejected(self):
        ds = Dataset("x", np.zeros((1, 1, 30, 30), dtype=np.float32), np.zeros(1, dtype=np.int64), "train")
        with pytest.raises(ValueError):
            resize_bilinear_28(ds)
