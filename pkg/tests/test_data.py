import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qdistill import data as io
from qdistill.autodiff import Tensor
from qdistill.distill import SyntheticDataset
from qdistill.layers import one_hot


def mnist_files(tmp_path, n=20, rng=None, rows=28):
    rng = rng or np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, rows, rows), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    io.write_idx(tmp_path / "img", images)
    io.write_idx(tmp_path / "lbl", labels)
    return images, labels


def test_idx_round_trip_bytes(tmp_path):
    images, labels = mnist_files(tmp_path)
    np.testing.assert_array_equal(io.read_idx(tmp_path / "img", io.IDX_IMAGES_MAGIC), images)
    np.testing.assert_array_equal(io.read_idx(tmp_path / "lbl", io.IDX_LABELS_MAGIC), labels)
    io.write_idx(tmp_path / "img2", io.read_idx(tmp_path / "img"))
    assert (tmp_path / "img").read_bytes() == (tmp_path / "img2").read_bytes()


def test_idx_header_layout(tmp_path):
    mnist_files(tmp_path, n=3)
    blob = (tmp_path / "img").read_bytes()
    assert struct.unpack(">4I", blob[:16]) == (0x803, 3, 28, 28)


def test_idx_gzip(tmp_path):
    images, _ = mnist_files(tmp_path)
    (tmp_path / "img.gz").write_bytes(gzip.compress((tmp_path / "img").read_bytes()))
    np.testing.assert_array_equal(io.read_idx(tmp_path / "img.gz"), images)


def test_idx_bad_magic(tmp_path):
    mnist_files(tmp_path)
    with pytest.raises(io.DataFormatError, match="bad IDX magic"):
        io.read_idx(tmp_path / "lbl", io.IDX_IMAGES_MAGIC)
    (tmp_path / "junk").write_bytes(b"\x12\x34\x56\x78" + b"\0" * 12)
    with pytest.raises(io.DataFormatError, match="bad IDX magic"):
        io.read_idx(tmp_path / "junk")


def test_idx_truncated(tmp_path):
    mnist_files(tmp_path)
    blob = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(blob[:-5])
    with pytest.raises(io.DataFormatError, match="truncated"):
        io.read_idx(tmp_path / "short")


def test_load_mnist_scaling_and_padding(tmp_path):
    images, labels = mnist_files(tmp_path)
    images[0, 0, 0] = 255
    io.write_idx(tmp_path / "img", images)
    ds = io.load_mnist(tmp_path / "img", tmp_path / "lbl")
    assert ds.images.shape == (20, 1, 32, 32)
    np.testing.assert_array_equal(ds.labels, labels)
    raw = ds.normalization.invert(ds.images)
    assert raw[0, 0, 2, 2] == pytest.approx(1.0, abs=1e-12)
    pad_value = ds.normalization.apply(np.zeros((1, 1, 1, 1)))[0, 0, 0, 0]
    border = np.concatenate([ds.images[:, :, :2].ravel(), ds.images[:, :, -2:].ravel(), ds.images[:, :, :, :2].ravel(), ds.images[:, :, :, -2:].ravel()])
    assert np.all(border == pad_value)


def test_load_mnist_count_mismatch(tmp_path):
    mnist_files(tmp_path)
    io.write_idx(tmp_path / "lbl", np.zeros(19, dtype=np.uint8))
    with pytest.raises(io.DataFormatError, match="mismatch"):
        io.load_mnist(tmp_path / "img", tmp_path / "lbl")
    io.write_idx(tmp_path / "lbl", np.zeros(20, dtype=np.uint8))
    with pytest.raises(io.DataFormatError, match="expected 60000"):
        io.load_mnist(tmp_path / "img", tmp_path / "lbl", expected_count=60000)


def test_load_mnist_uses_given_normalization(tmp_path):
    mnist_files(tmp_path)
    norm = io.Normalization((0.5,), (0.25,))
    ds = io.load_mnist(tmp_path / "img", tmp_path / "lbl", normalization=norm)
    assert ds.normalization == norm


def test_cifar_records(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(7, 3, 32, 32), dtype=np.uint8)
    labels = np.array([9, 0, 1, 2, 3, 4, 5])
    io.write_cifar_batch(tmp_path / "b.bin", images, labels)
    got_x, got_y = io.read_cifar_batches([tmp_path / "b.bin"])
    np.testing.assert_array_equal(got_x, images)
    np.testing.assert_array_equal(got_y, labels)
    io.write_cifar_batch(tmp_path / "c.bin", got_x, got_y)
    assert (tmp_path / "b.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()
    (tmp_path / "one.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:3073])
    x1, y1 = io.read_cifar_batches([tmp_path / "one.bin"])
    assert x1.shape == (1, 3, 32, 32) and y1[0] == 9


def test_cifar_errors(tmp_path):
    (tmp_path / "odd.bin").write_bytes(b"\0" * 3074)
    with pytest.raises(io.DataFormatError, match="3073"):
        io.read_cifar_batches([tmp_path / "odd.bin"])
    (tmp_path / "lbl.bin").write_bytes(b"\x0a" + b"\0" * 3072)
    with pytest.raises(io.DataFormatError, match="out of range"):
        io.read_cifar_batches([tmp_path / "lbl.bin"])


def test_load_cifar_normalises_per_channel(tmp_path):
    rng = np.random.default_rng(2)
    io.write_cifar_batch(tmp_path / "b.bin", rng.integers(0, 256, (12, 3, 32, 32)), np.arange(12) % 10)
    ds = io.load_cifar10([tmp_path / "b.bin"])
    np.testing.assert_allclose(ds.images.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(ds.images.std(axis=(0, 2, 3)), 1, atol=1e-12)


def test_load_dataset_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_dataset("mnist", tmp_path / "absent")


def test_load_dataset_finds_standard_names(tmp_path):
    rng = np.random.default_rng(3)
    for split, n in (("train", 30), ("t10k", 10)):
        io.write_idx(tmp_path / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        io.write_idx(tmp_path / f"{split}-labels-idx1-ubyte", rng.integers(0, 10, n))
    train, test = io.load_dataset("mnist", tmp_path, train_limit=20)
    assert len(train) == 20 and len(test) == 10
    assert test.normalization == train.normalization


@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_normalization_invertible(x):
    norm = io.Normalization((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
    np.testing.assert_allclose(norm.invert(norm.apply(x)), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


def test_pgm_header_and_zero_image(tmp_path):
    io.write_pnm(tmp_path / "z.pgm", np.zeros((32, 32), dtype=np.uint8))
    blob = (tmp_path / "z.pgm").read_bytes()
    assert blob.startswith(b"P5 32 32 255\n")
    assert blob[len(b"P5 32 32 255\n"):] == bytes(1024)


@given(arrays(np.uint8, st.sampled_from([(5, 7), (4, 6, 3)])))
def test_pnm_round_trip(pixels):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "img"
        io.write_pnm(p, pixels)
        np.testing.assert_array_equal(io.read_pnm(p), pixels)


def synthetic(rng, n=10, shape=(1, 32, 32), k=10, eta=0.37):
    return SyntheticDataset(Tensor(rng.normal(size=(n,) + shape)), one_hot(np.arange(n) % k, k), Tensor(np.float64(eta)))


def test_export_images(tmp_path, rng):
    norm = io.Normalization((0.1307,), (0.3081,))
    synth = synthetic(rng)
    paths = io.export_images(synth, tmp_path / "img", norm)
    assert len(paths) == 11
    assert sorted(p.name for p in paths[:-1]) == sorted(f"class{i}_idx{i}.pgm" for i in range(10))
    expected = io.to_pixels(synth.images.data, norm)
    for i in range(10):
        np.testing.assert_array_equal(io.read_pnm(tmp_path / "img" / f"class{i}_idx{i}.pgm"), expected[i])
    sheet = io.read_pnm(paths[-1])
    assert sheet.shape == (32, 320)


def test_export_color_images(tmp_path, rng):
    norm = io.Normalization((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    paths = io.export_images(synthetic(rng, n=20, shape=(3, 32, 32)), tmp_path, norm)
    assert paths[0].suffix == ".ppm" and io.read_pnm(paths[0]).shape == (32, 32, 3)
    assert io.read_pnm(paths[-1]).shape == (64, 320, 3)


def test_export_unwritable(tmp_path, rng):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        io.export_images(synthetic(rng), blocker / "sub", io.Normalization((0.0,), (1.0,)))


def test_qdd_round_trip(tmp_path, rng):
    synth = synthetic(rng)
    io.save_distilled(tmp_path / "a.qdd", synth, 42, {"variant": "q-r-h"})
    back, seed, cfg = io.load_distilled(tmp_path / "a.qdd")
    assert seed == 42 and cfg == {"variant": "q-r-h"}
    np.testing.assert_array_equal(back.images.data, synth.images.data)
    np.testing.assert_array_equal(back.labels, synth.labels)
    assert float(back.eta.data) == 0.37
    io.save_distilled(tmp_path / "b.qdd", back, seed, cfg)
    assert (tmp_path / "a.qdd").read_bytes() == (tmp_path / "b.qdd").read_bytes()


def test_qdd_layout(tmp_path, rng):
    synth = synthetic(rng, n=10)
    io.save_distilled(tmp_path / "a.qdd", synth, 3)
    blob = (tmp_path / "a.qdd").read_bytes()
    assert blob[:4] == b"QDD1"
    assert struct.unpack_from("<B5I", blob, 4) == (1, 10, 1, 32, 32, 10)
    start = 4 + 21
    np.testing.assert_array_equal(np.frombuffer(blob, "<f8", 10 * 1024, start).reshape(10, 1, 32, 32), synth.images.data)


def test_qdd_errors(tmp_path, rng):
    (tmp_path / "bad.qdd").write_bytes(b"QDL1" + bytes(40))
    with pytest.raises(io.DataFormatError, match="bad QDD1 header"):
        io.load_distilled(tmp_path / "bad.qdd")
    io.save_distilled(tmp_path / "ok.qdd", synthetic(rng), 1)
    (tmp_path / "short.qdd").write_bytes((tmp_path / "ok.qdd").read_bytes()[:200])
    with pytest.raises(io.DataFormatError):
        io.load_distilled(tmp_path / "short.qdd")


def test_metrics_log_round_trip(tmp_path):
    with io.MetricsLog(tmp_path / "m.log") as log:
        for step in range(3):
            log.write(dict(step=step, epoch=0, loss=0.1 * step + 1e-17, eta=0.01, time=1.5))
        log.write(dict(event="summary", accuracy=0.875))
    records = io.read_metrics(tmp_path / "m.log")
    assert len(records) == 4
    assert records[1]["loss"] == 0.1 + 1e-17 and records[0]["eta"] == 0.01
    assert records[-1] == {"event": "summary", "accuracy": 0.875}


def test_mnist_subset_is_disjoint_and_standardised():
    pytest.importorskip("mlxtend")
    train, test = io.load_mnist_subset(400, 100)
    assert train.images.shape == (400, 1, 32, 32) and len(test) == 100
    inner = io.Normalization.fit(train.normalization.invert(train.images)[:, :, 2:30, 2:30])
    assert inner.shift[0] == pytest.approx(train.normalization.shift[0], abs=1e-12)
