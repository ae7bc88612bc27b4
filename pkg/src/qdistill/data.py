"""Dataset parsing (IDX, CIFAR-10 binary), normalisation, and output files.

Output formats written here: binary PGM/PPM images, the QDD1 distilled-dataset
file, and the key=value metrics log.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

# community reference statistics, used only as a sanity check on recomputed values
MNIST_STATS = ((0.1307,), (0.3081,))
CIFAR10_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))
STATS_TOLERANCE = 1e-2

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}
CANONICAL_COUNTS = {("mnist", "train"): 60000, ("mnist", "test"): 10000, ("cifar10", "train"): 50000, ("cifar10", "test"): 10000}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    shift: tuple
    scale: tuple

    def _arrays(self):
        s = np.asarray(self.shift, dtype=np.float64).reshape(1, -1, 1, 1)
        c = np.asarray(self.scale, dtype=np.float64).reshape(1, -1, 1, 1)
        return s, c

    def apply(self, x):
        s, c = self._arrays()
        return (x - s) / c

    def invert(self, x):
        s, c = self._arrays()
        return x * c + s

    @classmethod
    def fit(cls, x):
        """Per-channel mean/std of ``x`` ([M, c, h, w] in [0, 1])."""
        return cls(tuple(float(v) for v in x.mean(axis=(0, 2, 3))), tuple(float(v) for v in x.std(axis=(0, 2, 3))))

    def to_dict(self):
        return {"shift": list(self.shift), "scale": list(self.scale)}


@dataclass
class LabeledDataset:
    images: np.ndarray  # [M, c, 32, 32], normalised
    labels: np.ndarray  # int class ids
    split: str
    normalization: Normalization

    def __len__(self):
        return len(self.labels)

    def subset(self, limit):
        if limit is None or limit >= len(self):
            return self
        return LabeledDataset(self.images[:limit], self.labels[:limit], self.split, self.normalization)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path):
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise DataFormatError(f"{path}: truncated IDX payload ({len(blob) - header} of {count} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _check_stats(norm, reference, name):
    ref = np.array(reference[0]), np.array(reference[1])
    if np.max(np.abs(np.array(norm.shift) - ref[0])) > STATS_TOLERANCE or np.max(
        np.abs(np.array(norm.scale) - ref[1])
    ) > STATS_TOLERANCE:
        log.warning("%s statistics %s differ from the reference %s by more than %.0e", name, norm, reference, STATS_TOLERANCE)


def load_mnist(images_path, labels_path, split="train", normalization=None, expected_count=None):
    """Read an MNIST split, scale to [0, 1], standardise, and zero-pad to 32x32.

    Without ``normalization`` the statistics are computed from this split
    (pass the training split's record when loading the test split).
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError("MNIST images must be [n, rows, cols] and labels [n]")
    if len(images) != len(labels):
        raise DataFormatError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    if expected_count is not None and len(images) != expected_count:
        raise DataFormatError(f"expected {expected_count} {split} samples, found {len(images)}")
    return prepare_mnist(images, labels, split, normalization)


def prepare_mnist(images, labels, split="train", normalization=None):
    """uint8 [n, 28, 28] digits -> normalised, zero-padded [n, 1, 32, 32]."""
    labels = np.asarray(labels)
    if labels.max(initial=0) >= 10:
        raise DataFormatError(f"label {labels.max()} out of range [0, 10)")
    x = np.asarray(images).astype(np.float64)[:, None] / 255.0
    if normalization is None:
        normalization = Normalization.fit(x)
        _check_stats(normalization, MNIST_STATS, "MNIST")
    pad_r = (32 - x.shape[2]) // 2
    pad_c = (32 - x.shape[3]) // 2
    x = np.pad(x, ((0, 0), (0, 0), (pad_r, 32 - x.shape[2] - pad_r), (pad_c, 32 - x.shape[3] - pad_c)))
    return LabeledDataset(normalization.apply(x), labels.astype(np.int64), split, normalization)


def load_mnist_subset(n_train=4000, n_test=1000, seed=123):
    """Disjoint train/test splits from the 5,000-digit sample bundled with mlxtend.

    Used when the full IDX files are not at hand.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise FileNotFoundError("the MNIST subset needs the optional 'mlxtend' package") from exc
    x, y = mnist_data()
    if n_train + n_test > len(x):
        raise ValueError(f"requested {n_train}+{n_test} samples, only {len(x)} available")
    order = np.random.default_rng(seed).permutation(len(x))
    x = np.rint(x[order]).astype(np.uint8).reshape(-1, 28, 28)
    y = y[order].astype(np.int64)
    train = prepare_mnist(x[:n_train], y[:n_train], "train")
    test = prepare_mnist(x[n_train:n_train + n_test], y[n_train:n_train + n_test], "test", train.normalization)
    return train, test


# ---------------------------------------------------------------------------
# CIFAR-10


def read_cifar_batches(paths):
    """Raw uint8 images [M, 3, 32, 32] and labels [M] from binary batch files."""
    images, labels = [], []
    for path in paths:
        blob = _read_bytes(path)
        if len(blob) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.shape[0] and rec[:, 0].max() >= 10:
            raise DataFormatError(f"{path}: label byte {rec[:, 0].max()} out of range [0, 10)")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataFormatError("no CIFAR-10 batch files given")
    return np.concatenate(images), np.concatenate(labels)


def write_cifar_batch(path, images, labels):
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def load_cifar10(batch_paths, split="train", normalization=None, expected_count=None):
    images, labels = read_cifar_batches(batch_paths)
    if expected_count is not None and len(images) != expected_count:
        raise DataFormatError(f"expected {expected_count} {split} samples, found {len(images)}")
    x = images.astype(np.float64) / 255.0
    if normalization is None:
        normalization = Normalization.fit(x)
        _check_stats(normalization, CIFAR10_STATS, "CIFAR-10")
    return LabeledDataset(normalization.apply(x), labels, split, normalization)


def _find(data_dir, name):
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = Path(data_dir) / candidate
        if p.exists():
            return p
    raise FileNotFoundError(f"{name} not found in {data_dir}")


def load_dataset(name, data_dir, train_limit=None, test_limit=None):
    """Train and test splits from a directory holding the standard file names."""
    if not Path(data_dir).is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    if name == "mnist":
        train = load_mnist(*(_find(data_dir, f) for f in MNIST_FILES["train"]), split="train")
        test = load_mnist(*(_find(data_dir, f) for f in MNIST_FILES["test"]), split="test", normalization=train.normalization)
    elif name == "cifar10":
        train = load_cifar10([_find(data_dir, f) for f in CIFAR_FILES["train"]], split="train")
        test = load_cifar10([_find(data_dir, f) for f in CIFAR_FILES["test"]], "test", train.normalization)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    for ds in (train, test):
        canonical = CANONICAL_COUNTS[(name, ds.split)]
        if len(ds) != canonical:
            log.warning("%s %s split has %d samples (canonical %d)", name, ds.split, len(ds), canonical)
    return train.subset(train_limit), test.subset(test_limit)


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, pixels):
    """8-bit binary PGM ([h, w]) or PPM ([h, w, 3])."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        tag = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        tag = b"P6"
    else:
        raise ValueError(f"cannot write pixels of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + f" {w} {h} 255\n".encode())
        fh.write(pixels.tobytes())


def read_pnm(path):
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace before raster
    tag, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or tag not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported PNM ({tag!r}, maxval {maxval})")
    ch = 1 if tag == b"P5" else 3
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * ch, offset=pos)
    return data.reshape(h, w) if ch == 1 else data.reshape(h, w, 3)


def to_pixels(images, normalization):
    """De-normalise [N, c, h, w], clamp to [0, 1], quantise to uint8 [N, h, w(, 3)]."""
    x = np.clip(normalization.invert(np.asarray(images, dtype=np.float64)), 0.0, 1.0)
    q = np.rint(x * 255.0).astype(np.uint8)
    return q[:, 0] if q.shape[1] == 1 else q.transpose(0, 2, 3, 1)


def export_images(synth, out_dir, normalization, columns=10):
    """One PGM/PPM per synthetic sample plus a contact sheet; returns the paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create image directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"image directory {out_dir} is not writable")
    pixels = to_pixels(synth.images.data, normalization)
    ext = "pgm" if pixels.ndim == 3 else "ppm"
    paths = []
    for i, (img, c) in enumerate(zip(pixels, synth.class_ids)):
        p = out_dir / f"class{c}_idx{i}.{ext}"
        write_pnm(p, img)
        paths.append(p)
    n = len(pixels)
    cols = min(columns, n)
    rows = math.ceil(n / cols)
    h, w = pixels.shape[1:3]
    sheet = np.zeros((rows * h, cols * w) + pixels.shape[3:], dtype=np.uint8)
    for i, img in enumerate(pixels):
        r, c = divmod(i, cols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    sheet_path = out_dir / f"sheet.{ext}"
    write_pnm(sheet_path, sheet)
    paths.append(sheet_path)
    return paths


# ---------------------------------------------------------------------------
# QDD1 distilled-dataset file

QDD_MAGIC = b"QDD1"
QDD_VERSION = 1


def save_distilled(path, synth, theta0_seed, config=None):
    """Write a synthetic set; the trailing JSON block echoes the run config."""
    images = synth.images.data
    if images.ndim != 4:
        images = images.reshape(images.shape[0], 1, 1, -1)
    n, c, h, w = images.shape
    k = synth.labels.shape[1]
    trailer = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(QDD_MAGIC)
        fh.write(struct.pack("<B5I", QDD_VERSION, n, c, h, w, k))
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())
        fh.write(np.asarray(synth.class_ids, dtype="<u4").tobytes())
        fh.write(struct.pack("<dq", float(synth.eta.data), -1 if theta0_seed is None else int(theta0_seed)))
        fh.write(struct.pack("<I", len(trailer)))
        fh.write(trailer)


def load_distilled(path):
    """Returns (SyntheticDataset, theta0 seed, config dict)."""
    from .distill import SyntheticDataset
    from .layers import one_hot

    blob = Path(path).read_bytes()
    if blob[:4] != QDD_MAGIC:
        raise DataFormatError("bad QDD1 header")
    try:
        version, n, c, h, w, k = struct.unpack_from("<B5I", blob, 4)
        if version != QDD_VERSION:
            raise DataFormatError(f"unsupported QDD1 version {version}")
        pos = 4 + struct.calcsize("<B5I")
        count = n * c * h * w
        images = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(n, c, h, w).astype(np.float64)
        pos += 8 * count
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        eta, seed = struct.unpack_from("<dq", blob, pos)
        pos += 16
        (tlen,) = struct.unpack_from("<I", blob, pos)
        config = json.loads(blob[pos + 4:pos + 4 + tlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"truncated or corrupt QDD1 file: {exc}") from None
    synth = SyntheticDataset(Tensor(images), one_hot(labels, k), Tensor(np.float64(eta)))
    return synth, (None if seed == -1 else seed), config


# ---------------------------------------------------------------------------
# metrics log


def format_record(record):
    parts = []
    for key, value in record.items():
        if isinstance(value, float):
            value = repr(value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_record(line):
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        for cast in (int, float):
            try:
                value = cast(value)
                break
            except ValueError:
                continue
        out[key] = value
    return out


class MetricsLog:
    """Append-only key=value log, one record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w")

    def write(self, record):
        self._fh.write(format_record(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path):
    return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]
