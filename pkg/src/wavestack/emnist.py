"""IDX (MNIST/EMNIST) ingestion with class filtering and a stratified split."""
from __future__ import annotations

import gzip
import string
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# numeric label -> character for the supported EMNIST splits
LABEL_MAPPINGS = {
    "letters": {i + 1: c for i, c in enumerate(string.ascii_uppercase)},
    "byclass": {i: c for i, c in enumerate(string.digits + string.ascii_uppercase
                                          + string.ascii_lowercase)},
}


class IdxFormatError(ValueError):
    pass


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0")
    magic = int.from_bytes(data[:4], "big")
    if data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x} at offset 0 "
                             "(expected unsigned-byte IDX)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x} at offset 0 "
                             f"(expected 0x{expected_magic:08x})")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension table at offset 4")
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if dims else 0
    if len(data) - header != count:
        raise IdxFormatError(f"{path}: payload at offset {header} holds {len(data) - header} "
                             f"bytes, dimensions {dims} need {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


@dataclass
class LetterDataset:
    """Filtered, remapped letters; images are float grids in [0, 1]."""

    classes: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def __len__(self):
        return len(self.train_labels) + len(self.test_labels)

    @property
    def num_classes(self):
        return len(self.classes)


def stratified_split(labels, test_fraction, seed):
    """Seeded per-class shuffle; test counts follow the largest-remainder rule.

    The overall test size is ``ceil(test_fraction * n)``; classes with a
    single item keep it for training.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    members = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    n_test = int(np.ceil(test_fraction * len(labels) - 1e-9))
    exact = {c: test_fraction * len(members[c]) for c in classes}
    quota = {c: min(int(np.floor(exact[c])), len(members[c]) - 1) for c in classes}
    left = n_test - sum(quota.values())
    order = sorted(classes, key=lambda c: (-(exact[c] - np.floor(exact[c])), c))
    for c in order:
        if left <= 0:
            break
        if quota[c] < len(members[c]) - 1:
            quota[c] += 1
            left -= 1
    test = np.concatenate([members[c][:quota[c]] for c in classes]).astype(int)
    train = np.concatenate([members[c][quota[c]:] for c in classes]).astype(int)
    return np.sort(train), np.sort(test)


def ingest_emnist(images_path, labels_path, class_filter="SIMNTU", seed=0, test_fraction=0.2,
                  label_mapping="letters", transpose=True, per_class=0) -> LetterDataset:
    """Load IDX files, keep ``class_filter`` letters and relabel them 0..C-1.

    ``per_class`` (when > 0) keeps a seeded random subset of each class
    before splitting.
    """
    classes = "".join(class_filter)
    if not classes:
        raise ValueError("class filter is empty")
    if len(set(classes)) != len(classes):
        raise ValueError("class filter repeats a class")
    mapping = LABEL_MAPPINGS[label_mapping] if isinstance(label_mapping, str) else label_mapping
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise IdxFormatError("label count does not match image count")
    chars = np.array([mapping.get(int(v), "") for v in labels])
    # lowercase letters in a byclass file are distinct classes and are not merged
    keep = np.isin(chars, list(classes))
    missing = [c for c in classes if not np.any(chars == c)]
    if missing:
        raise ValueError(f"classes missing from dataset: {''.join(missing)}")
    idx = np.flatnonzero(keep)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in chars[idx]], dtype=int)
    if per_class:
        rng = np.random.default_rng([seed, 1])
        picks = [rng.permutation(np.flatnonzero(y == c))[:per_class] for c in range(len(classes))]
        sel = np.sort(np.concatenate(picks))
        idx, y = idx[sel], y[sel]
    X = images[idx].astype(float) / 255.0
    if transpose:
        X = np.swapaxes(X, 1, 2)
    train, test = stratified_split(y, test_fraction, seed)
    return LetterDataset(classes, X[train], y[train], X[test], y[test])


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and round trips)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    with (gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")) as fh:
        fh.write(header + arr.tobytes())
