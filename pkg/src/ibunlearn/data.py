"""Datasets: synthetic blobs, IDX (MNIST) ingestion, erase/auxiliary
partitioning, backdoor stamping and CSV export."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import Rng, uniform_indices

IDX_IMAGE_MAGIC = b"\x00\x00\x08\x03"
IDX_LABEL_MAGIC = b"\x00\x00\x08\x01"


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (m, n) in [0, 1]
    labels: np.ndarray  # (m,) ints in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise ValueError(f"inputs must be a nonempty (m, n) array, got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {inputs.shape[0]} rows")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if inputs.min() < 0.0 or inputs.max() > 1.0:
            raise ValueError("inputs must lie in [0, 1]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.inputs[rows], self.labels[rows], self.n_classes)


@dataclass(frozen=True)
class Partition:
    remaining: Dataset
    erased: Dataset
    auxiliary: Dataset
    test: Optional[Dataset]
    erased_rows: np.ndarray = field(repr=False)
    auxiliary_rows: np.ndarray = field(repr=False)

    @property
    def train(self) -> Dataset:
        """Remaining and erased rows together (the original training set)."""
        return Dataset(
            np.vstack([self.remaining.inputs, self.erased.inputs]),
            np.concatenate([self.remaining.labels, self.erased.labels]),
            self.remaining.n_classes,
        )


@dataclass(frozen=True)
class BackdoorSpec:
    trigger_indices: tuple[int, ...]
    trigger_value: float = 1.0
    target_label: int = 0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.trigger_indices)
        if len(set(idx)) != len(idx):
            raise ValueError("trigger indices must be distinct")
        if any(i < 0 for i in idx):
            raise ValueError("trigger indices must be nonnegative")
        if not 0.0 <= self.trigger_value <= 1.0:
            raise ValueError("trigger value must lie in [0, 1]")
        object.__setattr__(self, "trigger_indices", idx)

    @classmethod
    def default(cls, n_features: int) -> "BackdoorSpec":
        """First ceil(n/16) features set to 1.0, target label 0."""
        return cls(tuple(range(math.ceil(n_features / 16))), 1.0, 0)

    def validate(self, n_features: int, n_classes: int) -> None:
        if any(i >= n_features for i in self.trigger_indices):
            raise ValueError(f"trigger index out of range for {n_features} features")
        if not 0 <= self.target_label < n_classes:
            raise ValueError(f"target label {self.target_label} out of range")


def synth_blobs(rng: Rng, classes: int, per_class: int, dim: int, spread: float) -> Dataset:
    """Gaussian blobs around class means drawn in [0.15, 0.85]^dim.

    Means are redrawn until every pair is at least 4*spread apart; rows are
    clipped to [0, 1].
    """
    if classes < 2 or per_class < 1 or dim < 4:
        raise ValueError("synth_blobs needs classes >= 2, per_class >= 1, dim >= 4")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    for _ in range(1000):
        means = rng.uniform(0.15, 0.85, size=(classes, dim))
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        if np.all(gaps[np.triu_indices(classes, 1)] >= 4 * spread):
            break
    else:
        raise ValueError(f"could not place {classes} means {4 * spread} apart in {dim} dims")
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dim)) * spread
    inputs = np.clip(means[labels] + noise, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], classes)


def train_test_split(ds: Dataset, test_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    n_test = round_half_up(test_fraction * len(ds))
    if not 1 <= n_test < len(ds):
        raise ValueError(f"test fraction {test_fraction} leaves an empty split")
    order = rng.permutation(len(ds))
    return ds.take(order[n_test:]), ds.take(order[:n_test])


def partition(
    ds: Dataset,
    edr: float,
    aux_source: str,
    rng: Rng,
    test: Optional[Dataset] = None,
    exclude_labels: Sequence[int] = (),
) -> Partition:
    """Split a training set into remaining / erased rows and build an
    auxiliary set of the same size as the erased set.

    ``aux_source='held-out'`` samples auxiliary rows from the non-erased
    training rows; ``'random-inputs'`` draws uniform inputs with round-robin
    labels. ``exclude_labels`` keeps rows of those classes out of the erase
    set (backdoor experiments erase rows whose true label differs from the
    attack target).
    """
    if not 0.0 < edr < 0.5:
        raise ValueError(f"edr must lie in (0, 0.5), got {edr}")
    if aux_source not in ("held-out", "random-inputs"):
        raise ValueError(f"unknown auxiliary source {aux_source!r}")
    m = len(ds)
    n_erase = round_half_up(edr * m)
    if n_erase == 0:
        raise ValueError(f"edr={edr} on {m} rows gives an empty erase set")
    eligible = np.flatnonzero(~np.isin(ds.labels, list(exclude_labels)))
    if n_erase > len(eligible):
        raise ValueError(f"only {len(eligible)} eligible rows for {n_erase} erased samples")
    erased_rows = np.sort(eligible[uniform_indices(rng, len(eligible), n_erase, False)])
    keep = np.setdiff1d(np.arange(m), erased_rows)
    if aux_source == "held-out":
        if len(keep) < n_erase:
            raise ValueError("not enough non-erased rows for a held-out auxiliary set")
        aux_rows = np.sort(keep[uniform_indices(rng, len(keep), n_erase, False)])
        auxiliary = ds.take(aux_rows)
    else:
        aux_rows = np.zeros(0, dtype=np.int64)
        inputs = rng.uniform(0.0, 1.0, size=(n_erase, ds.n_features))
        labels = np.arange(n_erase) % ds.n_classes
        auxiliary = Dataset(inputs, labels, ds.n_classes)
    return Partition(
        remaining=ds.take(keep),
        erased=ds.take(erased_rows),
        auxiliary=auxiliary,
        test=test,
        erased_rows=erased_rows,
        auxiliary_rows=aux_rows,
    )


def stamp_trigger(inputs: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    out = np.array(inputs, dtype=np.float64, copy=True)
    out[:, list(spec.trigger_indices)] = spec.trigger_value
    return out


def inject_backdoor(ds: Dataset, spec: BackdoorSpec, rows) -> Dataset:
    rows = np.asarray(rows, dtype=np.int64).ravel()
    spec.validate(ds.n_features, ds.n_classes)
    if rows.size and (rows.min() < 0 or rows.max() >= len(ds)):
        raise IndexError(f"backdoor row index out of range for {len(ds)} rows")
    inputs = ds.inputs.copy()
    labels = ds.labels.copy()
    if rows.size:
        inputs[rows] = stamp_trigger(inputs[rows], spec)
        labels[rows] = spec.target_label
    return replace(ds, inputs=inputs, labels=labels)


# ---------------------------------------------------------------------------
# IDX files


def read_idx_raw(path) -> tuple[bytes, tuple[int, ...], np.ndarray]:
    """Magic bytes, dimension sizes and the raw uint8 payload of an IDX file."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    magic = blob[:4]
    if magic[:3] != b"\x00\x00\x08":
        raise IdxMagicError(f"{path}: bad IDX magic {magic.hex()}")
    rank = magic[3]
    header = 4 + 4 * rank
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{rank}I", blob[4:header])
    expected = int(np.prod(dims)) if dims else 0
    payload = blob[header:]
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return magic, dims, np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def write_idx(path, magic: bytes, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    header = magic + struct.pack(f">{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + data.tobytes())


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    img_magic, img_dims, images = read_idx_raw(images_path)
    if img_magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: expected image magic {IDX_IMAGE_MAGIC.hex()}, got {img_magic.hex()}")
    lab_magic, lab_dims, labels = read_idx_raw(labels_path)
    if lab_magic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: expected label magic {IDX_LABEL_MAGIC.hex()}, got {lab_magic.hex()}")
    if img_dims[0] != lab_dims[0]:
        raise IdxCountMismatchError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    inputs = images.reshape(img_dims[0], -1).astype(np.float64) / 255.0
    n_classes = max(n_classes, int(labels.max()) + 1) if labels.size else n_classes
    return Dataset(inputs, labels.astype(np.int64), n_classes)


# ---------------------------------------------------------------------------
# CSV


def write_csv(ds: Dataset, path) -> None:
    n = ds.n_features
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(n)] + ["label"])
        for row, label in zip(ds.inputs, ds.labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])


def read_csv(path, n_classes: Optional[int] = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
            raise ValueError(f"{path}: header must be f0,...,f{{n-1}},label")
        rows = [r for r in reader if r]
    inputs = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows])
    if n_classes is None:
        n_classes = max(2, int(labels.max()) + 1)
    return Dataset(inputs, labels, n_classes)
