"""
Group-structured datasets.

Synthetic generators with a controllable difficulty per group, class-pair stitching,
stratified splitting, group balancing, the mitigation helpers (extra data for a group,
weighted minibatch sampling) and the IDX reader/writer for MNIST-family files.
"""

import csv
import gzip
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from typing import Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from lab_errors import (
    ClassSelectionError,
    DatasetInvariantError,
    EmptyDataError,
    GroupError,
    IdxFormatError,
    InsufficientReserveError,
    InvalidParameterError,
    MatchedDistributionError,
    SchemaError,
    ShapeError,
    StratificationError,
)

logger = logging.getLogger("amplification-lab.data")

DEFAULT_TEST_FRACTION = 0.2

# teaser geometry: local coordinates u, v in [-1, 1]; groups sit in separate horizontal bands
TEASER_AMPLITUDE = 0.5
TEASER_BAND_OFFSET = 1.25

IDX_UNSIGNED_BYTE = 0x08

FASHION_MNIST_CLASSES = (
    "T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot",
)
# easy pair (Trouser vs Sneaker) and hard pair (T-shirt/top vs Shirt)
FASHION_MNIST_SIMPLE_PAIR = (1, 7)
FASHION_MNIST_COMPLEX_PAIR = (0, 6)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class GroupedDataset:
    """Feature matrix with a class label and a group label per row. Arrays are read-only."""

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    class_names: Tuple[str, ...] = ()
    group_names: Tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        groups = np.array(self.groups, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise DatasetInvariantError(f"features must be a 2-D matrix, got shape {features.shape}")
        if labels.shape[0] != features.shape[0] or groups.shape[0] != features.shape[0]:
            raise DatasetInvariantError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels and {groups.shape[0]} groups")
        if not np.all(np.isfinite(features)):
            raise DatasetInvariantError("features contain non-finite values")

        class_names = tuple(self.class_names) or tuple(str(c) for c in range(int(labels.max()) + 1 if labels.size else 0))
        group_names = tuple(self.group_names) or tuple(str(g) for g in range(int(groups.max()) + 1 if groups.size else 0))
        if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
            raise DatasetInvariantError(f"labels must lie in [0, {len(class_names)})")
        if groups.size and (groups.min() < 0 or groups.max() >= len(group_names)):
            raise DatasetInvariantError(f"groups must lie in [0, {len(group_names)})")

        for array in (features, labels, groups):
            array.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "class_names", class_names)
        object.__setattr__(self, "group_names", group_names)

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_groups(self) -> int:
        return len(self.group_names)

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.num_groups)

    def label_histogram(self, group: Optional[int] = None) -> np.ndarray:
        labels = self.labels if group is None else self.labels[self.groups == group]
        return np.bincount(labels, minlength=self.num_classes)

    def cell_counts(self) -> np.ndarray:
        """(num_groups, num_classes) matrix of row counts."""
        counts = np.zeros((self.num_groups, self.num_classes), dtype=np.int64)
        np.add.at(counts, (self.groups, self.labels), 1)
        return counts

    def cell_indices(self, group: int, label: int) -> np.ndarray:
        return np.flatnonzero((self.groups == group) & (self.labels == label))

    def subset(self, indices: Sequence[int]) -> "GroupedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return GroupedDataset(self.features[indices], self.labels[indices], self.groups[indices],
                              self.class_names, self.group_names)

    def group_slice(self, group: int) -> "GroupedDataset":
        if not 0 <= group < self.num_groups:
            raise GroupError(f"Unknown group id {group}; dataset has {self.num_groups} groups")
        return self.subset(np.flatnonzero(self.groups == group))

    def class_slice(self, label: int) -> "GroupedDataset":
        if not 0 <= label < self.num_classes:
            raise ClassSelectionError(f"Unknown class id {label}; dataset has {self.num_classes} classes")
        return self.subset(np.flatnonzero(self.labels == label))

    @classmethod
    def concatenate(cls, datasets: Sequence["GroupedDataset"]) -> "GroupedDataset":
        first = datasets[0]
        if any(ds.n_features != first.n_features for ds in datasets):
            raise ShapeError("Cannot concatenate datasets with different feature counts")
        return cls(np.vstack([ds.features for ds in datasets]), np.concatenate([ds.labels for ds in datasets]),
                   np.concatenate([ds.groups for ds in datasets]), first.class_names, first.group_names)

    def save_csv(self, path: str) -> None:
        """Write `feature_0..feature_{d-1},label,group` rows; floats use their round-trip repr."""
        header = [f"feature_{index}" for index in range(self.n_features)] + ["label", "group"]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row, label, group in zip(self.features, self.labels, self.groups):
                writer.writerow([repr(float(value)) for value in row] + [int(label), int(group)])
        logger.info(f"Wrote {self.n_rows} rows to {path}")

    @classmethod
    def load_csv(cls, path: str) -> "GroupedDataset":
        with open(path, newline="") as handle:
            header = next(csv.reader(handle), None)
        if not header or header[-2:] != ["label", "group"]:
            raise SchemaError(f"{path} does not end with label,group columns")
        n_features = len(header) - 2
        if header[:-2] != [f"feature_{index}" for index in range(n_features)]:
            raise SchemaError(f"{path} has unexpected feature column names")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.shape[0] == 0:
            table = np.zeros((0, n_features + 2))
        return cls(table[:, :n_features], table[:, -2].astype(np.int64), table[:, -1].astype(np.int64))


@dataclass(frozen=True)
class Sampler:
    """
    Minibatch index source.

    Uniform mode walks shuffled epochs. Weighted mode draws each epoch's indices with
    replacement with probability proportional to the per-row weights.
    """

    mode: Literal["uniform", "weighted"] = "uniform"
    weights: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode == "weighted":
            if self.weights is None:
                raise InvalidParameterError("Weighted sampler needs per-row weights")
            weights = np.array(self.weights, dtype=np.float64).reshape(-1)
            if np.any(~np.isfinite(weights)) or np.any(weights < 0) or not np.any(weights > 0):
                raise InvalidParameterError("Sampler weights must be finite, non-negative, with one positive")
            weights.setflags(write=False)
            object.__setattr__(self, "weights", weights)
        elif self.mode != "uniform":
            raise InvalidParameterError(f"Unknown sampler mode '{self.mode}'")

    @classmethod
    def uniform(cls, seed: int = 0) -> "Sampler":
        return cls("uniform", None, seed)

    @classmethod
    def weighted(cls, weights: np.ndarray, seed: int = 0) -> "Sampler":
        return cls("weighted", weights, seed)

    def with_seed(self, seed: int) -> "Sampler":
        return Sampler(self.mode, self.weights, seed)

    def _rng(self, salt: Optional[int]) -> np.random.Generator:
        return np.random.default_rng(self.seed if salt is None else [self.seed, salt])

    def probabilities(self, n_rows: int) -> np.ndarray:
        if self.mode == "uniform":
            return np.full(n_rows, 1.0 / n_rows)
        if self.weights.shape[0] != n_rows:
            raise ShapeError(f"Sampler holds {self.weights.shape[0]} weights for {n_rows} rows")
        return self.weights / self.weights.sum()

    def draw(self, count: int, n_rows: Optional[int] = None, salt: Optional[int] = None) -> np.ndarray:
        """`count` independent row draws (with replacement)."""
        n_rows = n_rows if n_rows is not None else self.weights.shape[0]
        return self._rng(salt).choice(n_rows, size=count, replace=True, p=self.probabilities(n_rows))

    def index_batches(self, n_rows: int, batch_size: int, n_batches: int,
                      salt: Optional[int] = None) -> Iterator[np.ndarray]:
        """Yield `n_batches` index arrays; each epoch is cut into ceil(n_rows / batch_size) batches."""
        if n_rows < 1:
            raise EmptyDataError("Cannot sample from an empty dataset")
        rng = self._rng(salt)
        probabilities = self.probabilities(n_rows)
        produced = 0
        while produced < n_batches:
            if self.mode == "uniform":
                order = rng.permutation(n_rows)
            else:
                order = rng.choice(n_rows, size=n_rows, replace=True, p=probabilities)
            for start in range(0, n_rows, batch_size):
                if produced == n_batches:
                    return
                yield order[start:start + batch_size]
                produced += 1


class TaskSpec(BaseModel):
    generator: Literal["teaser", "twin", "blobs"] = Field("teaser", description="Generator id")
    n: int = Field(2000, description="Total rows (per class for blobs: n // num_classes)")
    noise: float = Field(0.0, description="Symmetric label-flip rate")
    margin: float = Field(0.1, description="Gap around each decision boundary")
    frequency: float = Field(2.0, description="Boundary frequency of the complex group")
    simple_frequency: float = Field(0.0, description="Boundary frequency of the simple group")
    num_classes: int = Field(4, description="Class count for the blob generator")
    dim: int = Field(8, description="Feature count for the blob generator")
    spread: float = Field(1.0, description="Within-class standard deviation for the blob generator")
    seed: int = Field(0, ge=0)
    balanced: bool = True

    @model_validator(mode="after")
    def _check_size(self) -> "TaskSpec":
        if self.generator in ("teaser", "twin") and self.balanced and (self.n < 4 or self.n % 4 != 0):
            raise InvalidParameterError(f"n must be a positive multiple of 4 for a balanced two-group task, got {self.n}")
        return self


def _check_teaser_parameters(n: int, margin: float, frequency: float, noise: float) -> None:
    if n < 4 or n % 4 != 0:
        raise InvalidParameterError(f"n must be a multiple of 4 and at least 4, got {n}")
    if frequency < 0:
        raise InvalidParameterError(f"frequency must be >= 0, got {frequency}")
    if not 0.0 <= noise <= 0.5:
        raise InvalidParameterError(f"noise must lie in [0, 0.5], got {noise}")
    if not 0.0 <= margin < 1.0:
        raise InvalidParameterError(f"margin must lie in [0, 1), got {margin}")


def _sample_band(rng: np.random.Generator, per_cell: int, frequency: float,
                 margin: float, noise: float) -> Tuple[np.ndarray, np.ndarray]:
    """Points in [-1, 1]^2 labeled by v > A sin(2 pi f u), rejection-sampled to `per_cell` per label."""
    cells: List[List[np.ndarray]] = [[], []]
    filled = [0, 0]
    while min(filled) < per_cell:
        candidates = rng.uniform(-1.0, 1.0, size=(4 * per_cell + 16, 2))
        offset = candidates[:, 1] - TEASER_AMPLITUDE * np.sin(2.0 * np.pi * frequency * candidates[:, 0])
        outside_gap = np.abs(offset) >= margin / 2.0
        for label, side in ((0, offset < 0), (1, offset > 0)):
            fresh = candidates[outside_gap & side][: per_cell - filled[label]]
            cells[label].append(fresh)
            filled[label] += fresh.shape[0]

    points = np.vstack([np.vstack(cells[0]), np.vstack(cells[1])])
    labels = np.repeat([0, 1], per_cell)
    flips = _round_half_up(noise * per_cell)
    if flips:
        labels[rng.choice(per_cell, flips, replace=False)] = 1
        labels[per_cell + rng.choice(per_cell, flips, replace=False)] = 0
    return points, labels


def _place_bands(bands: Sequence[Tuple[np.ndarray, np.ndarray]], group_names: Tuple[str, str]) -> GroupedDataset:
    features, labels, groups = [], [], []
    for group, (points, band_labels) in enumerate(bands):
        shift = TEASER_BAND_OFFSET if group == 0 else -TEASER_BAND_OFFSET
        features.append(np.column_stack([points[:, 0], points[:, 1] + shift]))
        labels.append(band_labels)
        groups.append(np.full(band_labels.shape[0], group))
    return GroupedDataset(np.vstack(features), np.concatenate(labels), np.concatenate(groups),
                          class_names=("label_0", "label_1"), group_names=group_names)


def gen_teaser_task(n: int, margin: float, frequency: float, noise: float = 0.0, seed: int = 0,
                    simple_frequency: float = 0.0) -> GroupedDataset:
    """
    Two-group binary task in 2-D.

    Group 0 ("simple", upper band) is split by the line v = 0 (or by a sine of
    `simple_frequency`); group 1 ("complex", lower band) by v = 0.5 sin(2 pi frequency u).
    Both keep a gap of `margin` around their boundary.

    Args:
        n (int): Total rows, a multiple of 4; every (group, label) cell gets n/4 rows.
        margin (float): Gap width around the boundaries, in [0, 1).
        frequency (float): Boundary frequency of the complex group; the difficulty knob.
        noise (float): Label-flip rate in [0, 0.5]; the same number of rows flips in
            each direction, so cell counts stay exact.
        seed (int): Seed of the generator.

    Returns:
        GroupedDataset: n rows, 2 features.
    """
    _check_teaser_parameters(n, margin, frequency, noise)
    if simple_frequency < 0:
        raise InvalidParameterError(f"simple_frequency must be >= 0, got {simple_frequency}")
    rng = np.random.default_rng(seed)
    per_cell = n // 4
    simple = _sample_band(rng, per_cell, simple_frequency, margin, noise)
    complex_ = _sample_band(rng, per_cell, frequency, margin, noise)
    return _place_bands([simple, complex_], ("simple", "complex"))


def gen_twin_task(n: int, margin: float, frequency: float, noise: float = 0.0, seed: int = 0) -> GroupedDataset:
    """Two groups drawn from the identical generator and seed (only their band differs)."""
    _check_teaser_parameters(n, margin, frequency, noise)
    band = _sample_band(np.random.default_rng(seed), n // 4, frequency, margin, noise)
    return _place_bands([band, band], ("twin_a", "twin_b"))


def gen_class_blobs(n_per_class: int, num_classes: int, dim: int, spread: float = 1.0, seed: int = 0,
                    class_means: Optional[np.ndarray] = None) -> GroupedDataset:
    """
    Single-group multi-class Gaussian blobs.

    Class means are drawn from a standard normal (times 3) unless given; rows are the
    mean plus isotropic noise of standard deviation `spread`.
    """
    if n_per_class < 2 or num_classes < 2 or dim < 1 or spread < 0:
        raise InvalidParameterError("Blob generator needs n_per_class >= 2, num_classes >= 2, dim >= 1, spread >= 0")
    rng = np.random.default_rng(seed)
    means = 3.0 * rng.standard_normal((num_classes, dim)) if class_means is None else np.asarray(class_means, float)
    if means.shape != (num_classes, dim):
        raise ShapeError(f"class_means must have shape ({num_classes}, {dim}), got {means.shape}")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = means[labels] + spread * rng.standard_normal((labels.shape[0], dim))
    return GroupedDataset(features, labels, np.zeros_like(labels),
                          class_names=tuple(f"class_{c}" for c in range(num_classes)), group_names=("all",))


def generate_task(spec: TaskSpec) -> GroupedDataset:
    if spec.generator == "teaser":
        return gen_teaser_task(spec.n, spec.margin, spec.frequency, spec.noise, spec.seed, spec.simple_frequency)
    if spec.generator == "twin":
        return gen_twin_task(spec.n, spec.margin, spec.frequency, spec.noise, spec.seed)
    return gen_class_blobs(max(spec.n // spec.num_classes, 2), spec.num_classes, spec.dim, spec.spread, spec.seed)


def _content_seed(dataset: GroupedDataset) -> int:
    digest = hashlib.blake2b(dataset.features.tobytes() + dataset.labels.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _subsample(dataset: GroupedDataset, size: int, seed: int) -> GroupedDataset:
    # keyed by content, so the selection of a slice does not depend on its position
    if dataset.n_rows == size:
        return dataset
    rng = np.random.default_rng([seed, _content_seed(dataset)])
    return dataset.subset(np.sort(rng.choice(dataset.n_rows, size, replace=False)))


def _slice_name(dataset: GroupedDataset) -> str:
    labels = np.unique(dataset.labels)
    return dataset.class_names[labels[0]] if labels.size == 1 else "mixed"


def stitch_binary_task(pair_a: Tuple[GroupedDataset, GroupedDataset], pair_b: Tuple[GroupedDataset, GroupedDataset],
                       seed: int = 0, group_names: Optional[Tuple[str, str]] = None) -> GroupedDataset:
    """
    Merge two class pairs into one binary task.

    Label 0 = {a0, b0}, label 1 = {a1, b1}; group 0 holds pair_a rows, group 1 pair_b
    rows. All four slices are subsampled to the smallest slice size, so the groups are
    balanced with identical label distributions.

    Args:
        pair_a: (label-0 slice, label-1 slice) of the first group.
        pair_b: (label-0 slice, label-1 slice) of the second group.
        seed (int): Subsampling seed.
        group_names: display names; derived from the slice class names when omitted.

    Returns:
        GroupedDataset: Binary task with exactly equal (group, label) cells.
    """
    slices = [pair_a[0], pair_a[1], pair_b[0], pair_b[1]]
    if any(piece.n_rows == 0 for piece in slices):
        raise EmptyDataError(f"Cannot stitch empty slices (sizes {[piece.n_rows for piece in slices]})")
    if len({piece.n_features for piece in slices}) != 1:
        raise ShapeError(f"Slices have different feature counts {[piece.n_features for piece in slices]}")

    size = min(piece.n_rows for piece in slices)
    chosen = [_subsample(piece, size, seed) for piece in slices]
    names = [_slice_name(piece) for piece in slices]
    if group_names is None:
        group_names = (f"{names[0]}/{names[1]}", f"{names[2]}/{names[3]}")
    logger.debug(f"Stitched {names} with {size} rows per cell")
    return GroupedDataset(
        np.vstack([piece.features for piece in chosen]),
        np.tile(np.repeat([0, 1], size), 2),
        np.repeat([0, 1], 2 * size),
        class_names=(f"{names[0]}|{names[2]}", f"{names[1]}|{names[3]}"),
        group_names=tuple(group_names),
    )


def stratified_split(dataset: GroupedDataset, test_fraction: float = DEFAULT_TEST_FRACTION,
                     seed: int = 0) -> Tuple[GroupedDataset, GroupedDataset]:
    """
    Split every (group, label) cell into train and test at `test_fraction`.

    Raises:
        StratificationError: a non-empty cell with fewer than 2 rows.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_rows, test_rows = [], []
    for group in range(dataset.num_groups):
        for label in range(dataset.num_classes):
            cell = dataset.cell_indices(group, label)
            if cell.size == 0:
                continue
            if cell.size < 2:
                raise StratificationError(f"Cell (group={group}, label={label}) has {cell.size} row; need >= 2",
                                          context={"group": group, "label": label})
            n_test = min(max(_round_half_up(cell.size * test_fraction), 1), cell.size - 1)
            shuffled = rng.permutation(cell)
            test_rows.append(shuffled[:n_test])
            train_rows.append(shuffled[n_test:])
    if not train_rows:
        raise EmptyDataError("Cannot split an empty dataset")
    return (dataset.subset(np.sort(np.concatenate(train_rows))),
            dataset.subset(np.sort(np.concatenate(test_rows))))


def balance_groups(dataset: GroupedDataset, seed: int = 0, match_labels: bool = True) -> GroupedDataset:
    """
    Subsample so every group has the same size and label histogram.

    Each label keeps its minimum cell count across groups. With `match_labels=False`
    only group sizes are equalized (labels are left as drawn).

    Raises:
        MatchedDistributionError: a label present in some groups but absent from others.
    """
    sizes = dataset.group_counts()
    if dataset.num_groups == 0 or np.any(sizes == 0):
        raise GroupError(f"Every group must be non-empty, got sizes {sizes.tolist()}")
    rng = np.random.default_rng(seed)
    counts = dataset.cell_counts()
    keep: List[np.ndarray] = []

    if match_labels:
        present = counts.sum(axis=0) > 0
        offending = [(group, label) for label in np.flatnonzero(present)
                     for group in range(dataset.num_groups) if counts[group, label] == 0]
        if offending:
            raise MatchedDistributionError(
                f"Labels missing from some groups, cannot match label distributions: {offending}", cells=offending)
        target = counts.min(axis=0)
        for group in range(dataset.num_groups):
            for label in np.flatnonzero(present):
                cell = dataset.cell_indices(group, label)
                keep.append(cell if cell.size == target[label] else rng.choice(cell, target[label], replace=False))
    else:
        target_size = sizes.min()
        for group in range(dataset.num_groups):
            rows = np.flatnonzero(dataset.groups == group)
            keep.append(rows if rows.size == target_size else rng.choice(rows, target_size, replace=False))

    return dataset.subset(np.sort(np.concatenate(keep)))


def augment_group(base: GroupedDataset, reserve: GroupedDataset, group: int, factor: float,
                  seed: int = 0) -> GroupedDataset:
    """
    Grow one group to round(factor * its size) with rows drawn from `reserve` without replacement.

    Raises:
        InsufficientReserveError: the reserve holds fewer rows than needed.
    """
    if factor < 1.0:
        raise InvalidParameterError(f"factor must be >= 1, got {factor}")
    if not 0 <= group < base.num_groups:
        raise GroupError(f"Unknown group id {group}; dataset has {base.num_groups} groups")
    if reserve.n_rows and np.any(reserve.groups != group):
        raise InvalidParameterError(f"Reserve must only contain rows of group {group}")
    if reserve.n_rows and reserve.n_features != base.n_features:
        raise ShapeError(f"Reserve has {reserve.n_features} features, base has {base.n_features}")

    original = int(base.group_counts()[group])
    needed = _round_half_up(factor * original) - original
    if needed == 0:
        return base
    if reserve.n_rows < needed:
        deficit = needed - reserve.n_rows
        raise InsufficientReserveError(
            f"Reserve holds {reserve.n_rows} rows but {needed} are needed (short by {deficit})", deficit=deficit)
    rng = np.random.default_rng(seed)
    drawn = reserve.subset(np.sort(rng.choice(reserve.n_rows, needed, replace=False)))
    logger.info(f"Added {needed} reserve rows to group {group} ({original} -> {original + needed})")
    return GroupedDataset.concatenate([base, drawn])


def oversample_weights(dataset: GroupedDataset, group: int, weight: float, seed: int = 0) -> Sampler:
    """Weighted sampler with `weight` on the rows of `group` and 1 elsewhere."""
    if weight <= 0:
        raise InvalidParameterError(f"weight must be > 0, got {weight}")
    if not 0 <= group < dataset.num_groups:
        raise GroupError(f"Unknown group id {group}; dataset has {dataset.num_groups} groups")
    return Sampler.weighted(np.where(dataset.groups == group, float(weight), 1.0), seed=seed)


def read_idx(path: str) -> np.ndarray:
    """
    Read an unsigned-byte IDX array.

    Layout: two zero bytes, the data type byte (0x08), the dimension count, one
    big-endian uint32 size per dimension, then the data.
    """
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < 4:
        raise IdxFormatError("truncated header", path, len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"bad magic number 0x{raw[:4].hex()}", path, 0)
    if raw[2] != IDX_UNSIGNED_BYTE:
        raise IdxFormatError(f"unsupported data type 0x{raw[2]:02x} (only unsigned byte)", path, 2)
    ndim = raw[3]
    if ndim < 1:
        raise IdxFormatError("zero dimensions", path, 3)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError("truncated dimension sizes", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    available = len(raw) - header_end
    if available < expected:
        raise IdxFormatError(f"truncated data: expected {expected} bytes, found {available}", path, len(raw))
    if available > expected:
        raise IdxFormatError(f"{available - expected} trailing bytes after data", path, header_end + expected)
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)


def write_idx(path: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InvalidParameterError(f"IDX writer only supports uint8 arrays, got {array.dtype}")
    header = bytes([0, 0, IDX_UNSIGNED_BYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as handle:
        handle.write(header + array.tobytes())


def load_idx(images_path: str, labels_path: str,
             class_names: Optional[Sequence[str]] = None) -> GroupedDataset:
    """
    Load an IDX image/label file pair as a single-group dataset.

    Args:
        images_path (str): IDX file of shape (n, rows, cols) or (n, d); ".gz" is decompressed.
        labels_path (str): IDX file of shape (n,).
        class_names: optional display names (e.g. FASHION_MNIST_CLASSES).

    Returns:
        GroupedDataset: pixels scaled to [0, 1], group 0 on every row.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"label file must be 1-D, found {labels.ndim} dimensions", labels_path, 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path, 4)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    names = tuple(class_names) if class_names else ()
    if names and labels.size and labels.max() >= len(names):
        raise ClassSelectionError(f"Label {labels.max()} has no entry in the {len(names)} class names")
    logger.info(f"Loaded {features.shape[0]} IDX rows with {features.shape[1]} features from {images_path}")
    return GroupedDataset(features, labels.astype(np.int64), np.zeros(labels.shape[0], dtype=np.int64),
                          class_names=names, group_names=("all",))


def select_classes(dataset: GroupedDataset, classes: Sequence[int]) -> GroupedDataset:
    """Keep rows of `classes` and renumber them densely in increasing class-id order."""
    chosen = sorted({int(label) for label in classes})
    if not chosen:
        raise ClassSelectionError("No classes selected")
    counts = dataset.label_histogram()
    unknown = [label for label in chosen if not 0 <= label < dataset.num_classes or counts[label] == 0]
    if unknown:
        raise ClassSelectionError(f"Classes {unknown} are not present in the dataset")
    lookup = np.full(dataset.num_classes, -1, dtype=np.int64)
    lookup[chosen] = np.arange(len(chosen))
    mask = np.isin(dataset.labels, chosen)
    return GroupedDataset(dataset.features[mask], lookup[dataset.labels[mask]], dataset.groups[mask],
                          class_names=tuple(dataset.class_names[label] for label in chosen),
                          group_names=dataset.group_names)
