"""
Data containers, CSV ingestion, the labels-per-class split protocol and synthetic generators.

Samples are stored column-wise (d x n) so the linear algebra reads like the math;
files are row-per-sample and the loader transposes.
"""

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, ParseError

logger = logging.getLogger(__name__)

# Label value of a sample whose class is unknown. Never a valid class index.
UNLABELED = -1


def make_generator(seed: int) -> np.random.Generator:
    """
    The one PRNG used for every random draw: numpy's PCG64 bit generator seeded with `seed`.
    Splits replicate wherever PCG64 with the same seed is available.
    """
    if seed < 0:
        raise DataError(f"seed must be an unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Dataset:
    """Sample matrix X (d x n) with a label per column; UNLABELED marks unknown classes."""

    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if samples.ndim != 2:
            raise DataError(f"samples must be a d x n matrix, got shape {samples.shape}")
        d, n = samples.shape
        if d < 1 or n < 1:
            raise DataError(f"samples need d >= 1 and n >= 1, got d={d}, n={n}")
        if labels.shape[0] != n:
            raise DataError(f"expected {n} labels, got {labels.shape[0]}")
        if self.class_count < 1:
            raise DataError(f"class_count must be positive, got {self.class_count}")
        bad = labels[(labels != UNLABELED) & ((labels < 0) | (labels >= self.class_count))]
        if bad.size:
            raise DataError(f"label {int(bad[0])} outside [0, {self.class_count - 1}]")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def m(self) -> int:
        return int(np.count_nonzero(self.labeled_mask))

    @property
    def X_l(self) -> np.ndarray:
        return self.samples[:, self.labeled_mask]

    @property
    def X_u(self) -> np.ndarray:
        return self.samples[:, ~self.labeled_mask]

    @property
    def Y(self) -> np.ndarray:
        """One-hot class assignment (n x c); rows of unlabeled samples are zero."""
        Y = np.zeros((self.n, self.class_count))
        labeled = np.flatnonzero(self.labeled_mask)
        Y[labeled, self.labels[labeled]] = 1.0
        return Y

    @property
    def fully_labeled(self) -> bool:
        return bool(np.all(self.labeled_mask))

    def class_members(self, t: int) -> np.ndarray:
        """Indices of the samples labeled with class t (the class set of t)."""
        return np.flatnonzero(self.labels == t)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[:, idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class SplitSpec:
    labeled_indices: Mapping[int, Tuple[int, ...]]
    unlabeled_indices: Tuple[int, ...]
    seed: int
    labels_per_class: int

    def __post_init__(self):
        # Read-only view over a private copy
        labeled = {int(t): tuple(int(i) for i in members) for t, members in self.labeled_indices.items()}
        object.__setattr__(self, "labeled_indices", MappingProxyType(labeled))
        object.__setattr__(self, "unlabeled_indices", tuple(int(i) for i in self.unlabeled_indices))

    def labeled(self) -> List[int]:
        return sorted(i for members in self.labeled_indices.values() for i in members)

    def to_dict(self) -> Dict:
        return {
            "labeled_indices": {str(t): list(members) for t, members in self.labeled_indices.items()},
            "unlabeled_indices": list(self.unlabeled_indices),
            "seed": self.seed,
            "labels_per_class": self.labels_per_class,
        }


@dataclass(frozen=True)
class ScaledAssignment:
    G: np.ndarray


def _read_lines(path: str) -> List[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().split("\n")
    except OSError as e:
        raise DataError(f"Could not read {path}: {e}") from e
    # A trailing newline leaves one empty entry behind
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def read_csv_matrix(path: str) -> np.ndarray:
    """Parse a headerless comma-separated file of finite reals into a rows x columns array."""
    rows: List[List[float]] = []
    width = None
    for line_no, line in enumerate(_read_lines(path), start=1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(path, line_no, "ragged_row", f"expected {width} values, found {len(cells)}")
        row = []
        for cell in cells:
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(path, line_no, "non_numeric", f"cannot parse {cell.strip()!r} as a real")
            if not math.isfinite(value):
                raise ParseError(path, line_no, "non_numeric", f"non-finite value {cell.strip()!r}")
            row.append(value)
        rows.append(row)
    if not rows:
        raise ParseError(path, 1, "empty", "no rows found")
    return np.array(rows, dtype=float)


def load_csv_dataset(data_path: str, labels_path: str, class_count: Optional[int] = None) -> Dataset:
    """
    Load a row-per-sample CSV (no header) and a one-integer-per-line labels file.

    Returns the samples transposed to d x n in file order. c is 1 + the largest label unless
    `class_count` is given, in which case every label must fall below it.
    Each malformed input raises ParseError naming the 1-based line.
    """
    rows = read_csv_matrix(data_path)

    labels: List[int] = []
    for line_no, line in enumerate(_read_lines(labels_path), start=1):
        try:
            label = int(line.strip())
        except ValueError:
            raise ParseError(labels_path, line_no, "non_numeric", f"cannot parse {line.strip()!r} as an integer")
        if label < UNLABELED:
            raise ParseError(labels_path, line_no, "invalid_label", f"label {label} is neither a class nor -1")
        labels.append(label)
    if len(labels) != len(rows):
        line_no = min(len(labels), len(rows)) + 1
        raise ParseError(
            labels_path, line_no, "label_count_mismatch", f"{len(rows)} samples but {len(labels)} labels"
        )

    if class_count is None:
        class_count = max(1, 1 + max(labels))
    for line_no, label in enumerate(labels, start=1):
        if label >= class_count:
            raise ParseError(labels_path, line_no, "label_out_of_range", f"label {label} >= class count {class_count}")

    ds = Dataset(rows.T, np.array(labels, dtype=np.int64), class_count)
    logger.info(f"Loaded {data_path}: d={ds.d}, n={ds.n}, m={ds.m}, c={ds.class_count}")
    return ds


def write_csv_dataset(ds: Dataset, data_path: str, labels_path: str) -> None:
    """Write `ds` as the CSV pair read by load_csv_dataset, reals at 17 significant digits."""
    with open(data_path, "w", encoding="utf-8", newline="\n") as f:
        for j in range(ds.n):
            f.write(",".join(format(v, ".17g") for v in ds.samples[:, j]) + "\n")
    with open(labels_path, "w", encoding="utf-8", newline="\n") as f:
        for label in ds.labels:
            f.write(f"{int(label)}\n")


def reorder_labeled_first(ds: Dataset) -> Tuple[Dataset, np.ndarray]:
    """Stable partition moving labeled columns before unlabeled ones. permutation[new] = original."""
    permutation = np.concatenate([np.flatnonzero(ds.labeled_mask), np.flatnonzero(~ds.labeled_mask)])
    return ds.subset(permutation), permutation


def sample_labels_per_class(ds: Dataset, p: int, seed: int) -> SplitSpec:
    """
    Draw min(p, class size) labeled samples per class without replacement.
    Classes are visited in ascending order with a single PCG64 stream, so (ds, p, seed) fixes the split.
    """
    if p < 1:
        raise DataError(f"labels per class must be positive, got {p}")
    if not ds.fully_labeled:
        raise DataError("sampling a label split needs the ground-truth class of every sample")

    rng = make_generator(seed)
    labeled: Dict[int, Tuple[int, ...]] = {}
    for t in range(ds.class_count):
        members = ds.class_members(t)
        if members.size == 0:
            logger.warning(f"Class {t} has no members; it gets no labeled samples")
            labeled[t] = ()
            continue
        chosen = rng.choice(members, size=min(p, members.size), replace=False)
        labeled[t] = tuple(int(i) for i in np.sort(chosen))

    chosen_all = {i for members in labeled.values() for i in members}
    unlabeled = tuple(i for i in range(ds.n) if i not in chosen_all)
    return SplitSpec(labeled_indices=labeled, unlabeled_indices=unlabeled, seed=seed, labels_per_class=p)


def apply_split(ds: Dataset, split: SplitSpec) -> Dataset:
    """Hide the labels of every sample the split did not select."""
    labels = np.full(ds.n, UNLABELED, dtype=np.int64)
    keep = np.asarray(split.labeled(), dtype=np.int64)
    labels[keep] = ds.labels[keep]
    return Dataset(ds.samples, labels, ds.class_count)


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class random train/test partition. Each nonempty class keeps at least one training sample;
    floor(size * test_fraction) of its members go to the test side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = make_generator(seed)
    train, test = [], []
    for t in np.unique(labels[labels != UNLABELED]):
        members = rng.permutation(np.flatnonzero(labels == t))
        n_test = min(int(math.floor(members.size * test_fraction)), members.size - 1)
        test.extend(members[:n_test].tolist())
        train.extend(members[n_test:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def scaled_assignment(labels: np.ndarray, c: int) -> ScaledAssignment:
    """
    G = Y (Y^T Y)^(-1/2) for one-hot Y: labeled sample i of class t gets 1/sqrt(n_t).
    Unlabeled rows stay zero and so do the columns of classes with no labeled sample.
    """
    labels = np.asarray(labels, dtype=np.int64)
    G = np.zeros((labels.shape[0], c))
    for t in range(c):
        members = np.flatnonzero(labels == t)
        if members.size:
            G[members, t] = 1.0 / math.sqrt(members.size)
    return ScaledAssignment(G=G)


def make_gaussian_blobs(c: int, per_class: int, d: int, spread: float, seed: int) -> Dataset:
    """
    c isotropic Gaussian clusters with standard deviation `spread`.

    Class t is centred on coordinate axis t mod d at distance 10 * spread; classes beyond
    the first d use the negative half-axis, and past 2d the distance grows by one step per wrap.
    """
    if c < 1 or per_class < 1 or d < 1:
        raise DataError(f"blobs need positive c, per_class and d, got c={c}, per_class={per_class}, d={d}")
    if spread < 0:
        raise DataError(f"spread must be non-negative, got {spread}")

    rng = make_generator(seed)
    blocks = []
    for t in range(c):
        center = np.zeros(d)
        sign = 1.0 if (t // d) % 2 == 0 else -1.0
        center[t % d] = sign * 10.0 * spread * (1 + t // (2 * d))
        blocks.append(center[:, None] + spread * rng.standard_normal((d, per_class)))
    labels = np.repeat(np.arange(c), per_class)
    return Dataset(np.hstack(blocks), labels, c)


def make_concentric_rings(per_class: int, noise: float, seed: int) -> Dataset:
    """Two classes on circles of radius 1 and 3 in the plane, uniform angles, Gaussian radial noise."""
    if per_class < 3:
        raise DataError(f"rings need at least 3 samples per class, got {per_class}")
    if noise < 0:
        raise DataError(f"noise must be non-negative, got {noise}")

    rng = make_generator(seed)
    blocks = []
    for radius in (1.0, 3.0):
        angles = rng.uniform(0.0, 2.0 * math.pi, per_class)
        radii = radius + noise * rng.standard_normal(per_class)
        blocks.append(np.vstack([radii * np.cos(angles), radii * np.sin(angles)]))
    labels = np.repeat(np.arange(2), per_class)
    return Dataset(np.hstack(blocks), labels, 2)
