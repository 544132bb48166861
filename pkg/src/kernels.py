"""
Kernel functions and Gram-matrix assembly.

Every Gram entry is produced by the same per-feature accumulation as kernel_eval, in feature
order, so a matrix cell never depends on the shape of the block it was computed in.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np
from scipy.spatial.distance import pdist

from datamodel import read_csv_matrix
from errors import KernelError

logger = logging.getLogger(__name__)

KERNEL_KINDS = ("rbf", "chi2", "linear", "precomputed")
CHI2_EPSILON = 1e-10
PRECOMPUTED_SYMMETRY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class KernelSpec:
    """
    kind is one of rbf, chi2, linear, precomputed.

    gamma=None on rbf/chi2 means "not chosen yet"; resolve_kernel fills it with the median heuristic.
    """

    kind: str
    gamma: Optional[float] = None
    epsilon: float = CHI2_EPSILON
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}; expected one of {', '.join(KERNEL_KINDS)}")
        if self.gamma is not None and not self.gamma > 0:
            raise KernelError(f"kernel gamma must be positive, got {self.gamma}")
        if not self.epsilon > 0:
            raise KernelError(f"chi2 epsilon must be positive, got {self.epsilon}")
        if self.kind == "precomputed" and not self.path:
            raise KernelError("precomputed kernel needs a path")

    @classmethod
    def rbf(cls, gamma: Optional[float] = None) -> "KernelSpec":
        return cls(kind="rbf", gamma=gamma)

    @classmethod
    def chi_squared(cls, gamma: Optional[float] = None, epsilon: float = CHI2_EPSILON) -> "KernelSpec":
        return cls(kind="chi2", gamma=gamma, epsilon=epsilon)

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(kind="linear")

    @classmethod
    def precomputed(cls, path: str) -> "KernelSpec":
        return cls(kind="precomputed", path=path)

    @property
    def needs_gamma(self) -> bool:
        return self.kind in ("rbf", "chi2")

    def to_dict(self) -> Dict:
        data: Dict = {"kind": self.kind}
        if self.needs_gamma:
            data["gamma"] = self.gamma
        if self.kind == "chi2":
            data["epsilon"] = self.epsilon
        if self.kind == "precomputed":
            data["path"] = self.path
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "KernelSpec":
        return cls(
            kind=data["kind"],
            gamma=data.get("gamma"),
            epsilon=data.get("epsilon", CHI2_EPSILON),
            path=data.get("path"),
        )


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    spec: KernelSpec

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _kernel_block(A: np.ndarray, B: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Kernel values between the columns of A (d x t) and B (d x n), as a t x n matrix."""
    if A.shape[0] != B.shape[0]:
        raise KernelError(f"dimension mismatch: {A.shape[0]} vs {B.shape[0]} features")
    if spec.kind == "precomputed":
        raise KernelError("precomputed kernels cannot be evaluated on feature vectors")
    if spec.needs_gamma and spec.gamma is None:
        raise KernelError(f"{spec.kind} kernel has no gamma; resolve it before building Gram matrices")

    acc = np.zeros((A.shape[1], B.shape[1]))
    if spec.kind == "linear":
        for k in range(A.shape[0]):
            acc += A[k][:, None] * B[k][None, :]
        return acc

    if spec.kind == "rbf":
        for k in range(A.shape[0]):
            acc += (A[k][:, None] - B[k][None, :]) ** 2
        return np.exp(-spec.gamma * acc)

    if np.any(A < 0) or np.any(B < 0):
        raise KernelError("chi2 kernel requires non-negative features")
    for k in range(A.shape[0]):
        diff = A[k][:, None] - B[k][None, :]
        acc += diff**2 / (A[k][:, None] + B[k][None, :] + spec.epsilon)
    return np.exp(-spec.gamma * acc)


def kernel_eval(x: np.ndarray, y: np.ndarray, spec: KernelSpec) -> float:
    """
    RBF: exp(-gamma ||x - y||^2). chi2: exp(-gamma sum (x_j - y_j)^2 / (x_j + y_j + epsilon)).
    Linear: x^T y.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise KernelError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return float(_kernel_block(x[:, None], y[:, None], spec)[0, 0])


def load_precomputed_kernel(path: str) -> np.ndarray:
    """Read a square kernel CSV, reject it if asymmetric beyond 1e-9, and return it symmetrized."""
    values = read_csv_matrix(path)
    if values.shape[0] != values.shape[1]:
        raise KernelError(f"precomputed kernel {path} is {values.shape[0]}x{values.shape[1]}, not square")
    asymmetry = float(np.max(np.abs(values - values.T)))
    if asymmetry > PRECOMPUTED_SYMMETRY_TOLERANCE:
        raise KernelError(f"precomputed kernel {path} is not symmetric (max |K - K^T| = {asymmetry:.3g})")
    return (values + values.T) / 2


def gram_matrix(X: np.ndarray, spec: KernelSpec) -> GramMatrix:
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    if n < 1:
        raise KernelError("cannot build a Gram matrix of zero samples")
    if spec.kind == "precomputed":
        values = load_precomputed_kernel(spec.path)
        if values.shape != (n, n):
            raise KernelError(f"precomputed kernel is {values.shape[0]}x{values.shape[1]}, expected {n}x{n}")
        return GramMatrix(values=values, spec=spec)

    values = _kernel_block(X, X, spec)
    values = (values + values.T) / 2
    logger.debug(f"Built {n}x{n} {spec.kind} Gram matrix")
    return GramMatrix(values=values, spec=spec)


def cross_gram(X_test: np.ndarray, X_train: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Entry [j][i] = k(test_j, train_i)."""
    return _kernel_block(np.asarray(X_test, dtype=float), np.asarray(X_train, dtype=float), spec)


def kernel_block_by_index(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sub-block of a precomputed kernel over the given sample indices."""
    return values[np.ix_(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))]


def median_heuristic_gamma(X: np.ndarray) -> float:
    """1 / median of the squared Euclidean distances over all pairs i < j."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] < 2:
        raise KernelError("median heuristic needs at least two samples")
    median = float(np.median(pdist(X.T, "sqeuclidean")))
    if median <= 0.0:
        raise KernelError("median pairwise distance is zero; samples are (mostly) identical")
    return 1.0 / median


def resolve_kernel(spec: KernelSpec, X: np.ndarray) -> KernelSpec:
    """Fill a missing gamma from the training samples X via the median heuristic."""
    if not spec.needs_gamma or spec.gamma is not None:
        return spec
    gamma = median_heuristic_gamma(X)
    logger.info(f"No gamma configured for {spec.kind} kernel; median heuristic gives {gamma:.6g}")
    return replace(spec, gamma=gamma)
