"""
Trace minimization over kernel expansions.

Minimizes Tr(a^T K (L_w + lambda L) K a) subject to a^T K a = I by
  1. K = V Lambda V^T, dropping eigenpairs below drop_tolerance * max eigenvalue,
  2. M = Lambda^1/2 V^T (L_w + lambda L) V Lambda^1/2,
  3. omega = eigenvectors of M for the r smallest eigenvalues,
  4. a = V Lambda^-1/2 omega  (the null-space component of K is left at zero).
"""

import json
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import eigh

from errors import DataError, SolverError
from graph import CliqueLaplacian, SupervisedLaplacian
from kernels import GramMatrix, KernelSpec

logger = logging.getLogger(__name__)

DEFAULT_DROP_TOLERANCE = 1e-10
MODEL_HEADER = "locdisc-model v1"

MatrixLike = Union[np.ndarray, GramMatrix, SupervisedLaplacian, CliqueLaplacian]


@dataclass(frozen=True)
class KernelEigen:
    V: np.ndarray
    Lambda: np.ndarray
    drop_tolerance: float

    @property
    def rank(self) -> int:
        return self.Lambda.shape[0]

    def reconstruct(self) -> np.ndarray:
        """The rank-truncated Gram matrix V Lambda V^T."""
        return (self.V * self.Lambda[None, :]) @ self.V.T


@dataclass(frozen=True)
class TransformModel:
    """
    Learned kernel expansion a (n x r): feature l of a sample x is sum_i a[i, l] k(x, x_i).

    `order` maps model row -> index of the training sample in the caller's original ordering.
    KPCA models also carry the training Gram statistics needed to centre new kernel rows.
    """

    a: np.ndarray
    lambda_reg: float
    theta: float
    k: int
    kernel: KernelSpec
    eigenvalues_of_M: np.ndarray
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE
    method: str = "ours"
    order: Optional[np.ndarray] = None
    center_means: Optional[np.ndarray] = None
    center_grand_mean: Optional[float] = None

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]

    @property
    def is_centered(self) -> bool:
        return self.center_means is not None


def _as_matrix(value: MatrixLike) -> np.ndarray:
    if isinstance(value, GramMatrix):
        return value.values
    if isinstance(value, SupervisedLaplacian):
        return value.L_w
    if isinstance(value, CliqueLaplacian):
        return value.L
    return np.asarray(value, dtype=float)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry (lowest index on ties) is positive."""
    vectors = np.array(vectors, dtype=float, copy=True)
    if vectors.size == 0:
        return vectors
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[pivots, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return vectors * signs[None, :]


def eigendecompose_kernel(K: MatrixLike, drop_tolerance: float = DEFAULT_DROP_TOLERANCE) -> KernelEigen:
    """Symmetric eigendecomposition of K keeping eigenvalues > drop_tolerance * max, sorted descending."""
    values = _as_matrix(K)
    if drop_tolerance < 0:
        raise SolverError(f"drop_tolerance must be non-negative, got {drop_tolerance}")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise SolverError(f"kernel matrix must be square, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise SolverError("kernel matrix contains non-finite values")

    w, V = eigh(values)
    w, V = w[::-1], V[:, ::-1]
    if w[0] <= 0:
        raise SolverError("kernel matrix has no positive eigenvalue")
    keep = (w > drop_tolerance * w[0]) & (w > 0)
    dropped = int(w.shape[0] - np.count_nonzero(keep))
    if dropped:
        logger.info(f"Dropped {dropped} of {w.shape[0]} kernel eigenpairs below {drop_tolerance:g} x max")
    return KernelEigen(V=fix_signs(V[:, keep]), Lambda=w[keep].copy(), drop_tolerance=drop_tolerance)


def fit(
    K: MatrixLike,
    L_w: MatrixLike,
    L: MatrixLike,
    lambda_reg: float,
    r: int,
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE,
) -> TransformModel:
    """
    Learn the r-column expansion minimizing Tr(a^T K (L_w + lambda L) K a) with a^T K a = I.

    Eigenvalues of M are returned ascending; their sum is the attained objective. Ties in M's
    spectrum (for instance M = 0 when lambda = 0 and L_w = 0) give an arbitrary but reproducible basis.
    """
    K_values = _as_matrix(K)
    L_w_values = _as_matrix(L_w)
    L_values = _as_matrix(L)
    n = K_values.shape[0]
    for name, matrix in (("K", K_values), ("L_w", L_w_values), ("L", L_values)):
        if matrix.shape != (n, n):
            raise SolverError(f"{name} is {matrix.shape[0]}x{matrix.shape[1]}, expected {n}x{n}")
        if not np.all(np.isfinite(matrix)):
            raise SolverError(f"{name} contains non-finite values")
    if lambda_reg < 0:
        raise SolverError(f"lambda must be non-negative, got {lambda_reg}")
    if r < 1:
        raise SolverError(f"r must be positive, got {r}")

    eig = eigendecompose_kernel(K_values, drop_tolerance)
    if r > eig.rank:
        raise SolverError(f"r={r} exceeds the kernel rank after dropping; maximum feasible r is {eig.rank}")

    root = np.sqrt(eig.Lambda)
    A = L_w_values + lambda_reg * L_values
    M = root[:, None] * (eig.V.T @ A @ eig.V) * root[None, :]
    M = (M + M.T) / 2
    mu, omega = eigh(M)
    omega = fix_signs(omega[:, :r])
    a = eig.V @ (omega / root[:, None])
    logger.debug(f"Solved rank-{eig.rank} reduced problem; smallest eigenvalues of M: {mu[:r]}")

    kernel = K.spec if isinstance(K, GramMatrix) else KernelSpec.linear()
    theta = L.theta if isinstance(L, CliqueLaplacian) else 0.0
    k = L.k if isinstance(L, CliqueLaplacian) else 0
    return TransformModel(
        a=a,
        lambda_reg=float(lambda_reg),
        theta=float(theta),
        k=int(k),
        kernel=kernel,
        eigenvalues_of_M=mu[:r].copy(),
        drop_tolerance=float(drop_tolerance),
    )


def objective_value(
    a: np.ndarray, K: Union[MatrixLike, KernelEigen], L_w: MatrixLike, L: MatrixLike, lambda_reg: float
) -> Tuple[float, float]:
    """
    Returns (Tr(a^T K (L_w + lambda L) K a), max |a^T K a - I|).

    Given a KernelEigen, K is the rank-truncated V Lambda V^T and both values are computed through
    its factor B = V Lambda^1/2, which stays accurate when a carries large coefficients on small
    kernel eigenvalues.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    A = _as_matrix(L_w) + lambda_reg * _as_matrix(L)
    n = K.V.shape[0] if isinstance(K, KernelEigen) else _as_matrix(K).shape[0]
    if a.shape[0] != n or A.shape != (n, n):
        raise SolverError(f"shape mismatch: a {a.shape}, K {n}x{n}, Laplacians {A.shape}")

    if isinstance(K, KernelEigen):
        B = K.V * np.sqrt(K.Lambda)[None, :]
        Z = B.T @ a
        objective = float(np.trace(Z.T @ (B.T @ A @ B) @ Z))
        gram = Z.T @ Z
    else:
        Ka = _as_matrix(K) @ a
        objective = float(np.trace(Ka.T @ A @ Ka))
        gram = a.T @ Ka
    residual = float(np.max(np.abs(gram - np.eye(a.shape[1]))))
    return objective, residual


def center_kernel_rows(K_rows: np.ndarray, column_means: np.ndarray, grand_mean: float) -> np.ndarray:
    """Centre kernel rows against training statistics; on the training Gram itself this is J K J."""
    return K_rows - column_means[None, :] - K_rows.mean(axis=1)[:, None] + grand_mean


def _project(K_rows: np.ndarray, model: TransformModel) -> np.ndarray:
    K_rows = np.asarray(K_rows, dtype=float)
    if K_rows.ndim != 2 or K_rows.shape[1] != model.n:
        raise SolverError(f"kernel rows have {K_rows.shape[-1]} columns, model expects {model.n}")
    if model.is_centered:
        K_rows = center_kernel_rows(K_rows, model.center_means, model.center_grand_mean)
    return model.a.T @ K_rows.T


def transform_train(K: MatrixLike, model: TransformModel) -> np.ndarray:
    """Learned features of the training samples, a^T K (r x n)."""
    return _project(_as_matrix(K), model)


def transform_test(K_cross: np.ndarray, model: TransformModel) -> np.ndarray:
    """Learned features of new samples from their cross-Gram rows (t x n), a^T K_cross^T (r x t)."""
    return _project(K_cross, model)


def _format_row(values) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def save_model(model: TransformModel, path: str) -> None:
    lines = [
        MODEL_HEADER,
        f"n={model.n}",
        f"r={model.r}",
        f"lambda={format(model.lambda_reg, '.17g')}",
        f"theta={format(model.theta, '.17g')}",
        f"k={model.k}",
        f"kernel={json.dumps(model.kernel.to_dict(), sort_keys=True)}",
        f"method={model.method}",
        f"drop_tolerance={format(model.drop_tolerance, '.17g')}",
        f"eigenvalues_of_M={_format_row(model.eigenvalues_of_M)}",
    ]
    if model.order is not None:
        lines.append(f"order={','.join(str(int(i)) for i in model.order)}")
    if model.is_centered:
        lines.append(f"center_means={_format_row(model.center_means)}")
        lines.append(f"center_grand_mean={format(model.center_grand_mean, '.17g')}")
    lines.append("a")
    lines.extend(_format_row(row) for row in model.a)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Wrote {model.method} model (n={model.n}, r={model.r}) to {path}")


def load_model(path: str) -> TransformModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"Could not read model {path}: {e}") from e
    if not lines or lines[0] != MODEL_HEADER:
        raise DataError(f"{path} is not a {MODEL_HEADER} file")

    fields = {}
    cursor = 1
    while cursor < len(lines) and lines[cursor] != "a":
        key, sep, value = lines[cursor].partition("=")
        if not sep:
            raise DataError(f"{path}:{cursor + 1}: expected key=value, got {lines[cursor]!r}")
        fields[key] = value
        cursor += 1
    missing = [key for key in ("n", "r", "lambda", "theta", "k", "kernel") if key not in fields]
    if missing or cursor == len(lines):
        raise DataError(f"{path}: incomplete model (missing {', '.join(missing) or 'coefficients'})")

    def parse_row(text: str) -> np.ndarray:
        return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)

    try:
        n, r = int(fields["n"]), int(fields["r"])
        a = np.array([parse_row(line) for line in lines[cursor + 1 : cursor + 1 + n]], dtype=float)
        if a.shape != (n, r):
            raise DataError(f"{path}: coefficient block is {a.shape}, header says ({n}, {r})")
        return TransformModel(
            a=a,
            lambda_reg=float(fields["lambda"]),
            theta=float(fields["theta"]),
            k=int(fields["k"]),
            kernel=KernelSpec.from_dict(json.loads(fields["kernel"])),
            eigenvalues_of_M=parse_row(fields.get("eigenvalues_of_M", "")),
            drop_tolerance=float(fields.get("drop_tolerance", DEFAULT_DROP_TOLERANCE)),
            method=fields.get("method", "ours"),
            order=np.array([int(i) for i in fields["order"].split(",")]) if fields.get("order") else None,
            center_means=parse_row(fields["center_means"]) if "center_means" in fields else None,
            center_grand_mean=float(fields["center_grand_mean"]) if "center_grand_mean" in fields else None,
        )
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: malformed model: {e}") from e
