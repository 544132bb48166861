"""
Supervised same-class Laplacian and the locally discriminative clique Laplacian.

The clique Laplacian sums one k x k term per sample, each built from the sample's k-nearest-neighbour
clique: L_i = H (Xbar_i^T Xbar_i + theta I)^-1 H with Xbar_i = X_i H the centred local data.
The dense selection-matrix assembly and the explicit Fisher score are kept as test oracles.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from datamodel import UNLABELED
from errors import GraphError

logger = logging.getLogger(__name__)

DEFAULT_THETA = 1.0
DEFAULT_K = 3


@dataclass(frozen=True)
class SupervisedLaplacian:
    W: np.ndarray
    L_w: np.ndarray

    @property
    def is_zero(self) -> bool:
        return not np.any(self.L_w)


@dataclass(frozen=True)
class CliqueSet:
    """cliques[i] = [i, nearest, second nearest, ...], k entries each."""

    k: int
    cliques: Tuple[Tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.cliques)


@dataclass(frozen=True)
class CliqueLaplacian:
    L: np.ndarray
    theta: float
    k: int


@dataclass(frozen=True)
class CenteringMatrix:
    H: np.ndarray

    @property
    def k(self) -> int:
        return self.H.shape[0]


def build_supervised_laplacian(labels: Sequence[int], m: int) -> SupervisedLaplacian:
    """
    L_w = D - W with W_ij = 1 when i, j < m share a class, diagonal included, zero elsewhere.
    With a single labeled sample per class W = D on the labeled block and L_w vanishes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if not 0 <= m <= n:
        raise GraphError(f"labeled count m={m} outside [0, {n}]")
    if np.any(labels[:m] == UNLABELED):
        raise GraphError("the first m samples must all be labeled")

    W = np.zeros((n, n))
    head = labels[:m]
    W[:m, :m] = (head[:, None] == head[None, :]).astype(float)
    D = np.diag(W.sum(axis=1))
    return SupervisedLaplacian(W=W, L_w=D - W)


def knn_cliques(X: np.ndarray, k: int) -> CliqueSet:
    """
    Each sample with its k-1 nearest neighbours by Euclidean distance over all columns of X.
    Neighbours are ordered by (distance, index), so ties go to the smaller index.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    if k < 1:
        raise GraphError(f"clique size must be at least 1, got {k}")
    if k > n:
        raise GraphError(f"clique size k={k} exceeds the number of samples n={n}")

    distances = cdist(X.T, X.T, "sqeuclidean")
    indices = np.arange(n)
    cliques = []
    for i in range(n):
        others = indices[indices != i]
        order = np.lexsort((others, distances[i, others]))
        cliques.append((i,) + tuple(int(j) for j in others[order[: k - 1]]))
    return CliqueSet(k=k, cliques=tuple(cliques))


def centering_matrix(k: int) -> CenteringMatrix:
    if k < 1:
        raise GraphError(f"centering matrix size must be at least 1, got {k}")
    return CenteringMatrix(H=np.eye(k) - np.full((k, k), 1.0 / k))


def clique_laplacian_term(X_i: np.ndarray, theta: float) -> np.ndarray:
    """H (Xbar^T Xbar + theta I)^-1 H for the local data X_i (d x k), via a Cholesky solve."""
    if not theta > 0:
        raise GraphError(f"theta must be positive, got {theta}")
    X_i = np.asarray(X_i, dtype=float)
    if not np.all(np.isfinite(X_i)):
        raise GraphError("clique data contains non-finite values")

    k = X_i.shape[1]
    H = centering_matrix(k).H
    Xbar = X_i @ H
    gram = Xbar.T @ Xbar + theta * np.eye(k)
    try:
        factor = cho_factor(gram)
    except LinAlgError as e:
        # theta > 0 keeps this positive definite; failing here means the input was not finite
        raise GraphError(f"local scatter factorization failed: {e}") from e
    term = H @ cho_solve(factor, H)
    return (term + term.T) / 2


def _clique_terms(cliques: CliqueSet, X: np.ndarray, theta: float, workers: int) -> List[np.ndarray]:
    def build(clique: Tuple[int, ...]) -> np.ndarray:
        return clique_laplacian_term(X[:, list(clique)], theta)

    if workers <= 1:
        return [build(clique) for clique in cliques.cliques]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, cliques.cliques))


def assemble_clique_laplacian(
    cliques: CliqueSet, X: np.ndarray, theta: float, workers: Optional[int] = 1
) -> CliqueLaplacian:
    """
    L = sum_i S_i L_i S_i^T, accumulated in ascending clique order whatever `workers` is,
    so the result is bit-identical across parallelism degrees.
    """
    if not theta > 0:
        raise GraphError(f"theta must be positive, got {theta}")
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    if cliques.n != n:
        raise GraphError(f"{cliques.n} cliques for {n} samples")

    terms = _clique_terms(cliques, X, theta, workers or 1)
    L = np.zeros((n, n))
    for clique, term in zip(cliques.cliques, terms):
        idx = np.asarray(clique, dtype=np.int64)
        L[np.ix_(idx, idx)] += term
    logger.debug(f"Assembled clique Laplacian n={n}, k={cliques.k}, theta={theta}")
    return CliqueLaplacian(L=L, theta=theta, k=cliques.k)


def oracle_selection_assembly(cliques: CliqueSet, terms: Sequence[np.ndarray], n: int) -> np.ndarray:
    """
    Dense reference for assemble_clique_laplacian: materializes every S_i (n x k, S_i[p, q] = 1 when
    sample p is the q-th clique member) and sums S_i L_i S_i^T. Test oracle only.
    """
    if len(terms) != cliques.n:
        raise GraphError(f"{len(terms)} terms for {cliques.n} cliques")
    L = np.zeros((n, n))
    for clique, term in zip(cliques.cliques, terms):
        S = np.zeros((n, len(clique)))
        for q, p in enumerate(clique):
            if not 0 <= p < n:
                raise GraphError(f"clique index {p} outside [0, {n - 1}]")
            S[p, q] = 1.0
        L += S @ term @ S.T
    return L


def local_scatter_matrices(X_i: np.ndarray, G_i: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Total and between-class scatter of a clique after centring: S_t = Xbar Xbar^T,
    S_b = Xbar G G^T Xbar^T. The local mean is zero once the data is centred.
    """
    X_i = np.asarray(X_i, dtype=float)
    Xbar = X_i @ centering_matrix(X_i.shape[1]).H
    XG = Xbar @ np.asarray(G_i, dtype=float)
    return Xbar @ Xbar.T, XG @ XG.T


def regularized_fisher_criterion(X_i: np.ndarray, G_i: np.ndarray, theta: float) -> float:
    """Tr((S_t + theta I)^-1 S_b), the ridge-regularized local Fisher ratio of one clique."""
    if not theta > 0:
        raise GraphError(f"theta must be positive, got {theta}")
    S_t, S_b = local_scatter_matrices(X_i, G_i)
    return float(np.trace(np.linalg.solve(S_t + theta * np.eye(S_t.shape[0]), S_b)))


def local_fisher_score_oracle(X_i: np.ndarray, G_i: np.ndarray, theta: float) -> float:
    """
    Tr(G^T H G - G^T Xbar^T (Xbar Xbar^T + theta I)^-1 Xbar G) with plain dense algebra.
    Equals theta * Tr(G^T L_i G) for L_i from clique_laplacian_term.
    """
    if not theta > 0:
        raise GraphError(f"theta must be positive, got {theta}")
    X_i = np.asarray(X_i, dtype=float)
    G_i = np.asarray(G_i, dtype=float)
    H = centering_matrix(X_i.shape[1]).H
    Xbar = X_i @ H
    inner = np.linalg.inv(Xbar @ Xbar.T + theta * np.eye(X_i.shape[0]))
    return float(np.trace(G_i.T @ H @ G_i) - np.trace(G_i.T @ Xbar.T @ inner @ Xbar @ G_i))


def write_matrix_csv(matrix: np.ndarray, path: str) -> None:
    """Dump a matrix in the data-file format (17 significant digits) for inspection."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in np.atleast_2d(matrix):
            f.write(",".join(format(v, ".17g") for v in row) + "\n")
