"""
Downstream evaluation: ridge one-vs-rest classifier, macro Mean Average Precision,
the KPCA baseline and the repeated-split experiment runner.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from config import METHODS, RunConfig
from datamodel import (
    Dataset,
    apply_split,
    reorder_labeled_first,
    sample_labels_per_class,
    stratified_split,
)
from errors import ConfigError, DataError, EvaluationError, ExperimentError, SolverError, pipeline_stage
from graph import (
    CliqueLaplacian,
    SupervisedLaplacian,
    assemble_clique_laplacian,
    build_supervised_laplacian,
    knn_cliques,
)
from kernels import (
    GramMatrix,
    KernelSpec,
    cross_gram,
    gram_matrix,
    kernel_block_by_index,
    load_precomputed_kernel,
    resolve_kernel,
)
from solver import (
    DEFAULT_DROP_TOLERANCE,
    TransformModel,
    center_kernel_rows,
    eigendecompose_kernel,
    fit,
    transform_test,
    transform_train,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray
    bias: np.ndarray
    ridge: float

    @property
    def class_count(self) -> int:
        return self.bias.shape[0]


def fit_linear_classifier(F: np.ndarray, labels: np.ndarray, c: int, ridge: float) -> LinearClassifier:
    """
    One-vs-rest ridge regression on +1/-1 targets. The features get a constant row appended,
    so the bias is shrunk together with the weights: (F~ F~^T + ridge I) W = F~ Z.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not ridge > 0:
        raise EvaluationError(f"ridge must be positive, got {ridge}")
    if F.shape[1] < 1:
        raise EvaluationError("classifier needs at least one labeled sample")
    if F.shape[1] != labels.shape[0]:
        raise EvaluationError(f"{F.shape[1]} feature columns but {labels.shape[0]} labels")
    if not np.all(np.isfinite(F)):
        raise EvaluationError("classifier features contain non-finite values")
    if np.any((labels < 0) | (labels >= c)):
        raise EvaluationError(f"classifier labels must lie in [0, {c - 1}]")

    m = F.shape[1]
    F_aug = np.vstack([F, np.ones((1, m))])
    Z = -np.ones((m, c))
    Z[np.arange(m), labels] = 1.0
    system = F_aug @ F_aug.T + ridge * np.eye(F_aug.shape[0])
    try:
        W = cho_solve(cho_factor(system), F_aug @ Z)
    except LinAlgError as e:
        raise EvaluationError(f"classifier normal equations are singular: {e}") from e
    return LinearClassifier(weights=W[:-1], bias=W[-1], ridge=float(ridge))


def decision_scores(clf: LinearClassifier, F: np.ndarray) -> np.ndarray:
    """t x c matrix of w_t^T f_j + bias_t."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[0] != clf.weights.shape[0]:
        raise EvaluationError(f"features have {F.shape[0]} rows, classifier expects {clf.weights.shape[0]}")
    return F.T @ clf.weights + clf.bias[None, :]


def mean_average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """
    Macro MAP: per class, rank samples by score descending (lower index first on ties) and average
    the precision at every relevant rank; then average over classes present in `truth`.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    t = truth.shape[0]
    if t == 0:
        raise EvaluationError("mean average precision of an empty test set")
    if scores.shape[0] != t:
        raise EvaluationError(f"{scores.shape[0]} score rows for {t} samples")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores contain non-finite values")

    ranks = np.arange(1, t + 1)
    precisions = []
    for cls in range(scores.shape[1]):
        relevant = truth == cls
        total = int(np.count_nonzero(relevant))
        if total == 0:
            logger.warning(f"Class {cls} has no test samples; excluded from MAP")
            continue
        order = np.argsort(-scores[:, cls], kind="stable")
        hits = relevant[order]
        precision_at_hits = (np.cumsum(hits) / ranks)[hits]
        precisions.append(float(precision_at_hits.sum()) / total)
    if not precisions:
        raise EvaluationError("no class has a test sample")
    return float(np.mean(precisions))


def kpca_baseline(K: GramMatrix, r: int, drop_tolerance: float = DEFAULT_DROP_TOLERANCE) -> TransformModel:
    """
    Kernel PCA: top-r eigenvectors of the double-centred Gram, each divided by sqrt(eigenvalue)
    so every principal axis has unit norm in feature space. The model keeps the centring statistics.
    """
    values = K.values if isinstance(K, GramMatrix) else np.asarray(K, dtype=float)
    column_means = values.mean(axis=0)
    grand_mean = float(values.mean())
    centered = center_kernel_rows(values, column_means, grand_mean)
    centered = (centered + centered.T) / 2
    try:
        eig = eigendecompose_kernel(centered, drop_tolerance)
    except SolverError as e:
        raise SolverError(f"centered kernel has rank 0, cannot extract r={r} components ({e})") from e
    if r > eig.rank:
        raise SolverError(f"centered kernel has rank {eig.rank} < r={r}")

    return TransformModel(
        a=eig.V[:, :r] / np.sqrt(eig.Lambda[:r])[None, :],
        lambda_reg=0.0,
        theta=0.0,
        k=0,
        kernel=K.spec if isinstance(K, GramMatrix) else KernelSpec.linear(),
        eigenvalues_of_M=eig.Lambda[:r].copy(),
        drop_tolerance=drop_tolerance,
        method="kpca",
        center_means=column_means,
        center_grand_mean=grand_mean,
    )


@dataclass
class ExperimentReport:
    method: str
    labels_per_class: int
    dataset_id: str
    params: Dict[str, Any]
    seeds: List[int]
    per_repeat_map: List[float]
    kernels: List[Dict[str, Any]] = field(default_factory=list)
    wall_time_seconds: float = 0.0

    @property
    def mean_map(self) -> float:
        return float(np.mean(self.per_repeat_map))

    @property
    def std_map(self) -> float:
        # population std: one repeat gives 0
        return float(np.std(self.per_repeat_map))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "labels_per_class": self.labels_per_class,
            "dataset_id": self.dataset_id,
            "params": self.params,
            "seeds": list(self.seeds),
            "kernels": list(self.kernels),
            "per_repeat_map": list(self.per_repeat_map),
            "mean_map": self.mean_map,
            "std_map": self.std_map,
            "wall_time_seconds": self.wall_time_seconds,
        }


@dataclass(frozen=True)
class RepeatData:
    """One repeat's training set (labeled samples first) with global indices of train and test samples."""

    train: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray


@pipeline_stage("split")
def split_repeat(ds: Dataset, p: int, test_fraction: float, seed: int) -> RepeatData:
    train_indices, test_indices = stratified_split(ds.labels, test_fraction, seed)
    if test_indices.size == 0:
        raise DataError(f"test_fraction {test_fraction} leaves no test samples")
    train = ds.subset(train_indices)
    split = sample_labels_per_class(train, p, seed)
    train, permutation = reorder_labeled_first(apply_split(train, split))
    return RepeatData(train=train, train_indices=train_indices[permutation], test_indices=test_indices)


@pipeline_stage("kernel")
def repeat_kernels(
    ds: Dataset, data: RepeatData, spec: KernelSpec, full_kernel: Optional[np.ndarray] = None
) -> Tuple[GramMatrix, np.ndarray]:
    """Training Gram and test-vs-train cross Gram; the kernel never sees test samples when it is fit."""
    if spec.kind == "precomputed":
        K = kernel_block_by_index(full_kernel, data.train_indices, data.train_indices)
        K_cross = kernel_block_by_index(full_kernel, data.test_indices, data.train_indices)
        return GramMatrix(values=K, spec=spec), K_cross
    spec = resolve_kernel(spec, data.train.samples)
    X_train = data.train.samples
    return gram_matrix(X_train, spec), cross_gram(ds.samples[:, data.test_indices], X_train, spec)


@pipeline_stage("graph")
def repeat_laplacians(
    train: Dataset, theta: float, k: int, workers: int = 1
) -> Tuple[SupervisedLaplacian, CliqueLaplacian]:
    L_w = build_supervised_laplacian(train.labels, train.m)
    L = assemble_clique_laplacian(knn_cliques(train.samples, k), train.samples, theta, workers)
    return L_w, L


@pipeline_stage("fit")
def fit_method(
    method: str,
    K: GramMatrix,
    laplacians: Optional[Tuple[SupervisedLaplacian, CliqueLaplacian]],
    lambda_reg: float,
    r: int,
    drop_tolerance: float,
) -> TransformModel:
    """Fit `method`: the full objective, its lambda = 0 ablation, or the KPCA baseline."""
    if method == "kpca":
        return kpca_baseline(K, r, drop_tolerance)
    L_w, L = laplacians
    model = fit(K, L_w, L, 0.0 if method == "ours_lambda0" else lambda_reg, r, drop_tolerance)
    return replace(model, method=method)


@pipeline_stage("evaluate")
def score_repeat(
    model: TransformModel, K: GramMatrix, K_cross: np.ndarray, train: Dataset, test_truth: np.ndarray, ridge: float
) -> float:
    features = transform_train(K, model)
    clf = fit_linear_classifier(features[:, : train.m], train.labels[: train.m], train.class_count, ridge)
    return mean_average_precision(decision_scores(clf, transform_test(K_cross, model)), test_truth)


def _check_train_sized(n_train: int, **matrices: np.ndarray) -> None:
    for name, matrix in matrices.items():
        if matrix.shape[0] != n_train:
            raise EvaluationError(f"{name} has {matrix.shape[0]} rows, expected the {n_train} training samples")


def run_repeat(
    ds: Dataset, cfg: RunConfig, method: str, p: int, seed: int, full_kernel: Optional[np.ndarray] = None
) -> Tuple[float, KernelSpec]:
    data = split_repeat(ds, p, cfg.test_fraction, seed)
    train = data.train
    K, K_cross = repeat_kernels(ds, data, cfg.kernel, full_kernel)
    laplacians = None if method == "kpca" else repeat_laplacians(train, cfg.theta, cfg.k, cfg.workers)
    r = cfg.r if cfg.r is not None else ds.class_count
    model = fit_method(method, K, laplacians, cfg.lambda_reg, r, cfg.drop_tolerance)

    _check_train_sized(train.n, K=K.values, a=model.a)
    if laplacians is not None:
        _check_train_sized(train.n, L_w=laplacians[0].L_w, L=laplacians[1].L)
    if K_cross.shape != (data.test_indices.size, train.n):
        raise EvaluationError(f"cross Gram is {K_cross.shape}, expected ({data.test_indices.size}, {train.n})")
    logger.debug(f"seed {seed}: train n={train.n} (m={train.m}), test t={data.test_indices.size}, r={model.r}")

    score = score_repeat(model, K, K_cross, train, ds.labels[data.test_indices], cfg.ridge)
    return score, K.spec


def run_experiment(
    ds: Dataset,
    cfg: RunConfig,
    method: str,
    repeats: Optional[int] = None,
    base_seed: Optional[int] = None,
    labels_per_class: Optional[int] = None,
) -> ExperimentReport:
    """
    Repeat split -> label sampling -> kernel/graphs on train only -> fit -> classify -> MAP,
    with seed base_seed + i for repeat i. The first failing repeat aborts the experiment.
    """
    if method not in METHODS:
        raise ConfigError([f"unknown method {method!r}; expected one of {', '.join(METHODS)}"])
    if not ds.fully_labeled:
        raise DataError("run_experiment needs the ground-truth label of every sample")
    repeats = cfg.repeats if repeats is None else repeats
    base_seed = cfg.base_seed if base_seed is None else base_seed
    p = cfg.labels_per_class[0] if labels_per_class is None else labels_per_class

    full_kernel = None
    if cfg.kernel.kind == "precomputed":
        full_kernel = load_precomputed_kernel(cfg.kernel.path)
        if full_kernel.shape[0] != ds.n:
            raise DataError(f"precomputed kernel covers {full_kernel.shape[0]} samples, dataset has {ds.n}")

    start = time.perf_counter()
    seeds: List[int] = []
    scores: List[float] = []
    kernels: List[Dict[str, Any]] = []
    for i in range(repeats):
        seed = base_seed + i
        try:
            score, spec = run_repeat(ds, cfg, method, p, seed, full_kernel)
        except Exception as e:
            raise ExperimentError(i, seed, e, method) from e
        logger.info(f"{method} p={p} repeat {i} (seed {seed}): MAP {score:.4f}")
        seeds.append(seed)
        scores.append(score)
        kernels.append(spec.to_dict())

    report = ExperimentReport(
        method=method,
        labels_per_class=p,
        dataset_id=cfg.source_id,
        params=cfg.to_dict(),
        seeds=seeds,
        per_repeat_map=scores,
        kernels=kernels,
        wall_time_seconds=time.perf_counter() - start,
    )
    logger.info(f"{method} p={p}: MAP {report.mean_map:.4f} ± {report.std_map:.4f} over {repeats} repeats")
    return report

