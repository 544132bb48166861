"""
Acceptance checks at full instance counts: constraint satisfaction, Laplacian assembly, the local
Fisher identity, solver optimality, degeneracies, determinism and the MAP oracle.

The two synthetic trend runs are marked slow; run them with `pytest -m slow`.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from config import RunConfig  # noqa: E402
from datamodel import UNLABELED, make_concentric_rings, scaled_assignment  # noqa: E402
from evaluation import mean_average_precision, run_experiment  # noqa: E402
from graph import (  # noqa: E402
    assemble_clique_laplacian,
    build_supervised_laplacian,
    clique_laplacian_term,
    knn_cliques,
    local_fisher_score_oracle,
    oracle_selection_assembly,
)
from kernels import KernelSpec, gram_matrix, median_heuristic_gamma  # noqa: E402
from solver import eigendecompose_kernel, fit, objective_value  # noqa: E402
from test_evaluation import naive_average_precision  # noqa: E402

# Trend runs drop kernel eigenpairs below this fraction of the largest.
TREND_DROP_TOLERANCE = 1e-4


def random_instance(rng, n, k, c=3):
    """Random samples with a random labeled prefix, and the RBF Gram and both Laplacians built on them."""
    d = int(rng.integers(1, 6))
    X = rng.normal(size=(d, n))
    m = int(rng.integers(0, n + 1))
    labels = np.full(n, UNLABELED)
    labels[:m] = rng.integers(0, c, size=m)
    K = gram_matrix(X, KernelSpec.rbf(median_heuristic_gamma(X)))
    L_w = build_supervised_laplacian(labels, m)
    L = assemble_clique_laplacian(knn_cliques(X, k), X, 1.0)
    return K, L_w, L


class TestConstraintSatisfaction:
    def test_fifty_random_instances(self):
        """Test a^T K a = I to 1e-8 on the rank-truncated Gram for 50 random RBF problems."""
        rng = np.random.default_rng(101)
        for _ in range(50):
            n = int(rng.integers(4, 201))
            K, L_w, L = random_instance(rng, n, k=min(3, n))
            eig = eigendecompose_kernel(K)
            lambda_reg = float(rng.choice([0.0, 1e-2, 1.0, 1e2]))
            model = fit(K, L_w, L, lambda_reg, int(rng.integers(1, min(4, eig.rank) + 1)))
            _, residual = objective_value(model.a, eig, L_w, L, model.lambda_reg)
            assert residual <= 1e-8


class TestLaplacianCorrectness:
    def test_assembly_matches_selection_oracle(self):
        """Test 100 random instances against the literal S_i L_i S_i^T sum; both Laplacians stay PSD."""
        rng = np.random.default_rng(202)
        for _ in range(100):
            n = int(rng.integers(5, 31))
            k = int(rng.choice([1, 2, 3, 5]))
            theta = float(rng.choice([1e-2, 1.0, 1e2]))
            X = rng.normal(size=(int(rng.integers(1, 5)), n))
            cliques = knn_cliques(X, k)
            terms = [clique_laplacian_term(X[:, list(clique)], theta) for clique in cliques.cliques]
            L = assemble_clique_laplacian(cliques, X, theta).L
            assert np.max(np.abs(L - oracle_selection_assembly(cliques, terms, n))) <= 1e-12
            assert np.linalg.eigvalsh(L).min() >= -1e-10

            m = int(rng.integers(0, n + 1))
            labels = np.concatenate([rng.integers(0, 3, size=m), np.full(n - m, UNLABELED)])
            assert np.linalg.eigvalsh(build_supervised_laplacian(labels, m).L_w).min() >= -1e-10


class TestLocalFisherIdentity:
    def test_hundred_random_cliques(self):
        """Test the regularized local score equals theta Tr(G^T L_i G) on 100 random cliques."""
        rng = np.random.default_rng(303)
        for trial in range(100):
            theta = (1e-2, 1.0, 1e2)[trial % 3]
            d, k = int(rng.integers(1, 11)), int(rng.integers(1, 9))
            X_i = rng.normal(size=(d, k))
            G_i = scaled_assignment(rng.integers(0, 3, size=k), 3).G
            score = local_fisher_score_oracle(X_i, G_i, theta)
            via_term = theta * np.trace(G_i.T @ clique_laplacian_term(X_i, theta) @ G_i)
            assert abs(score - via_term) <= 1e-8 * max(abs(score), 1e-6)


class TestSolverOptimality:
    def test_twenty_instances_beat_random_competitors(self):
        """Test the objective equals the sum of the r smallest eigenvalues of M and beats 100 competitors."""
        rng = np.random.default_rng(404)
        for _ in range(20):
            n = int(rng.integers(6, 41))
            K, L_w, L = random_instance(rng, n, k=3)
            eig = eigendecompose_kernel(K)
            r = int(rng.integers(1, min(3, eig.rank) + 1))
            model = fit(K, L_w, L, 1.0, r)
            best, _ = objective_value(model.a, eig, L_w, L, 1.0)
            assert best == pytest.approx(float(np.sum(model.eigenvalues_of_M)), abs=1e-8)
            for _ in range(100):
                Q, _ = np.linalg.qr(rng.normal(size=(eig.rank, r)))
                competitor, _ = objective_value(eig.V @ (Q / np.sqrt(eig.Lambda)[:, None]), eig, L_w, L, 1.0)
                assert best <= competitor + 1e-9 * max(1.0, abs(competitor))


class TestDegeneracies:
    def test_one_label_per_class_zeroes_supervised_laplacian(self):
        """Test a single label in each class gives the all-zero L_w."""
        L_w = build_supervised_laplacian([0, 1, 2, UNLABELED, UNLABELED], 3)
        assert L_w.is_zero
        assert np.array_equal(L_w.L_w, np.zeros((5, 5)))

    def test_single_member_cliques_zero_clique_laplacian(self, rng):
        """Test k = 1 gives the all-zero L."""
        X = rng.normal(size=(3, 12))
        assert np.array_equal(assemble_clique_laplacian(knn_cliques(X, 1), X, 1.0).L, np.zeros((12, 12)))


class TestDeterminism:
    @pytest.mark.parametrize("method", ["ours", "ours_lambda0", "kpca"])
    def test_reports_repeat_exactly(self, method):
        """Test two runs of one config agree on everything but wall time."""
        cfg = RunConfig.from_dict({"generator": {"kind": "rings", "per_class": 20, "seed": 9}, "repeats": 3})
        first = run_experiment(cfg.dataset(), cfg, method).to_dict()
        second = run_experiment(cfg.dataset(), cfg, method).to_dict()
        first.pop("wall_time_seconds")
        second.pop("wall_time_seconds")
        assert first == second


class TestMapOracle:
    def test_thousand_random_instances(self):
        """Test MAP against the naive implementation to 1e-12 on 1000 instances."""
        rng = np.random.default_rng(909)
        for _ in range(1000):
            t, c = int(rng.integers(1, 21)), int(rng.integers(1, 5))
            scores = np.round(rng.normal(size=(t, c)), 1)
            truth = rng.integers(0, c, size=t)
            assert abs(mean_average_precision(scores, truth) - naive_average_precision(scores, truth)) <= 1e-12


@pytest.mark.slow
class TestSyntheticTrends:
    """Trend runs on generated data; deselected by default."""

    def test_local_cliques_help_with_one_label(self):
        """Test the clique term lifts MAP over the lambda = 0 ablation on rings with one label per class."""
        ds = make_concentric_rings(per_class=100, noise=0.1, seed=0)
        base = {
            "generator": {"kind": "rings", "per_class": 100, "noise": 0.1},
            "k": 5,
            "theta": 1,
            "repeats": 5,
            "drop_tolerance": TREND_DROP_TOLERANCE,
        }
        ablation = RunConfig.from_dict({**base, "methods": ["ours_lambda0"]})
        without = run_experiment(ds, ablation, "ours_lambda0").mean_map
        best = max(
            run_experiment(ds, RunConfig.from_dict({**base, "lambda": value}), "ours").mean_map
            for value in (1e-2, 1.0, 1e2)
        )
        assert best - without >= 0.05

    def test_separable_blobs(self):
        """Test every method reaches MAP 0.95 on three separable blobs with 10 labels per class."""
        cfg = RunConfig.from_dict(
            {
                "generator": {"kind": "blobs", "c": 3, "per_class": 50, "spread": 1.0},
                "labels_per_class": 10,
                "drop_tolerance": TREND_DROP_TOLERANCE,
            }
        )
        ds = cfg.dataset()
        scores = {method: run_experiment(ds, cfg, method).mean_map for method in ("ours", "ours_lambda0", "kpca")}
        assert min(scores.values()) >= 0.95
        assert scores["ours"] >= scores["kpca"]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
