"""
Tests for the kernel eigendecomposition, the trace-minimization solver, projection and model files.
"""

import os
import sys
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import subspace_angles
from scipy.stats import ortho_group

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from datamodel import UNLABELED, make_gaussian_blobs  # noqa: E402
from errors import DataError, SolverError  # noqa: E402
from graph import assemble_clique_laplacian, build_supervised_laplacian, knn_cliques  # noqa: E402
from kernels import KernelSpec, gram_matrix, median_heuristic_gamma  # noqa: E402
from solver import (  # noqa: E402
    TransformModel,
    eigendecompose_kernel,
    fit,
    fix_signs,
    load_model,
    objective_value,
    save_model,
    transform_test,
    transform_train,
)


def build_problem(X, labels, m, spec=None, k=3, theta=1.0):
    """Gram, supervised and clique Laplacians for samples X whose first m are labeled."""
    spec = spec or KernelSpec.rbf(median_heuristic_gamma(X))
    K = gram_matrix(X, spec)
    L_w = build_supervised_laplacian(labels, m)
    L = assemble_clique_laplacian(knn_cliques(X, k), X, theta)
    return K, L_w, L


def random_problem(rng, n=20, d=3, c=2, m=6, spec=None):
    X = rng.normal(size=(d, n))
    labels = np.full(n, UNLABELED)
    labels[:m] = np.arange(m) % c
    return build_problem(X, labels, m, spec)


def random_competitor(rng, eig, r):
    """A random a with a^T K a = I in the rank-truncated sense."""
    Q, _ = np.linalg.qr(rng.normal(size=(eig.rank, r)))
    return eig.V @ (Q / np.sqrt(eig.Lambda)[:, None])


class TestEigendecomposeKernel:
    """Test the kept eigenpairs of K."""

    def test_identity(self):
        """Test K = I_3 keeps all three unit eigenvalues with an orthonormal basis."""
        eig = eigendecompose_kernel(np.eye(3))
        assert eig.rank == 3
        assert np.allclose(eig.Lambda, 1.0, rtol=0, atol=1e-15)
        assert np.allclose(eig.V.T @ eig.V, np.eye(3), rtol=0, atol=1e-12)

    def test_rank_one(self):
        """Test K = [[1,1],[1,1]] has rank 1, eigenvalue 2 and eigenvector [1,1]/sqrt(2)."""
        eig = eigendecompose_kernel(np.ones((2, 2)))
        assert eig.rank == 1
        assert eig.Lambda[0] == pytest.approx(2.0, rel=1e-15)
        assert np.allclose(eig.V[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], rtol=0, atol=1e-15)

    def test_reconstruction(self, rng):
        """Test V Lambda V^T reproduces a random full-rank PSD K to 1e-9."""
        B = rng.normal(size=(20, 30))
        K = B @ B.T
        eig = eigendecompose_kernel(K)
        assert eig.rank == 20
        assert np.all(np.diff(eig.Lambda) <= 0)
        assert np.max(np.abs(eig.reconstruct() - K)) <= 1e-9

    def test_drops_null_space(self, rng):
        """Test a rank-2 linear kernel keeps two eigenpairs."""
        X = rng.normal(size=(2, 10))
        eig = eigendecompose_kernel(gram_matrix(X, KernelSpec.linear()))
        assert eig.rank == 2
        assert np.allclose(eig.V.T @ eig.V, np.eye(2), rtol=0, atol=1e-10)

    def test_zero_kernel(self):
        """Test an all-zero kernel has no positive eigenvalue."""
        with pytest.raises(SolverError):
            eigendecompose_kernel(np.zeros((3, 3)))

    def test_sign_convention(self, rng):
        """Test each column's largest-magnitude entry is positive."""
        eig = eigendecompose_kernel(gram_matrix(rng.normal(size=(3, 15)), KernelSpec.rbf(0.5)))
        pivots = np.argmax(np.abs(eig.V), axis=0)
        assert np.all(eig.V[pivots, np.arange(eig.rank)] > 0)

    def test_fix_signs_ties_use_lower_index(self):
        """Test a tie in magnitude makes the lower-index entry positive."""
        assert fix_signs(np.array([[-0.5], [0.5]])).tolist() == [[0.5], [-0.5]]


class TestFit:
    """Test the reduced eigenproblem solution."""

    def test_degenerate_objective(self):
        """Test lambda = 0 with one label per class returns a K-orthonormal a and objective 0."""
        ds = make_gaussian_blobs(c=2, per_class=4, d=2, spread=1.0, seed=2)
        labels = np.full(8, UNLABELED)
        labels[[0, 4]] = [0, 1]
        order = np.concatenate([[0, 4], [1, 2, 3, 5, 6, 7]])
        K, L_w, L = build_problem(ds.samples[:, order], labels[order], 2)
        assert L_w.is_zero
        model = fit(K, L_w, L, 0.0, 2)
        objective, residual = objective_value(model.a, eigendecompose_kernel(K), L_w, L, 0.0)
        assert objective == 0.0
        assert residual <= 1e-8

    def test_objective_is_sum_of_smallest_eigenvalues(self, rng):
        """Test the attained objective equals the sum of the r smallest eigenvalues of M."""
        K, L_w, L = random_problem(rng)
        model = fit(K, L_w, L, 1.0, 3)
        objective, residual = objective_value(model.a, eigendecompose_kernel(K), L_w, L, 1.0)
        assert np.all(np.diff(model.eigenvalues_of_M) >= 0)
        assert objective == pytest.approx(float(np.sum(model.eigenvalues_of_M)), abs=1e-8)
        assert residual <= 1e-8

    def test_beats_random_competitors(self):
        """Test n=6 blobs with 3 labels per class: no random K-orthonormal a does better."""
        rng = np.random.default_rng(5)
        ds = make_gaussian_blobs(c=2, per_class=3, d=2, spread=1.0, seed=6)
        K, L_w, L = build_problem(ds.samples, ds.labels, 6)
        eig = eigendecompose_kernel(K)
        model = fit(K, L_w, L, 1.0, 1)
        best, _ = objective_value(model.a, eig, L_w, L, 1.0)
        for _ in range(100):
            competitor, _ = objective_value(random_competitor(rng, eig, 1), eig, L_w, L, 1.0)
            assert best <= competitor + 1e-10

    def test_r_above_rank(self, rng):
        """Test r beyond the kernel rank names the maximum feasible r."""
        X = rng.normal(size=(2, 8))
        labels = np.array([0, 1] + [UNLABELED] * 6)
        K, L_w, L = build_problem(X, labels, 2, spec=KernelSpec.linear())
        with pytest.raises(SolverError, match="maximum feasible r is 2"):
            fit(K, L_w, L, 1.0, 3)

    def test_non_finite_rejected(self, rng):
        """Test a NaN in a Laplacian is an error."""
        K, L_w, L = random_problem(rng, n=8)
        bad = L.L.copy()
        bad[0, 0] = np.nan
        with pytest.raises(SolverError):
            fit(K, L_w, bad, 1.0, 1)

    def test_negative_lambda_rejected(self, rng):
        """Test lambda < 0 is an error."""
        K, L_w, L = random_problem(rng, n=8)
        with pytest.raises(SolverError):
            fit(K, L_w, L, -1.0, 1)

    def test_records_parameters(self, rng):
        """Test the model carries theta, k and the kernel spec of its inputs."""
        K, L_w, L = random_problem(rng, n=10)
        model = fit(K, L_w, L, 0.5, 2)
        assert (model.r, model.n, model.lambda_reg, model.theta, model.k) == (2, 10, 0.5, 1.0, 3)
        assert model.kernel == K.spec

    def test_monotone_nesting(self, rng):
        """Test the r-dimensional model is the leading block of the (r+1)-dimensional one."""
        K, L_w, L = random_problem(rng, n=15)
        small, large = fit(K, L_w, L, 1.0, 2), fit(K, L_w, L, 1.0, 3)
        scale = np.max(np.abs(large.a))
        assert np.allclose(small.a, large.a[:, :2], rtol=0, atol=1e-12 * scale)
        assert np.array_equal(small.eigenvalues_of_M, large.eigenvalues_of_M[:2])

    def test_scale_coupling(self, rng):
        """Test doubling both Laplacians keeps the learned subspace and doubles the objective."""
        K, L_w, L = random_problem(rng, n=15, spec=KernelSpec.rbf(0.5))
        base = fit(K, L_w, L, 0.7, 2, drop_tolerance=1e-6)
        scaled = fit(K, 2 * L_w.L_w, 2 * L.L, 0.7, 2, drop_tolerance=1e-6)
        assert np.max(subspace_angles(base.a, scaled.a)) <= 1e-6
        assert np.allclose(scaled.eigenvalues_of_M, 2 * base.eigenvalues_of_M, rtol=1e-9, atol=1e-12)


class TestObjectiveValue:
    def test_zero_coefficients(self, rng):
        """Test a = 0 gives objective 0 and residual 1."""
        K, L_w, L = random_problem(rng, n=6)
        assert objective_value(np.zeros((6, 2)), K, L_w, L, 1.0) == (0.0, 1.0)

    def test_lambda_zero_matches_dense(self, rng):
        """Test lambda = 0 reduces to Tr(a^T K L_w K a)."""
        K, L_w, L = random_problem(rng, n=9)
        a = rng.normal(size=(9, 2))
        objective, _ = objective_value(a, K, L_w, L, 0.0)
        Ka = K.values @ a
        assert objective == pytest.approx(np.trace(Ka.T @ L_w.L_w @ Ka), rel=1e-12)

    def test_orthogonal_invariance(self, rng):
        """Test right-multiplying a by an orthogonal Q leaves the objective unchanged."""
        K, L_w, L = random_problem(rng, n=10)
        a = rng.normal(size=(10, 3))
        Q = ortho_group.rvs(3, random_state=7)
        before, _ = objective_value(a, K, L_w, L, 1.0)
        after, _ = objective_value(a @ Q, K, L_w, L, 1.0)
        assert after == pytest.approx(before, rel=1e-9, abs=1e-9)

    def test_shape_mismatch(self, rng):
        """Test a with the wrong row count is an error."""
        K, L_w, L = random_problem(rng, n=6)
        with pytest.raises(SolverError):
            objective_value(np.zeros((5, 1)), K, L_w, L, 1.0)


def linear_model(rng, n=10, r=2):
    """A model on a well-conditioned linear kernel, for projection checks."""
    X = rng.normal(size=(3, n))
    labels = np.array([0, 0, 1, 1] + [UNLABELED] * (n - 4))
    K, L_w, L = build_problem(X, labels, 4, spec=KernelSpec.linear())
    return K, fit(K, L_w, L, 1.0, r)


def bare_model(a, **kwargs):
    return TransformModel(
        a=np.asarray(a, dtype=float),
        lambda_reg=1.0,
        theta=1.0,
        k=3,
        kernel=KernelSpec.linear(),
        eigenvalues_of_M=np.zeros(np.asarray(a).shape[1]),
        **kwargs,
    )


class TestTransform:
    """Test projection of training and new samples."""

    def test_identity_kernel(self):
        """Test K = I gives features a^T."""
        model = bare_model([[1.0], [0.0], [0.0]])
        assert transform_train(np.eye(3), model).tolist() == [[1.0, 0.0, 0.0]]

    def test_feature_gram_is_psd(self, rng):
        """Test a^T K K a is symmetric PSD."""
        K, model = linear_model(rng)
        F = transform_train(K, model)
        gram = F @ F.T
        assert np.allclose(gram, gram.T)
        assert np.linalg.eigvalsh(gram).min() >= -1e-10

    def test_matches_loop(self, rng):
        """Test features against sum_i a[i, l] K[i, j] computed by loops."""
        K, model = linear_model(rng)
        F = transform_train(K, model)
        for l in range(model.r):
            for j in range(model.n):
                expected = sum(model.a[i, l] * K.values[i, j] for i in range(model.n))
                assert F[l, j] == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_training_gram_as_cross_gram(self, rng):
        """Test transform_test on the training Gram equals transform_train exactly."""
        K, model = linear_model(rng)
        assert np.array_equal(transform_test(K.values, model), transform_train(K, model))

    def test_duplicate_training_sample(self, rng):
        """Test a single duplicated training sample projects like its training column."""
        K, model = linear_model(rng)
        column = transform_test(K.values[3:4], model)
        assert np.allclose(column[:, 0], transform_train(K, model)[:, 3], rtol=0, atol=1e-12)

    def test_new_samples_match_loop(self, rng):
        """Test new-sample features against the per-sample kernel expansion."""
        K, model = linear_model(rng)
        K_cross = rng.normal(size=(4, model.n))
        F = transform_test(K_cross, model)
        for l in range(model.r):
            for j in range(4):
                expected = sum(model.a[i, l] * K_cross[j, i] for i in range(model.n))
                assert F[l, j] == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_wrong_column_count(self, rng):
        """Test a cross Gram with the wrong width is an error."""
        _, model = linear_model(rng)
        with pytest.raises(SolverError):
            transform_test(np.zeros((2, model.n + 1)), model)


class TestModelFile:
    """Test the text model format."""

    def test_round_trip(self, rng, tmp_path):
        """Test every field survives save/load exactly."""
        K, L_w, L = random_problem(rng, n=12)
        model = fit(K, L_w, L, 0.3, 2)
        model = replace(model, order=np.arange(12)[::-1])
        path = str(tmp_path / "model.txt")
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(loaded.a, model.a)
        assert np.array_equal(loaded.eigenvalues_of_M, model.eigenvalues_of_M)
        assert np.array_equal(loaded.order, model.order)
        assert (loaded.lambda_reg, loaded.theta, loaded.k, loaded.kernel) == (0.3, 1.0, 3, model.kernel)
        assert loaded.method == "ours" and not loaded.is_centered

    def test_header_and_layout(self, tmp_path):
        """Test the file starts with the format header and ends with a in row-major CSV."""
        path = tmp_path / "model.txt"
        save_model(bare_model([[0.1, 0.2], [0.3, 0.4]]), str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "locdisc-model v1"
        assert lines[1:3] == ["n=2", "r=2"]
        assert lines[-3:] == [
            "a",
            "0.10000000000000001,0.20000000000000001",
            "0.29999999999999999,0.40000000000000002",
        ]

    def test_centering_round_trip(self, tmp_path):
        """Test kernel PCA centring statistics survive save/load."""
        model = bare_model([[1.0], [2.0]], method="kpca", center_means=np.array([0.5, 0.25]), center_grand_mean=0.375)
        path = str(tmp_path / "kpca.txt")
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.is_centered
        assert loaded.center_means.tolist() == [0.5, 0.25]
        assert loaded.center_grand_mean == 0.375

    def test_bad_header(self, write_file):
        """Test a file without the header is refused."""
        with pytest.raises(DataError):
            load_model(write_file("m.txt", "not a model\n"))

    def test_truncated_coefficients(self, write_file):
        """Test a coefficient block shorter than n rows is refused."""
        text = 'locdisc-model v1\nn=2\nr=1\nlambda=1\ntheta=1\nk=3\nkernel={"kind": "linear"}\na\n1\n'
        with pytest.raises(DataError):
            load_model(write_file("m.txt", text))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
