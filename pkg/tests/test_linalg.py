"""Тесты плотных и разреженных численных ядер"""

import numpy as np
import pytest
from scipy import sparse

from src.numerics.errors import NoConvergence, NotPositiveDefinite, ShapeMismatch, SingularFactor
from src.numerics.linalg import SparseSystem, cholesky, conjugate_gradient, solve_triangular, sym_eig


def poisson_system(n_interior: int):
    h = 1.0 / (n_interior + 1)
    diag = sparse.diags([-np.ones(n_interior - 1), 2 * np.ones(n_interior), -np.ones(n_interior - 1)],
                        [-1, 0, 1]).tocoo()
    system = SparseSystem(n_interior, diag.row, diag.col, diag.data / h ** 2, spd=True)
    x = np.linspace(h, 1.0 - h, n_interior)
    return system, x


class TestCholesky:

    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))

    def test_hand_example(self):
        np.testing.assert_allclose(cholesky([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)

    def test_reconstruction(self, rng):
        b = rng.standard_normal((8, 8))
        a = b.T @ b + np.eye(8)
        l = cholesky(a)
        assert np.max(np.abs(l @ l.T - a)) < 1e-10
        np.testing.assert_array_equal(l, np.tril(l))

    def test_jitter_on_singular(self):
        a = np.ones((3, 3))
        l, jitter = cholesky(a, return_jitter=True)
        assert jitter == pytest.approx(1e-6)
        np.testing.assert_allclose(l @ l.T, a + jitter * np.eye(3), atol=1e-10)

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky([[2.0, 0.0], [0.0, -1.0]])

    def test_nonpositive_diagonal_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.zeros((2, 2)))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            cholesky([[1.0, 0.5], [0.0, 1.0]])

    def test_input_not_modified(self, rng):
        b = rng.standard_normal((4, 4))
        a = b @ b.T + np.eye(4)
        saved = a.copy()
        cholesky(a)
        np.testing.assert_array_equal(a, saved)


class TestSolveTriangular:

    def test_identity(self, rng):
        b = rng.standard_normal(5)
        np.testing.assert_array_equal(solve_triangular(np.eye(5), b), b)

    def test_forward_substitution(self):
        np.testing.assert_allclose(solve_triangular([[2.0, 0.0], [1.0, 2.0]], [4.0, 4.0]), [2.0, 1.0])

    def test_residual(self, rng):
        l = np.tril(rng.standard_normal((6, 6))) + 4 * np.eye(6)
        b = rng.standard_normal((6, 3))
        x = solve_triangular(l, b)
        assert np.max(np.abs(l @ x - b)) < 1e-10
        xt = solve_triangular(l, b, transpose_l=True)
        assert np.max(np.abs(l.T @ xt - b)) < 1e-10

    def test_zero_diagonal(self):
        with pytest.raises(SingularFactor):
            solve_triangular([[1.0, 0.0], [1.0, 0.0]], [1.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            solve_triangular(np.eye(3), np.ones(2))


class TestSymEig:

    def test_diagonal(self):
        values, vectors = sym_eig(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(values, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(np.abs(vectors), np.eye(3)[:, [0, 2, 1]])

    def test_two_by_two(self):
        values, vectors = sym_eig([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(values, [3.0, 1.0], atol=1e-14)
        s = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(np.abs(vectors[:, 0]), [s, s], atol=1e-12)
        np.testing.assert_allclose(np.abs(vectors[:, 1]), [s, s], atol=1e-12)
        assert vectors[0, 1] * vectors[1, 1] < 0

    def test_reconstruction(self, rng):
        b = rng.standard_normal((10, 10))
        a = b + b.T
        values, vectors = sym_eig(a)
        assert np.all(np.diff(values) <= 0)
        assert np.max(np.abs(vectors @ np.diag(values) @ vectors.T - a)) < 1e-8
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(10), atol=1e-10)

    def test_matches_lapack(self, rng):
        b = rng.standard_normal((30, 30))
        a = b @ b.T
        values, _ = sym_eig(a)
        np.testing.assert_allclose(values, np.sort(np.linalg.eigvalsh(a))[::-1], rtol=1e-10, atol=1e-10)

    def test_sweep_limit(self, rng):
        b = rng.standard_normal((8, 8))
        with pytest.raises(NoConvergence):
            sym_eig(b + b.T, max_sweeps=1)


class TestConjugateGradient:

    def test_identity_system(self, rng):
        n = 6
        system = SparseSystem(n, np.arange(n), np.arange(n), np.ones(n), spd=True)
        b = rng.standard_normal(n)
        np.testing.assert_allclose(conjugate_gradient(system, b), b, atol=1e-12)

    def test_diagonal_system(self, rng):
        n = 7
        idx = np.arange(n)
        system = SparseSystem(n, idx, idx, idx + 1.0, spd=True)
        b = rng.standard_normal(n)
        np.testing.assert_allclose(conjugate_gradient(system, b), b / (idx + 1.0), atol=1e-9)

    def test_poisson_second_order(self):
        errors = []
        for n in (31, 63):
            system, x = poisson_system(n)
            u = conjugate_gradient(system, np.pi ** 2 * np.sin(np.pi * x))
            errors.append(np.max(np.abs(u - np.sin(np.pi * x))))
        assert errors[1] < 1e-3
        assert errors[0] / errors[1] > 3.5

    def test_zero_rhs(self):
        system, _ = poisson_system(5)
        np.testing.assert_array_equal(conjugate_gradient(system, np.zeros(5)), np.zeros(5))

    def test_iteration_limit(self):
        system, x = poisson_system(63)
        with pytest.raises(NoConvergence) as exc:
            conjugate_gradient(system, np.ones(63), max_iter=1)
        assert exc.value.residual > 1e-3
        assert exc.value.iterations == 1

    def test_requires_spd_flag(self):
        system = SparseSystem(2, [0, 1], [0, 1], [1.0, 1.0])
        with pytest.raises(ValueError):
            conjugate_gradient(system, np.ones(2))

    def test_duplicate_triplets_summed(self):
        system = SparseSystem.from_triplets(2, [(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0)], spd=True)
        assert system.matrix[0, 0] == 3.0
