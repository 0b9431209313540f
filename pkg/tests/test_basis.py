import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphflow.basis import (ModeIndex, basis_field, basis_field_jacobian, basis_from_modes,
                             dirichlet_energy, dirichlet_gram, eigenfunction, enumerate_basis,
                             evaluate_field, field_jacobian, sample_prior)

PI2 = np.pi ** 2


def _legendre_grid(n, dim):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes, weights = 0.5 * (nodes + 1), 0.5 * weights
    grid = np.stack(np.meshgrid(*[nodes] * dim, indexing="ij"), -1).reshape(-1, dim)
    w = weights
    for _ in range(dim - 1):
        w = np.multiply.outer(w, weights)
    return grid, w.ravel()


class TestEnumeration:
    def test_first_triple_in_3d(self):
        basis = enumerate_basis(3, 3)
        assert [m.j for m in basis.modes] == [(1, 1, 1)] * 3
        assert [m.component for m in basis.modes] == [1, 2, 3]
        assert np.allclose(basis.laplace_eigenvalues, -3 * PI2)
        assert basis.laplace_eigenvalues[0] == pytest.approx(-29.6088, abs=1e-4)
        assert basis.kl_weights[0] == pytest.approx(6.206e-3, rel=1e-3)

    def test_first_entry_in_2d(self):
        basis = enumerate_basis(2, 1)
        assert basis.modes == (ModeIndex((1, 1)),)
        assert basis.laplace_eigenvalues[0] == -2 * PI2
        assert basis.kl_weights[0] == pytest.approx(5.066e-2, rel=1e-3)

    def test_twelve_entries(self):
        basis = enumerate_basis(3, 12)
        assert np.allclose(basis.laplace_eigenvalues / PI2, [-3] * 3 + [-6] * 9)
        assert [m.j for m in basis.modes[3::3]] == [(1, 1, 2), (1, 2, 1), (2, 1, 1)]

    @pytest.mark.parametrize("dim,k", [(2, 40), (3, 100), (3, 301)])
    def test_order_matches_brute_force(self, dim, k):
        ncomp = 3 if dim == 3 else 1
        freqs = sorted(itertools.product(range(1, 12), repeat=dim),
                       key=lambda j: (sum(c * c for c in j), j))
        expected = [(j, c) for j in freqs for c in range(1, ncomp + 1)][:k]
        assert [(m.j, m.component) for m in enumerate_basis(dim, k).modes] == expected

    def test_triple_split_by_truncation(self):
        basis = enumerate_basis(3, 4)
        assert basis.modes[3] == ModeIndex((1, 1, 2), 1)

    def test_weights_non_increasing(self):
        lam = enumerate_basis(3, 200).kl_weights
        assert np.all(np.diff(lam) <= 0)

    def test_custom_exponent(self):
        basis = enumerate_basis(3, 5, exponent=2.0)
        assert np.allclose(basis.kl_weights, (-basis.laplace_eigenvalues) ** -2.0)
        assert basis.exponent == 2.0

    def test_small_exponent_warns(self):
        with pytest.warns(UserWarning, match="diverges"):
            enumerate_basis(3, 5, exponent=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            enumerate_basis(3, 5, exponent=1.5)

    @pytest.mark.parametrize("dim,k", [(1, 3), (4, 3), (3, 0)])
    def test_rejects_bad_arguments(self, dim, k):
        with pytest.raises(ValueError):
            enumerate_basis(dim, k)

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            ModeIndex((0, 1, 1), 1)
        with pytest.raises(ValueError):
            ModeIndex((1, 1), 2)
        with pytest.raises(ValueError):
            ModeIndex((1, 1, 1), 4)


class TestEigenfunctions:
    def test_boundary_zero(self):
        assert eigenfunction(ModeIndex((1, 1, 1)), np.array([0, 0.5, 0.5])) == 0.0

    def test_center_value(self):
        assert eigenfunction((1, 1, 1), np.full(3, 0.5)) == pytest.approx(2 ** 1.5, abs=1e-12)

    def test_vectorized_matches_pointwise(self, rng):
        x = rng.uniform(0, 1, (10, 3))
        many = eigenfunction((2, 1, 3), x)
        assert np.allclose(many, [eigenfunction((2, 1, 3), p) for p in x], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("j", [(1, 1), (3, 2), (1, 1, 1), (2, 3, 1)])
    def test_unit_norm_by_quadrature(self, j):
        grid, w = _legendre_grid(32, len(j))
        assert np.sum(w * eigenfunction(j, grid) ** 2) == pytest.approx(1.0, abs=1e-6)


class TestEntries:
    def test_2d_example_value(self):
        v = basis_field(ModeIndex((1, 1)), np.array([0.5, 0.25]))
        assert v == pytest.approx([4.4429, 0.0], abs=1e-4)
        assert v[0] == pytest.approx(2 * np.pi * np.cos(np.pi / 4), abs=1e-14)

    def test_2d_jacobian_example(self):
        jac = basis_field_jacobian(ModeIndex((1, 1)), np.array([0.25, 0.25]))
        assert jac[0, 0] == pytest.approx(PI2, abs=1e-12)

    def test_component_one_has_zero_first_coordinate(self, rng):
        mode = ModeIndex((2, 1, 3), 1)
        for x in rng.uniform(0, 1, (20, 3)):
            assert basis_field(mode, x)[0] == 0.0

    @pytest.mark.parametrize("dim", [2, 3])
    def test_tangential_on_boundary(self, dim, rng):
        basis = enumerate_basis(dim, 60)
        a = rng.standard_normal(basis.K)
        for d in range(dim):
            for side in (0.0, 1.0):
                pts = rng.uniform(0, 1, (50, dim))
                pts[:, d] = side
                assert np.abs(evaluate_field(basis, a, pts)[:, d]).max() < 1e-12

    @pytest.mark.parametrize("dim", [2, 3])
    def test_jacobian_matches_finite_differences(self, dim, rng):
        h = 1e-5
        for mode in enumerate_basis(dim, 30).modes:
            for x in rng.uniform(0, 1, (4, dim)):
                fd = np.column_stack([(basis_field(mode, x + h * e) - basis_field(mode, x - h * e))
                                      / (2 * h) for e in np.eye(dim)])
                jac = basis_field_jacobian(mode, x)
                assert np.abs(jac - fd).max() <= 1e-6 * max(1.0, np.abs(jac).max())
                assert abs(np.trace(jac)) < 1e-12


class TestEvaluation:
    def test_zero_coefficients(self, rng):
        basis = enumerate_basis(3, 20)
        assert np.all(evaluate_field(basis, np.zeros(20), rng.uniform(0, 1, (5, 3))) == 0)

    def test_unit_coefficient_selects_entry(self, rng):
        basis = enumerate_basis(3, 20)
        x = rng.uniform(0, 1, 3)
        e = np.zeros(20)
        e[0] = 1.0
        assert np.allclose(evaluate_field(basis, e, x), basis_field(basis.modes[0], x),
                           rtol=0, atol=1e-14)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_sum_equals_per_entry_evaluation(self, dim, rng):
        basis = enumerate_basis(dim, 50)
        a = rng.standard_normal(50)
        for x in rng.uniform(0, 1, (10, dim)):
            direct = sum(ak * basis_field(m, x) for ak, m in zip(a, basis.modes))
            assert np.abs(evaluate_field(basis, a, x) - direct).max() < 1e-12
            jdirect = sum(ak * basis_field_jacobian(m, x) for ak, m in zip(a, basis.modes))
            assert np.abs(field_jacobian(basis, a, x) - jdirect).max() < 1e-11

    @settings(max_examples=30, deadline=None)
    @given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
    def test_linearity(self, alpha, beta, seed):
        basis = enumerate_basis(3, 15)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 15))
        x = rng.uniform(0, 1, (5, 3))
        lhs = evaluate_field(basis, alpha * a + beta * b, x)
        rhs = alpha * evaluate_field(basis, a, x) + beta * evaluate_field(basis, b, x)
        assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max())

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 16), dim=st.sampled_from([2, 3]))
    def test_divergence_vanishes(self, seed, dim):
        basis = enumerate_basis(dim, 40)
        rng = np.random.default_rng(seed)
        jac = field_jacobian(basis, rng.standard_normal(40), rng.uniform(0, 1, (8, dim)))
        assert np.abs(np.trace(jac, axis1=1, axis2=2)).max() < 1e-11

    def test_coefficient_checks(self):
        basis = enumerate_basis(3, 5)
        with pytest.raises(ValueError):
            evaluate_field(basis, np.zeros(4), np.zeros(3))
        with pytest.raises(ValueError):
            evaluate_field(basis, np.array([np.nan, 0, 0, 0, 0]), np.zeros(3))


class TestPrior:
    def test_deterministic(self):
        basis = enumerate_basis(3, 30)
        assert np.array_equal(sample_prior(basis, 4), sample_prior(basis, 4))
        assert not np.array_equal(sample_prior(basis, 4), sample_prior(basis, 5))

    def test_moments(self):
        basis = enumerate_basis(2, 6)
        samples = np.array([sample_prior(basis, s) for s in range(10_000)])
        assert samples[:, 0].var() == pytest.approx(basis.kl_weights[0], rel=0.05)
        sd = np.sqrt(basis.kl_weights)
        assert np.all(np.abs(samples.mean(axis=0)) <= 3 * sd / 100)


class TestDirichletEnergy:
    def test_zero(self):
        assert dirichlet_energy(enumerate_basis(2, 5), np.zeros(5)) == 0.0

    def test_single_2d_mode(self):
        assert dirichlet_energy(enumerate_basis(2, 1), np.ones(1)) == pytest.approx(389.64, abs=0.01)

    @pytest.mark.parametrize("dim,k,n", [(2, 10, 40), (3, 10, 16), (3, 24, 20)])
    def test_matches_quadrature(self, dim, k, n, rng):
        basis = enumerate_basis(dim, k)
        a = rng.standard_normal(k)
        grid, w = _legendre_grid(n, dim)
        _, jac = basis.field(a, grid, jacobian=True)
        quad = float(np.sum(w * np.sum(jac ** 2, axis=(1, 2))))
        assert dirichlet_energy(basis, a) == pytest.approx(quad, rel=1e-4)

    @pytest.mark.parametrize("dim,k", [(2, 12), (3, 15)])
    def test_gram_matches_quadrature(self, dim, k):
        basis = enumerate_basis(dim, k)
        grid, w = _legendre_grid(24, dim)
        _, djac = basis.values(grid, entry_jacobians=True)
        quad = np.einsum("n,nkij,nlij->kl", w, djac, djac)
        assert np.abs(dirichlet_gram(basis) - quad).max() < 1e-10 * np.abs(quad).max()

    def test_gram_diagonal_in_2d(self):
        basis = enumerate_basis(2, 20)
        gram = dirichlet_gram(basis)
        assert np.allclose(gram, np.diag(basis.laplace_eigenvalues ** 2), rtol=1e-12, atol=1e-9)

    def test_3d_diagonal_entries(self):
        basis = enumerate_basis(3, 30)
        jsq = np.sum(basis.freqs ** 2, axis=1)
        jc = basis.freqs[np.arange(30), [m.component - 1 for m in basis.modes]]
        expected = np.pi ** 4 * jsq * (jsq - jc ** 2)
        assert np.allclose(np.diag(dirichlet_gram(basis)), expected, rtol=1e-12)


def test_basis_from_modes_keeps_order():
    modes = [ModeIndex((2, 1, 1), 3), ModeIndex((1, 1, 1), 1)]
    basis = basis_from_modes(3, modes)
    assert basis.modes == tuple(modes)
    assert basis.entries()[0] == (1, modes[0])
