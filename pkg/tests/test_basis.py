import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbfsolver.basis import (
    MAX_NODES,
    NodeSet,
    SingularKernelError,
    build_kernel_system,
    evaluate_interpolant,
    gaussian_basis,
    lagrange_basis,
    solve_interpolation_weights,
)


def grid_nodes(p, h=0.1, start=0.0):
    return NodeSet(start - h * np.arange(p), h)


def random_nodes(draw_gaps, start=0.0):
    return NodeSet(start - np.concatenate([[0.0], np.cumsum(draw_gaps)]), float(np.mean(draw_gaps)))


# node sets: strictly decreasing, gaps bounded away from zero
gaps = st.lists(st.floats(0.02, 0.5), min_size=1, max_size=5)


class TestNodeSet:
    def test_valid(self):
        ns = grid_nodes(3)
        assert ns.p == 3 and len(ns) == 3
        assert ns.width_scale == 0.1

    @pytest.mark.parametrize("nodes", [[0.0, 0.0], [-0.1, 0.0], [0.0, -0.2, -0.1], [], [0.0, math.nan]])
    def test_rejects_bad_layout(self, nodes):
        with pytest.raises(ValueError):
            NodeSet(nodes, 0.1)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            NodeSet([0.0], 0.0)

    def test_cap(self):
        NodeSet(-np.arange(MAX_NODES, dtype=float), 1.0)
        with pytest.raises(ValueError):
            NodeSet(-np.arange(MAX_NODES + 1, dtype=float), 1.0)

    def test_immutable(self):
        ns = grid_nodes(2)
        with pytest.raises(ValueError):
            ns.nodes[0] = 1.0


class TestGaussianBasis:
    def test_peak(self):
        assert gaussian_basis(0.3, 0.3, 2.0, 0.1) == 1.0

    def test_unit_distance(self):
        assert gaussian_basis(0.3 + 0.2, 0.3, 2.0, 0.1) == pytest.approx(math.exp(-1), rel=1e-14)

    def test_plug_in(self):
        assert gaussian_basis(0.05, -0.1, 1.0, 0.1) == pytest.approx(math.exp(-2.25), rel=1e-14)

    @pytest.mark.parametrize("gamma,h", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0), (1.0, -0.1)])
    def test_rejects(self, gamma, h):
        with pytest.raises(ValueError):
            gaussian_basis(0.0, 0.0, gamma, h)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 10), st.floats(0.01, 2))
    def test_range(self, lam, center, gamma, h):
        v = gaussian_basis(lam, center, gamma, h)
        assert 0.0 <= v <= 1.0
        # below ~1e-8 standardized distance the value rounds to 1
        if abs(lam - center) > 1e-7 * gamma * h:
            assert v < 1.0

    def test_vectorized(self):
        out = gaussian_basis(np.array([0.0, 0.1]), 0.0, 1.0, 0.1)
        np.testing.assert_allclose(out, [1.0, math.exp(-1)])


class TestKernelSystem:
    def test_single_node(self):
        sys_ = build_kernel_system(grid_nodes(1), 1.0)
        np.testing.assert_array_equal(sys_.phi, [[1.0, 1.0], [1.0, 0.0]])

    def test_two_nodes_unit_distance(self):
        sys_ = build_kernel_system(grid_nodes(2), 1.0)
        assert sys_.phi[0, 1] == pytest.approx(math.exp(-1), rel=1e-15)
        assert sys_.phi[1, 0] == pytest.approx(math.exp(-1), rel=1e-15)

    def test_entrywise(self):
        ns = grid_nodes(3)
        sys_ = build_kernel_system(ns, 0.5)
        lam = [0.0, -0.1, -0.2]
        for j in range(3):
            for k in range(3):
                assert sys_.phi[j, k] == pytest.approx(math.exp(-((lam[j] - lam[k]) / 0.05) ** 2), rel=1e-14)
        np.testing.assert_array_equal(sys_.phi[3], [1, 1, 1, 0])
        np.testing.assert_array_equal(sys_.phi[:, 3], [1, 1, 1, 0])

    def test_without_constant(self):
        sys_ = build_kernel_system(grid_nodes(3), 0.5, include_constant=False)
        assert sys_.phi.shape == (3, 3)

    @settings(max_examples=50, deadline=None)
    @given(gaps, st.floats(-2, 2))
    def test_structure(self, g, log_gamma):
        ns = random_nodes(g)
        try:
            sys_ = build_kernel_system(ns, math.exp(log_gamma))
        except SingularKernelError:
            return
        p = ns.p
        block = sys_.phi[:p, :p]
        np.testing.assert_array_equal(block, block.T)
        np.testing.assert_array_equal(np.diag(block), np.ones(p))
        assert sys_.phi[p, p] == 0.0
        assert sys_.condition >= 1.0

    def test_singular_carries_condition(self):
        with pytest.raises(SingularKernelError) as err:
            build_kernel_system(grid_nodes(6), 1e4)
        assert err.value.condition > 1e14
        assert isinstance(err.value, np.linalg.LinAlgError)

    def test_rejects_gamma(self):
        with pytest.raises(ValueError):
            build_kernel_system(grid_nodes(2), 0.0)

    def test_condition_grows_with_gamma(self):
        # diagnostic trend, checked over a coarse sweep where it is clean
        conds = [build_kernel_system(grid_nodes(4), g).condition for g in np.exp(np.linspace(-1, 3, 9))]
        assert all(b >= a for a, b in zip(conds, conds[1:]))


class TestInterpolation:
    def test_constant_data(self):
        sys_ = build_kernel_system(grid_nodes(3), 0.7)
        interp = solve_interpolation_weights(sys_, np.full(3, 2.5))
        np.testing.assert_allclose(interp.weights, 0.0, atol=1e-14)
        assert interp.constant == pytest.approx(2.5, rel=1e-14)
        np.testing.assert_allclose(evaluate_interpolant(interp, np.linspace(-1, 1, 7)), 2.5, rtol=1e-13)

    def test_single_node(self):
        interp = solve_interpolation_weights(build_kernel_system(grid_nodes(1), 1.0), [3.0])
        assert interp.weights[0] == 0.0
        assert interp.constant == 3.0

    def test_residual(self, rng):
        sys_ = build_kernel_system(grid_nodes(3), 0.8)
        X = rng.normal(size=(3, 2))
        interp = solve_interpolation_weights(sys_, X)
        W = np.vstack([interp.weights, interp.constant])
        rhs = np.vstack([X, np.zeros((1, 2))])
        assert np.max(np.abs(sys_.phi @ W - rhs)) < 1e-10

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            solve_interpolation_weights(build_kernel_system(grid_nodes(3), 1.0), [1.0, 2.0])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 4), st.floats(-2, 2), st.integers(0, 2**32 - 1))
    def test_reproduces_data_and_zero_sum(self, p, log_gamma, seed):
        rng = np.random.default_rng(seed)
        ns = grid_nodes(p, h=rng.uniform(0.05, 0.5), start=rng.uniform(-3, 3))
        X = rng.normal(size=(p, 3))
        interp = solve_interpolation_weights(build_kernel_system(ns, math.exp(log_gamma)), X)
        got = evaluate_interpolant(interp, ns.nodes)
        np.testing.assert_allclose(got, X, rtol=1e-8, atol=1e-8 * np.abs(X).max())
        np.testing.assert_allclose(interp.weights.sum(axis=0), 0.0, atol=1e-10)

    def test_no_constant_no_constraint(self, rng):
        sys_ = build_kernel_system(grid_nodes(3), 1.0, include_constant=False)
        X = rng.normal(size=3)
        interp = solve_interpolation_weights(sys_, X)
        assert interp.constant == 0.0
        np.testing.assert_allclose(interp(sys_.nodes.nodes), X, rtol=1e-10)

    def test_matches_high_precision_solve(self, rng):
        lam, gamma, h = [0.0, -0.1, -0.2], 10.0, 0.1
        X = rng.normal(size=3)
        with mpmath.workdps(50):
            M = mpmath.matrix(4, 4)
            for j in range(3):
                for k in range(3):
                    M[j, k] = mpmath.exp(-((mpmath.mpf(lam[j]) - lam[k]) / (gamma * h)) ** 2)
                M[j, 3] = M[3, j] = 1
            W = mpmath.lu_solve(M, mpmath.matrix(list(X) + [0]))
            ref = lambda x: sum(W[j] * mpmath.exp(-((x - lam[j]) / (gamma * h)) ** 2) for j in range(3)) + W[3]
            expected = [float(ref(m)) for m in (-0.05, -0.15)]
        interp = solve_interpolation_weights(build_kernel_system(NodeSet(lam, h), gamma), X)
        np.testing.assert_allclose(interp(np.array([-0.05, -0.15])), expected, rtol=1e-10)

    def test_near_flat_matches_lagrange_at_midpoint(self):
        # smooth data; for rough unit-scale data the O(gamma^-2) gap is a few 1e-3
        ns = grid_nodes(3)
        X = np.sin(ns.nodes) + 0.5
        interp = solve_interpolation_weights(build_kernel_system(ns, 10.0), X)
        for mid in (-0.05, -0.15):
            L = sum(X[j] * lagrange_basis(ns, j, mid) for j in range(3))
            assert abs(interp(mid) - L) < 1e-3

    @pytest.mark.parametrize("p", [2, 3, 4])
    def test_flat_limit(self, p, rng):
        ns = grid_nodes(p)
        X = rng.normal(size=p)
        interp = solve_interpolation_weights(build_kernel_system(ns, 100.0), X)
        lam = np.linspace(ns.nodes[-1], ns.nodes[0], 22)[1:-1]
        L = sum(X[j] * lagrange_basis(ns, j, lam) for j in range(p))
        assert np.max(np.abs(interp(lam) - L)) <= 1e-2 * np.abs(X).max()


class TestLagrange:
    @pytest.mark.parametrize("p", [1, 2, 3, 5])
    def test_kronecker(self, p):
        ns = grid_nodes(p, h=0.3, start=1.0)
        for j in range(p):
            for k in range(p):
                assert lagrange_basis(ns, j, ns.nodes[k]) == pytest.approx(float(j == k), abs=1e-12)

    @pytest.mark.parametrize("p", [2, 3, 4, 5])
    def test_partition_of_unity(self, p, rng):
        ns = grid_nodes(p)
        lam = rng.uniform(ns.nodes[-1] - 0.1, ns.nodes[0] + 0.1, size=100)
        total = sum(lagrange_basis(ns, j, lam) for j in range(p))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    @pytest.mark.parametrize("j", [-1, 3, 1.5])
    def test_index_range(self, j):
        with pytest.raises(IndexError):
            lagrange_basis(grid_nodes(3), j, 0.0)
