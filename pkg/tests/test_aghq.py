import numpy as np
import pytest

from aghqmm.aghq import Evaluator, eval_group, inner_newton, loglik_grad, nll_grad, nll_grad_scalar
from aghqmm.errors import InvalidArgumentError
from aghqmm.model import Dataset, GroupData, group_joint
from aghqmm.quadrature import adapt_rule

from conftest import (
    adapted_rule_loglik,
    central_diff,
    dense_grid_loglik,
    gaussian_marginal_loglik,
    newton_mode,
    random_dataset,
    random_theta,
    split_theta,
)


def _per_group(family, theta, data, k, node_map="backward"):
    return np.array([loglik_grad(family, theta, data.subset([i]), k, node_map=node_map).value
                     for i in range(data.m)])


class TestInnerNewton:
    def test_gaussian_single_step(self):
        rng = np.random.default_rng(0)
        g = random_dataset(rng, "gaussian", m=1, n=6, q=2, d=2).group(0)
        theta = random_theta(rng, 2, 2)
        st = inner_newton("gaussian", theta, g, u0=rng.normal(size=2))
        beta, Sigma = split_theta(theta, 2, 2)
        exact = np.linalg.solve(g.V.T @ g.V + np.linalg.inv(Sigma), g.V.T @ (g.y - g.X @ beta))
        np.testing.assert_allclose(st.mode, exact, atol=1e-12)
        assert st.inner_iters == 1

    def test_empty_group_mode_is_zero(self):
        st = inner_newton("bernoulli", np.array([0.3, 0.1]), GroupData.empty(1, 1), u0=[2.0])
        np.testing.assert_allclose(st.mode, [0.0], atol=1e-12)

    def test_matches_grid_search(self):
        rng = np.random.default_rng(1)
        g = random_dataset(rng, "bernoulli", m=1, n=8, q=2, d=1).group(0)
        theta = np.array([-0.4, 0.8, -0.5])
        grid = np.arange(-8.0, 8.0, 1e-4)
        vals = [group_joint("bernoulli", theta, np.array([u]), g).value for u in grid[::100]]
        coarse = grid[::100][int(np.argmax(vals))]
        fine = grid[np.abs(grid - coarse) <= 0.011]
        best = fine[int(np.argmax([group_joint("bernoulli", theta, np.array([u]), g).value for u in fine]))]
        st = inner_newton("bernoulli", theta, g)
        assert abs(st.mode[0] - best) <= 1e-3
        assert abs(group_joint("bernoulli", theta, st.mode, g).grad_u[0]) <= 1e-8

    def test_cholesky_factor_of_hessian(self):
        rng = np.random.default_rng(2)
        g = random_dataset(rng, "bernoulli", m=1, n=6, q=1, d=2).group(0)
        theta = random_theta(rng, 1, 2)
        st = inner_newton("bernoulli", theta, g)
        _, H = newton_mode(g, theta, 2)
        np.testing.assert_allclose(st.chol @ st.chol.T, H, rtol=1e-10)


class TestValue:
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_laplace_formula(self, d):
        rng = np.random.default_rng(10 + d)
        data = random_dataset(rng, "bernoulli", m=5, n=6, q=2, d=d)
        theta = random_theta(rng, 2, d)
        expected = 0.0
        for g in data.groups():
            u, H = newton_mode(g, theta, d)
            expected += (0.5 * d * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(H)[1]
                         + group_joint("bernoulli", theta, u, g).value)
        np.testing.assert_allclose(loglik_grad("bernoulli", theta, data, 1).value, expected, rtol=1e-12)

    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_gaussian_exact_for_every_k(self, d, k):
        rng = np.random.default_rng(20 + d)
        data = random_dataset(rng, "gaussian", m=4, n=5, q=2, d=d, ragged=True)
        theta = random_theta(rng, 2, d)
        np.testing.assert_allclose(_per_group("gaussian", theta, data, k),
                                   gaussian_marginal_loglik(theta, data), rtol=1e-10)

    def test_forward_map_is_exact_only_at_one_node(self):
        rng = np.random.default_rng(3)
        data = random_dataset(rng, "gaussian", m=3, n=5, q=1, d=2)
        theta = np.concatenate([[0.2], np.log([1.0 / 1.0, 1.0]), [-1.0]])
        exact = gaussian_marginal_loglik(theta, data).sum()
        np.testing.assert_allclose(loglik_grad("gaussian", theta, data, 1, node_map="forward").value,
                                   exact, rtol=1e-12)
        assert abs(loglik_grad("gaussian", theta, data, 3, node_map="forward").value - exact) > 1e-3

    def test_dense_grid_oracle_d1(self):
        rng = np.random.default_rng(4)
        data = random_dataset(rng, "bernoulli", m=6, n=5, q=2, d=1)
        theta = np.array([-1.0, 0.5, np.log(0.5)])
        ref = dense_grid_loglik(data, theta)
        got = _per_group("bernoulli", theta, data, 25)
        np.testing.assert_allclose(got, ref, rtol=1e-8)

    @pytest.mark.parametrize("d,k", [(1, 3), (1, 15), (2, 3), (2, 7), (3, 3)])
    def test_independent_adapted_rule(self, d, k):
        rng = np.random.default_rng(30 + 10 * d + k)
        data = random_dataset(rng, "bernoulli", m=4, n=6, q=2, d=d)
        theta = random_theta(rng, 2, d)
        np.testing.assert_allclose(_per_group("bernoulli", theta, data, k), adapted_rule_loglik(data, theta, k),
                                   rtol=1e-11)

    def test_identical_groups_add_up(self):
        g = random_dataset(np.random.default_rng(5), "bernoulli", m=1, n=5, q=2, d=2).group(0)
        theta = random_theta(np.random.default_rng(6), 2, 2)
        one = loglik_grad("bernoulli", theta, Dataset.from_groups([g]), 5)
        many = loglik_grad("bernoulli", theta, Dataset.from_groups([g] * 7), 5)
        np.testing.assert_allclose(many.value, 7 * one.value, rtol=1e-14)
        np.testing.assert_allclose(many.grad, 7 * one.grad, rtol=1e-13)

    def test_nll_is_negated(self):
        rng = np.random.default_rng(7)
        data = random_dataset(rng, m=3)
        theta = random_theta(rng, 2, 1)
        a, b = loglik_grad("bernoulli", theta, data, 5), nll_grad("bernoulli", theta, data, 5)
        assert a.value == -b.value
        np.testing.assert_array_equal(a.grad, -b.grad)

    def test_k_consistency_gaussian_monotone(self):
        rng = np.random.default_rng(12)
        data = random_dataset(rng, "gaussian", m=6, n=5, q=2, d=2)
        theta = random_theta(rng, 2, 2)
        ref = loglik_grad("gaussian", theta, data, 25).value
        gaps = [abs(loglik_grad("gaussian", theta, data, k).value - ref) for k in range(7, 25)]
        assert max(gaps) <= 1e-10 * abs(ref)

    def test_k_consistency_bernoulli_envelope(self, eq6_data):
        # the Bernoulli error oscillates in k, so only the envelope is asserted
        data = eq6_data.subset(np.arange(40))
        theta = np.array([-2.7, -0.2, -0.7])
        ref = loglik_grad("bernoulli", theta, data, 25).value
        np.testing.assert_allclose(_per_group("bernoulli", theta, data, 25).sum(),
                                   dense_grid_loglik(data, theta).sum(), rtol=1e-8)
        gaps = [abs(loglik_grad("bernoulli", theta, data, k).value - ref) for k in range(7, 25)]
        assert all(g <= gaps[0] for g in gaps)
        assert gaps[-1] <= 1e-3 * gaps[0]

    def test_eval_group(self):
        rng = np.random.default_rng(8)
        data = random_dataset(rng, m=3, d=2)
        theta = random_theta(rng, 2, 2)
        out = loglik_grad("bernoulli", theta, data, 4)
        rule = adapt_rule(2, 4)
        vals = [eval_group("bernoulli", theta, data.group(i), out.states[i], rule) for i in range(3)]
        np.testing.assert_allclose(sum(v for v, _ in vals), out.value, rtol=1e-13)
        np.testing.assert_allclose(sum(g for _, g in vals), out.grad, rtol=1e-12)


class TestGradient:
    @pytest.mark.parametrize("family", ["bernoulli", "gaussian"])
    @pytest.mark.parametrize("node_map", ["backward", "forward"])
    @pytest.mark.parametrize("d,k", [(1, 1), (1, 7), (2, 1), (2, 3), (2, 7), (3, 3)])
    def test_matches_central_differences(self, family, node_map, d, k):
        rng = np.random.default_rng(hash((family, node_map, d, k)) % 2**32)
        data = random_dataset(rng, family, m=5, n=4, q=2, d=d, ragged=True)
        theta = random_theta(rng, 2, d)
        out = nll_grad(family, theta, data, k, node_map=node_map)
        fd = central_diff(lambda t: nll_grad(family, t, data, k, warm=out.states, node_map=node_map).value, theta)
        err = np.max(np.abs(out.grad - fd)) / (1.0 + np.max(np.abs(out.grad)))
        assert err <= 1e-6

    def test_random_intercept_scalar_path(self, eq6_data):
        theta = np.array([-2.6, -0.1, -0.6])
        out = nll_grad_scalar("bernoulli", theta, eq6_data, 25)
        fd = central_diff(lambda t: nll_grad_scalar("bernoulli", t, eq6_data, 25, warm=out.states).value, theta)
        np.testing.assert_allclose(out.grad, fd, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("family", ["bernoulli", "gaussian"])
    def test_scalar_path_matches_general(self, family):
        rng = np.random.default_rng(9)
        for k in (1, 2, 5, 11):
            data = random_dataset(rng, family, m=6, n=5, q=3, d=1, ragged=True)
            theta = random_theta(rng, 3, 1)
            a = nll_grad(family, theta, data, k)
            b = nll_grad_scalar(family, theta, data, k)
            np.testing.assert_allclose(b.value, a.value, rtol=1e-12)
            np.testing.assert_allclose(b.grad, a.grad, rtol=1e-12, atol=1e-12)

    def test_scalar_path_requires_one_dimension(self):
        data = random_dataset(np.random.default_rng(0), d=2)
        with pytest.raises(InvalidArgumentError):
            nll_grad_scalar("bernoulli", np.zeros(5), data, 3)


class TestWarmStartsAndChunking:
    def test_warm_start_neutral(self, eq6_data):
        theta = np.array([-2.5, -0.2, -0.8])
        cold = nll_grad("bernoulli", theta, eq6_data, 9)
        warm_from = nll_grad("bernoulli", theta + 0.05, eq6_data, 9)
        warm = nll_grad("bernoulli", theta, eq6_data, 9, warm=warm_from.states)
        np.testing.assert_allclose(warm.value, cold.value, rtol=1e-10)
        np.testing.assert_allclose(warm.grad, cold.grad, rtol=1e-10, atol=1e-10)
        assert warm.states.total_inner_iters < cold.states.total_inner_iters

    def test_chunking_is_bit_identical(self):
        rng = np.random.default_rng(11)
        data = random_dataset(rng, m=9, d=2, ragged=True)
        theta = random_theta(rng, 2, 2)
        a = nll_grad("bernoulli", theta, data, 5)
        b = nll_grad("bernoulli", theta, data, 5, chunk=2)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_bad_warm_shape(self):
        data = random_dataset(np.random.default_rng(0), m=3)
        with pytest.raises(InvalidArgumentError):
            nll_grad("bernoulli", np.zeros(3), data, 3, warm=np.zeros((2, 1)))

    def test_bad_arguments(self):
        data = random_dataset(np.random.default_rng(0), m=3)
        with pytest.raises(InvalidArgumentError):
            nll_grad("bernoulli", np.zeros(3), data, 0)
        with pytest.raises(InvalidArgumentError):
            nll_grad("bernoulli", np.zeros(3), data, 3, node_map="sideways")
        with pytest.raises(InvalidArgumentError):
            nll_grad("bernoulli", np.zeros(4), data, 3)

    def test_evaluator_counts(self, eq6_data):
        ev = Evaluator(eq6_data, "bernoulli", 5)
        f, g, st = ev(np.array([-2.0, 0.0, 0.0]))
        f2, g2, _ = ev(np.array([-2.0, 0.0, 0.0]), st)
        assert ev.n_evals == 2
        np.testing.assert_allclose(f2, f, rtol=1e-12)
        assert ev.inner_iters == st.total_inner_iters
