import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbsa import tensor as T
from cbsa.gradcheck import check, random_graph
from cbsa.tensor import ContractError, DegenerateRowError, DimensionError, DomainError


def grad_of(fn, *params):
    with T.Tape() as tape:
        out = fn()
        grads = T.backward(tape, out)
    return [grads[id(p)] for p in params]


class TestForward:
    def test_matmul_identity(self):
        eye = T.tensor(np.eye(2))
        np.testing.assert_array_equal(T.matmul(eye, eye).data, np.eye(2))

    def test_matmul_hand_value(self):
        out = T.matmul(T.tensor([[1, 2], [3, 4]]), T.tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_matmul_shape_rule(self):
        assert T.matmul(T.tensor(np.ones((3, 5))), T.tensor(np.ones((5, 2)))).shape == (3, 2)

    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 5\).*\(4, 2\)"):
            T.matmul(T.tensor(np.ones((3, 5))), T.tensor(np.ones((4, 2))))

    def test_elementwise_examples(self):
        assert T.elementwise("sigmoid", T.tensor(0.0)).item() == 0.5
        assert T.elementwise("pow", T.tensor(0.25), gamma=1).item() == 0.25
        assert T.elementwise("log", T.tensor(math.e)).item() == pytest.approx(1.0, abs=1e-15)
        assert T.elementwise("negate", T.tensor(2.0)).item() == -2.0

    def test_elementwise_binary_requires_equal_shapes(self):
        with pytest.raises(DimensionError):
            T.elementwise("add", T.tensor(np.ones(2)), T.tensor(np.ones(3)))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(T.tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(T.tensor(-1.0))

    def test_pow_domain(self):
        with pytest.raises(DomainError):
            T.power(T.tensor(-0.5), 2.0)

    def test_softmax_examples(self):
        np.testing.assert_allclose(T.softmax_rows(T.tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)
        np.testing.assert_allclose(T.softmax_rows(T.tensor([[2.0, 2.0, 2.0, 2.0]])).data, 0.25)
        hot = T.softmax_rows(T.tensor([[1.0, 2.0]]), temperature=1e6).data
        np.testing.assert_allclose(hot, 0.5, atol=1e-6)

    def test_softmax_is_stable_for_large_logits(self):
        out = T.softmax_rows(T.tensor([[1000.0, 1001.0]])).data
        assert np.all(np.isfinite(out))

    def test_softmax_rejects_non_positive_temperature(self):
        with pytest.raises(ValueError):
            T.softmax_rows(T.tensor([[1.0, 2.0]]), temperature=0.0)

    def test_l2_normalize_examples(self):
        np.testing.assert_allclose(T.l2_normalize_rows(T.tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
        u = np.array([[0.0, 1.0]])
        np.testing.assert_array_equal(T.l2_normalize_rows(T.tensor(u)).data, u)
        with pytest.raises(DegenerateRowError):
            T.l2_normalize_rows(T.tensor([[0.0, 0.0]]))


class TestBackward:
    def test_square(self):
        x = T.parameter(3.0)
        (g,) = grad_of(lambda: x * x, x)
        assert g == 6.0

    def test_sigmoid_at_zero(self):
        x = T.parameter(0.0)
        (g,) = grad_of(lambda: T.sigmoid(x), x)
        assert g == 0.25

    def test_non_scalar_root(self):
        x = T.parameter(np.ones(3))
        with T.Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError):
                T.backward(tape, y)

    def test_no_tape_records_nothing(self):
        x = T.parameter(np.ones(3))
        y = T.sigmoid(x)
        assert y._parents == ()

    def test_no_grad_block(self):
        x = T.parameter(np.ones(3))
        with T.Tape() as tape:
            with T.no_grad():
                T.sigmoid(x)
        assert tape.nodes == []

    def test_tape_topological_order(self):
        a = T.parameter(np.ones((2, 2)))
        with T.Tape() as tape:
            T.tsum(T.sigmoid(T.matmul(a, a)) * a)
        index = {id(n): i for i, n in enumerate(tape.nodes)}
        for i, node in enumerate(tape.nodes):
            for p in node._parents:
                if id(p) in index:
                    assert index[id(p)] < i

    def test_every_reachable_node_has_matching_grad_shape(self):
        a = T.parameter(np.random.default_rng(0).normal(size=(3, 2)))
        with T.Tape() as tape:
            root = T.tsum(T.softmax_rows(T.matmul(a, T.transpose(a))))
            grads = T.backward(tape, root)
        for node in tape.nodes:
            assert grads[id(node)].shape == node.shape

    @pytest.mark.parametrize("seed", range(20))
    def test_random_graph_matches_finite_differences(self, seed):
        params, fn, ops = random_graph(np.random.default_rng(seed))
        report = check(fn, params)
        assert report.ok, (ops, report)

    def test_layer_norm_finite_differences(self):
        rng = np.random.default_rng(3)
        x = T.parameter(rng.normal(size=(3, 5)))
        gain = T.parameter(rng.normal(size=5))
        bias = T.parameter(rng.normal(size=5))
        w = T.tensor(rng.normal(size=(3, 5)))
        assert check(lambda: T.tsum(T.layer_norm(x, gain, bias) * w), [x, gain, bias]).ok

    def test_gelu_and_indexing_finite_differences(self):
        rng = np.random.default_rng(4)
        x = T.parameter(rng.normal(size=(4, 3)))
        w = T.tensor(rng.normal(size=(3, 3)))
        assert check(lambda: T.tsum(T.gelu(T.take_rows(x, [0, 2, 2])) * w), [x]).ok

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(5)
        _, f1, _ = random_graph(rng)
        x = T.parameter(rng.normal(size=(3, 3)))

        def r1():
            return T.tsum(T.sigmoid(T.matmul(x, x)))

        def r2():
            return T.tsum(T.log(T.softmax_rows(x)))

        (g1,) = grad_of(r1, x)
        (g2,) = grad_of(r2, x)
        (g12,) = grad_of(lambda: r1() + r2(), x)
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-14)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-30, 30))


@given(finite_rows, st.floats(0.05, 20))
def test_softmax_rows_are_distributions(x, temp):
    out = T.softmax_rows(T.tensor(x), temp).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(out >= 0) and np.all(out <= 1)
    assert np.all(np.isfinite(out))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_l2_rows_are_unit(x):
    if np.any(np.linalg.norm(x, axis=1) <= 1e-6):
        return
    np.testing.assert_allclose(np.linalg.norm(T.l2_normalize_rows(T.tensor(x)).data, axis=1), 1.0, atol=1e-9)
