import numpy as np
import pytest
from numpy.testing import assert_allclose

from fitkit import functional as F
from fitkit import tensor as T
from fitkit.errors import OracleLimitError, ShapeError, StateError, ValidationError
from fitkit.graph import ComputationGraph, HessianOperator, exact_hessian, grad_check, hessian_vector_product
from fitkit.tensor import Tensor


def _positive(shape):
    return lambda gen: np.abs(gen.standard_normal(shape)) + 0.5


def _normal(shape):
    return lambda gen: gen.standard_normal(shape)


def _away_from_zero(shape):
    return lambda gen: np.sign(gen.standard_normal(shape)) * (np.abs(gen.standard_normal(shape)) + 0.5)


GATHER_INDEX = np.array([0, 4, -1, 2, 2])
LABELS = np.array([0, 2, 1])
TARGETS = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0], [0.1, 0.1, 0.8]])


def _batch_norm(x, gamma, beta):
    state = F.BatchNormState(np.zeros(2), np.ones(2))
    return F.batch_norm(x, gamma, beta, state, training=True)


PRIMITIVES = {
    "add_broadcast": (lambda a, b: a + b, [_normal((2, 3)), _normal((3,))]),
    "sub_broadcast": (lambda a, b: a - b, [_normal((2, 3)), _normal((2, 1))]),
    "mul": (lambda a, b: a * b, [_normal((2, 3)), _normal((1, 3))]),
    "div": (lambda a, b: a / b, [_normal((2, 3)), _away_from_zero((2, 3))]),
    "neg": (lambda a: -a, [_normal((4,))]),
    "pow_int": (lambda a: a ** 3, [_normal((2, 2))]),
    "pow_fractional": (lambda a: a ** 0.5, [_positive((3,))]),
    "exp": (lambda a: a.exp(), [_normal((2, 3))]),
    "log": (lambda a: a.log(), [_positive((2, 3))]),
    "relu": (lambda a: a.relu(), [_away_from_zero((2, 3))]),
    "matmul": (lambda a, b: a @ b, [_normal((2, 3)), _normal((3, 4))]),
    "reshape": (lambda a: a.reshape(3, 2), [_normal((2, 3))]),
    "transpose": (lambda a: a.transpose(1, 0, 2), [_normal((2, 3, 2))]),
    "sum_axis": (lambda a: a.sum(axis=1), [_normal((2, 3))]),
    "sum_keepdims": (lambda a: a.sum(axis=0, keepdims=True), [_normal((2, 3))]),
    "mean": (lambda a: a.mean(), [_normal((2, 3))]),
    "broadcast_to": (lambda a: a.broadcast_to((4, 2, 3)), [_normal((2, 3))]),
    "gather": (lambda a: T.gather(a, GATHER_INDEX), [_normal((2, 5))]),
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, 1, 1)[0], [_normal((1, 2, 4, 4)), _normal((3, 2, 3, 3)), _normal((3,))]),
    "strided_conv2d": (lambda x, w: F.conv2d(x, w, None, 2, 0)[0], [_normal((1, 1, 5, 5)), _normal((2, 1, 3, 3))]),
    "max_pool2d": (lambda x: F.max_pool2d(x, 2), [_normal((1, 2, 4, 4))]),
    "dense": (lambda x, w, b: F.dense(x, w, b)[0], [_normal((3, 4)), _normal((2, 4)), _normal((2,))]),
    "batch_norm": (_batch_norm, [_normal((4, 2)), _normal((2,)), _normal((2,))]),
    "log_softmax": (lambda z: F.log_softmax(z), [_normal((3, 3))]),
    "cross_entropy": (lambda z: F.softmax_cross_entropy(z, LABELS), [_normal((3, 3))]),
    "soft_cross_entropy": (lambda z: F.soft_cross_entropy(z, TARGETS), [_normal((3, 3))]),
}


def _check_primitive(name, points, tol=1e-4):
    fn, makers = PRIMITIVES[name]
    gen = np.random.default_rng(sorted(PRIMITIVES).index(name))
    shapes = [m(gen).shape for m in makers]
    graph = ComputationGraph(fn, shapes, name=name)
    worst = 0.0
    for i in range(points):
        inputs = [m(gen) for m in makers]
        worst = max(worst, grad_check(graph, inputs, seed=i))
    assert worst <= tol, f"{name}: worst relative error {worst:.2e}"


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_primitive_gradients(self, name):
        _check_primitive(name, points=20)

    @pytest.mark.slow
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_primitive_gradients_thousand_points(self, name):
        _check_primitive(name, points=1000)

    def test_rejects_out_of_range_epsilon(self):
        graph = ComputationGraph(lambda a: a * a, [(2,)])
        with pytest.raises(ValidationError):
            grad_check(graph, [np.ones(2)], epsilon=0.1)

    def test_rejects_non_finite_inputs(self):
        graph = ComputationGraph(lambda a: a * a, [(2,)])
        with pytest.raises(ValidationError):
            grad_check(graph, [np.array([1.0, np.nan])])


class TestReverseMode:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = x * x + x * 3.0
        T.backward(y.sum())
        assert_allclose(x.grad.data, 2 * x.data + 3.0)

    def test_unused_input_gets_zero_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        gx, gu = T.grad((x * 2.0).sum(), [x, unused])
        assert_allclose(gx.data, 2.0)
        assert_allclose(gu.data, np.zeros((2, 2)))

    def test_gradient_of_intermediate_tensor(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        h = x * 3.0
        y = (h * h).sum()
        assert_allclose(T.grad(y, h).data, 2 * h.data)

    def test_second_derivative_through_create_graph(self):
        x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
        (g,) = T.grad((x ** 3).sum(), [x], create_graph=True)
        (h,) = T.grad(g.sum(), [x])
        assert_allclose(g.data, 3 * x.data ** 2)
        assert_allclose(h.data, 6 * x.data)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf

    def test_seed_required_for_non_scalar_output(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValidationError):
            T.grad(x * 2.0, x)

    def test_seed_shape_mismatch(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ShapeError):
            T.grad(x * 2.0, x, grad_outputs=[np.ones(3)])

    def test_retain_grad_on_intermediate(self):
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        h = (x * 2.0).retain_grad()
        T.backward((h * h).sum())
        assert_allclose(h.grad.data, 2 * h.data)

    def test_gather_padding_reads_zero(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = T.gather(x, np.array([2, -1, 0]))
        assert_allclose(out.data, [[2.0, 0.0, 0.0], [5.0, 0.0, 3.0]])
        T.backward(out.sum())
        assert_allclose(x.grad.data, [[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])


class TestComputationGraph:
    def test_records_nodes_in_topological_order(self):
        graph = ComputationGraph(lambda a, b: (a * b).sum(), [(2,), (2,)])
        graph.forward([np.ones(2), np.arange(2.0)])
        assert [n.op for n in graph.nodes[:2]] == ["input", "input"]
        for node in graph.nodes:
            assert all(i < node.id for i in node.inputs)
        assert graph.outputs == [len(graph.nodes) - 1]

    def test_backward_before_forward(self):
        graph = ComputationGraph(lambda a: a.sum(), [(2,)])
        with pytest.raises(StateError):
            graph.backward()

    def test_input_shape_mismatch_names_input(self):
        graph = ComputationGraph(lambda a, b: a @ b, [(2, 3), (3, 1)])
        with pytest.raises(ShapeError) as info:
            graph.forward([np.ones((2, 3)), np.ones((2, 1))])
        assert info.value.node_id == 1

    def test_incompatible_operation_reports_node(self):
        graph = ComputationGraph(lambda a, b: a @ b, [(2, 3), (2, 3)])
        with pytest.raises(ShapeError) as info:
            graph.forward([np.ones((2, 3)), np.ones((2, 3))])
        assert info.value.node_id == 2

    def test_backward_returns_input_gradients(self):
        graph = ComputationGraph(lambda a, b: (a * b).sum(), [(3,), (3,)])
        a, b = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
        graph.forward([a, b])
        ga, gb = graph.backward()
        assert_allclose(ga.data, b)
        assert_allclose(gb.data, a)

    def test_forward_does_not_mutate_inputs(self):
        graph = ComputationGraph(lambda a: (a * a).sum(), [(2,)])
        a = np.array([1.0, 2.0])
        graph.forward([a])
        graph.backward()
        assert_allclose(a, [1.0, 2.0])


class TestSecondOrder:
    def test_quadratic_hessian_is_exact(self, rng):
        a = rng.standard_normal((4, 4))
        sym = a + a.T
        graph = ComputationGraph(lambda x: 0.5 * (x * (Tensor(sym) @ x.reshape(4, 1)).reshape(4)).sum(), [(4,)])
        hessian, asymmetry = exact_hessian(graph, [rng.standard_normal(4)])
        assert_allclose(hessian, sym, atol=1e-12)
        assert asymmetry < 1e-12

    def test_hvp_matches_finite_difference_of_gradients(self, tiny_mlp, tiny_data):
        weights = [b.weights for b in tiny_mlp.blocks]
        x, y = tiny_data.inputs, tiny_data.labels
        op = HessianOperator(lambda: tiny_mlp.loss(x, y), weights)
        v = np.random.default_rng(0).standard_normal(op.dim)
        hv = op.matvec(v)

        def gradient_at(shift):
            originals = [w.data.copy() for w in weights]
            for w, piece in zip(weights, op.split(shift)):
                w.data = w.data + piece
            g = np.concatenate([t.data.reshape(-1) for t in T.grad(tiny_mlp.loss(x, y), weights)])
            for w, original in zip(weights, originals):
                w.data = original
            return g

        eps = 1e-5
        numeric = (gradient_at(eps * v) - gradient_at(-eps * v)) / (2 * eps)
        assert np.max(np.abs(hv - numeric)) / np.max(np.abs(hv)) <= 1e-4

    def test_hvp_is_linear_in_the_direction(self, tiny_mlp, tiny_data):
        weights = [b.weights for b in tiny_mlp.blocks]
        op = HessianOperator(lambda: tiny_mlp.loss(tiny_data.inputs, tiny_data.labels), weights)
        gen = np.random.default_rng(5)
        v, w = gen.standard_normal(op.dim), gen.standard_normal(op.dim)
        a, b = 2.5, -0.75
        combined = op.matvec(a * v + b * w)
        assert_allclose(combined, a * op.matvec(v) + b * op.matvec(w), rtol=1e-10, atol=1e-12)

    def test_hessian_vector_product_returns_tensor(self):
        graph = ComputationGraph(lambda x: (x * x * x).sum(), [(2,)])
        hv = hessian_vector_product(graph, [np.array([1.0, 2.0])], np.array([1.0, 1.0]))
        assert isinstance(hv, Tensor)
        assert_allclose(hv.data, [6.0, 12.0])

    def test_oracle_limit(self):
        graph = ComputationGraph(lambda x: (x * x).sum(), [(3,)])
        with pytest.raises(OracleLimitError):
            exact_hessian(graph, [np.ones(3)], limit=2)
