"""Tests for the reverse-mode autodiff engine and the optimizer."""

from typing import Callable, Dict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imre import autodiff as ad
from imre.autodiff import Graph, OptimizerState, Tensor, backward, step
from imre.errors import ShapeError

Builder = Callable[[Graph, Dict[str, Tensor]], Tensor]


def _loss(build: Builder, params: Dict[str, np.ndarray]) -> float:
    graph = Graph()
    tensors = {name: graph.parameter(name, value) for name, value in params.items()}
    return float(build(graph, tensors).data)


def _analytic(build: Builder, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    graph = Graph()
    tensors = {name: graph.parameter(name, value) for name, value in params.items()}
    return backward(graph, build(graph, tensors))


def _numeric(build: Builder, params: Dict[str, np.ndarray], h: float = 1e-5):
    grads = {}
    for name, value in params.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            grad[idx] = (_loss(build, plus) - _loss(build, minus)) / (2 * h)
        grads[name] = grad
    return grads


def assert_gradients_match(build: Builder, params: Dict[str, np.ndarray]) -> None:
    analytic, numeric = _analytic(build, params), _numeric(build, params)
    for name in params:
        a, n = analytic[name], numeric[name]
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"


OP_ZOO: Dict[str, Builder] = {
    "affine": lambda g, t: ad.sum_all(ad.square(ad.affine(t["x"], t["w"], t["b"]))),
    "tanh": lambda g, t: ad.sum_all(
        ad.square(ad.nonlinearity(ad.affine(t["x"], t["w"], t["b"]), "tanh"))
    ),
    "relu": lambda g, t: ad.sum_all(
        ad.square(ad.nonlinearity(ad.affine(t["x"], t["w"], t["b"]), "relu"))
    ),
    "concat": lambda g, t: ad.sum_all(
        ad.mul(ad.concat(t["x"], t["a"], axis=1),
               g.constant(np.linspace(-1.0, 1.0, 10).reshape(2, 5)))
    ),
    "arithmetic": lambda g, t: ad.mean_all(
        ad.square(ad.shift(ad.scale(ad.sub(ad.add(t["a"], t["a"]), t["c"]), 1.7), 0.3))
    ),
    "mul_exp": lambda g, t: ad.sum_all(ad.mul(ad.exp(ad.scale(t["a"], 0.5)), t["c"])),
    "clip": lambda g, t: ad.sum_all(ad.square(ad.clip(t["a"], -0.5, 0.5))),
}


class TestOps:
    """Test forward values of the op zoo."""

    def test_affine_identity(self):
        g = Graph()
        y = ad.affine(g.constant([1.0, 2.0]), g.constant(np.eye(2)), g.constant([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_affine_hand_product(self):
        g = Graph()
        y = ad.affine(g.constant([1.0, 0.0]), g.constant([[2.0, 3.0], [5.0, 7.0]]),
                      g.constant([1.0, 1.0]))
        np.testing.assert_array_equal(y.data, [3.0, 4.0])

    def test_affine_shape_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            ad.affine(g.constant(np.ones((1, 3))), g.constant(np.ones((2, 2))),
                      g.constant(np.zeros(2)))

    def test_relu_and_tanh(self):
        g = Graph()
        np.testing.assert_array_equal(ad.nonlinearity(g.constant([-1.0, 2.0]), "relu").data,
                                      [0.0, 2.0])
        np.testing.assert_array_equal(ad.nonlinearity(g.constant([0.0]), "tanh").data, [0.0])

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=20))
    def test_tanh_range(self, values):
        y = ad.nonlinearity(Graph().constant(values), "tanh").data
        assert np.all(np.abs(y) <= 1.0)

    def test_unknown_nonlinearity(self):
        with pytest.raises(ValueError):
            ad.nonlinearity(Graph().constant([1.0]), "sigmoid")

    def test_concat_values(self):
        g = Graph()
        np.testing.assert_array_equal(
            ad.concat(g.constant([1.0, 2.0]), g.constant([3.0]), axis=0).data, [1.0, 2.0, 3.0]
        )

    def test_concat_off_axis_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            ad.concat(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 3))), axis=1)

    def test_concat_gradient_routes_ones(self):
        g = Graph()
        a, b = g.parameter("a", [1.0, 2.0]), g.parameter("b", [3.0])
        grads = backward(g, ad.sum_all(ad.concat(a, b, axis=0)))
        np.testing.assert_array_equal(grads["a"], [1.0, 1.0])
        np.testing.assert_array_equal(grads["b"], [1.0])

    def test_mixed_graphs_rejected(self):
        with pytest.raises(ValueError):
            ad.add(Graph().constant([1.0]), Graph().constant([1.0]))

    def test_overflow_is_reported(self):
        with np.errstate(over="ignore"):
            with pytest.raises(FloatingPointError):
                ad.exp(Graph().constant([1000.0]))


class TestBackward:
    """Test reverse-mode gradients."""

    def test_sum_gives_ones(self):
        g = Graph()
        w = g.parameter("w", np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(backward(g, ad.sum_all(w))["w"], np.ones((2, 3)))

    def test_unused_parameter_gets_zero(self):
        g = Graph()
        w = g.parameter("w", [1.0, 2.0])
        g.parameter("unused", np.ones((3, 2)))
        grads = backward(g, ad.sum_all(w))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 2)))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        w = g.parameter("w", [1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(g, ad.square(w))

    def test_squared_norm_of_product(self, rng):
        params = {"x": rng.normal(size=(1, 3)), "w": rng.normal(size=(3, 2))}
        assert_gradients_match(
            lambda g, t: ad.sum_all(ad.square(ad.affine(t["x"], t["w"], g.constant(np.zeros(2))))),
            params,
        )

    @pytest.mark.parametrize("name", sorted(OP_ZOO))
    def test_op_zoo_matches_finite_differences(self, name, rng):
        params = {
            "x": rng.normal(size=(2, 3)),
            "w": rng.normal(size=(3, 4)),
            "b": rng.normal(size=4),
            "a": rng.normal(size=(2, 2)),
            "c": rng.normal(size=(2, 2)),
        }
        assert_gradients_match(OP_ZOO[name], params)

    @given(st.integers(min_value=0, max_value=10**6))
    def test_dense_stack_gradients(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "x": rng.normal(size=(3, 4)),
            "w1": rng.normal(size=(4, 3)) * 0.5,
            "b1": rng.normal(size=3),
            "w2": rng.normal(size=(6, 2)) * 0.5,
            "b2": rng.normal(size=2),
        }

        def build(g, t):
            h = ad.nonlinearity(ad.affine(t["x"], t["w1"], t["b1"]), "tanh")
            y = ad.affine(ad.concat(h, h, axis=-1), t["w2"], t["b2"])
            return ad.mean_all(ad.square(y))

        assert_gradients_match(build, params)


class TestOptimizer:
    """Test the adaptive-moment step."""

    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        updated = step(OptimizerState(), params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(updated["w"], params["w"])

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0])}
        updated = step(OptimizerState(learning_rate=0.01), params, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(updated["w"] - params["w"], [-0.01, 0.01], rtol=1e-6)

    def test_runs_are_deterministic(self, rng):
        grads = [{"w": rng.normal(size=3)} for _ in range(5)]

        def run():
            opt, params = OptimizerState(), {"w": np.zeros(3)}
            for g in grads:
                params = step(opt, params, g)
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_gradient_shape_checked(self):
        with pytest.raises(ShapeError):
            step(OptimizerState(), {"w": np.zeros(3)}, {"w": np.zeros(2)})
