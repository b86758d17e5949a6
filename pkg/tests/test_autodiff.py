"""Reverse-mode tape: primitive derivatives, composition, linearity, failure modes."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairprice import autodiff as ad
from oracles import finite_difference


def _grad(fn, value):
    tape = ad.Tape()
    x = tape.leaf(value)
    return ad.backward(fn(x))[x]


class TestPrimitiveDerivatives:
    def test_sigmoid_at_zero(self):
        assert _grad(ad.sigmoid, 0.0) == pytest.approx(0.25, abs=1e-15)

    def test_ln_at_two(self):
        assert _grad(ad.ln, 2.0) == pytest.approx(0.5, abs=1e-15)

    def test_tanh_at_zero(self):
        assert _grad(ad.tanh, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_product_rule(self):
        tape = ad.Tape()
        x, y = tape.leaf(3.0), tape.leaf(4.0)
        g = ad.backward(x * y)
        assert (g[x], g[y]) == (4.0, 3.0)

    def test_sum_of_constants_has_zero_gradient(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        out = ad.sum(tape.constant(np.array([3.0, 4.0])))
        np.testing.assert_array_equal(ad.backward(out)[x], [0.0, 0.0])

    def test_unreachable_leaf_gets_zeros(self):
        tape = ad.Tape()
        x, y = tape.leaf(np.ones(3)), tape.leaf(2.0)
        g = ad.backward(ad.exp(y))
        np.testing.assert_array_equal(g[x], np.zeros(3))

    @pytest.mark.parametrize("name,fn,point", [
        ("exp", ad.exp, 0.3), ("ln", ad.ln, 1.7), ("sqrt", ad.sqrt, 2.5), ("sigmoid", ad.sigmoid, -1.1),
        ("tanh", ad.tanh, 0.4), ("relu", ad.relu, 0.8), ("neg", ad.neg, 1.0), ("square", ad.square, -1.5),
        ("div", lambda x: 1.0 / x, 0.7), ("sub", lambda x: 2.0 - x, 0.2),
        ("clip", lambda x: ad.clip(x, -1.0, 1.0), 0.3),
    ])
    def test_each_primitive_matches_finite_differences(self, name, fn, point):
        rep = ad.grad_check(lambda v: ad.sum(fn(v)), [point], tolerance=1e-7)
        assert rep.passed, (name, rep.max_rel_error)


class TestDomainErrors:
    def test_ln_of_nonpositive_names_node(self):
        tape = ad.Tape()
        with pytest.raises(ad.EvaluationError, match="ln"):
            ad.ln(tape.leaf(np.array([1.0, -2.0])))

    def test_division_by_zero(self):
        tape = ad.Tape()
        with pytest.raises(ad.EvaluationError, match="div"):
            ad.div(tape.leaf(1.0), tape.leaf(0.0))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_surfaces_at_backward(self):
        tape = ad.Tape()
        x = tape.leaf(800.0)
        with pytest.raises(ad.EvaluationError, match="non-finite"):
            ad.backward(ad.exp(x))

    def test_backward_needs_scalar(self):
        tape = ad.Tape()
        with pytest.raises(ad.EvaluationError, match="scalar"):
            ad.backward(tape.leaf(np.ones(3)))


def _composite(seed):
    """Random 3-layer composition touching every primitive."""
    rng = np.random.default_rng(seed)
    W1, W2, w3 = rng.normal(0, 0.5, (5, 6)), rng.normal(0, 0.5, (6, 4)), rng.normal(0, 0.5, 4)
    b1 = rng.normal(0, 0.1, 6)

    def f(x):
        X = ad.reshape(x, (1, 5))
        h1 = ad.tanh(ad.matmul(X, W1) + b1)
        h2 = ad.sigmoid(ad.matmul(h1, W2))
        h3 = ad.exp(h2) / (1.0 + ad.square(h2)) - ad.ln(1.5 + h2) + ad.sqrt(0.5 + ad.relu(h2 + 0.7))
        return ad.dot(ad.reshape(h3, (4,)), w3) + ad.mean(ad.clip(x, -5.0, 5.0)) - ad.sum(ad.neg(x)) * 0.1

    return f, rng.normal(0, 1, 5)


class TestComposition:
    def test_random_compositions_match_finite_differences(self):
        worst = 0.0
        for seed in range(100):
            f, point = _composite(seed)
            rep = ad.grad_check(f, point, step=1e-5, tolerance=1e-5)
            worst = max(worst, rep.max_rel_error)
        assert worst < 1e-5

    def test_grad_check_square(self):
        rep = ad.grad_check(lambda x: ad.sum(x * x), [3.0])
        assert rep.passed and rep.max_rel_error < 1e-8

    def test_grad_check_reports_failure(self):
        def wrong(x):
            # value of x**2 but a recorded derivative of zero
            return ad.sum(x * x.value)
        rep = ad.grad_check(wrong, [3.0])
        assert not rep.passed

    def test_external_oracle_agrees(self):
        f, point = _composite(7)
        numeric = finite_difference(lambda p: f(ad.Tape().leaf(p)).item(), point)
        np.testing.assert_allclose(_grad(f, point), numeric, rtol=1e-7, atol=1e-9)

    def test_replay_is_bitwise_deterministic(self):
        f, point = _composite(3)
        a, b = _grad(f, point), _grad(f, point)
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 10_000))
    def test_linearity(self, alpha, beta, seed):
        f, point = _composite(seed)
        g, _ = _composite(seed + 1)
        combined = _grad(lambda x: alpha * f(x) + beta * g(x), point)
        separate = alpha * _grad(f, point) + beta * _grad(g, point)
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-10)


class TestBroadcasting:
    def test_bias_gradient_sums_over_rows(self):
        tape = ad.Tape()
        b = tape.leaf(np.zeros(3))
        out = ad.sum(tape.constant(np.ones((4, 3))) + b)
        np.testing.assert_array_equal(ad.backward(out)[b], [4.0, 4.0, 4.0])

    def test_take_scatters_gradient(self):
        tape = ad.Tape()
        x = tape.leaf(np.arange(5.0))
        out = ad.sum(x[np.array([0, 0, 3])])
        np.testing.assert_array_equal(ad.backward(out)[x], [2.0, 0.0, 0.0, 1.0, 0.0])
