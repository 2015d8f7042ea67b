import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dppssl.numerics import (
    DegenerateVectorError,
    DimensionError,
    GradTape,
    NonFiniteError,
    TapeConsumedError,
    Tensor,
    additive_angular_margin,
    concat,
    cosine_similarity,
    finite_difference_gradient,
    gather,
    gelu,
    l2_normalize,
    linear_forward,
    logsumexp_rows,
    matmul_nt,
    mean,
    relative_error,
    total,
)


def _erf_decimal(x: Decimal, terms: int = 80) -> Decimal:
    # Maclaurin series of erf, summed in 40-digit decimal arithmetic
    s, term = Decimal(0), x
    for n in range(terms):
        s += term / (2 * n + 1)
        term = -term * x * x / (n + 1)
    pi = Decimal("3.141592653589793238462643383279502884197")
    return 2 * s / pi.sqrt()


class TestTensor:
    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_copy_on_construction(self):
        src = np.array([1.0, 2.0])
        t = Tensor(src)
        src[0] = 9.0
        assert t.data[0] == 1.0


class TestLinear:
    def test_identity(self):
        out = linear_forward(Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor([3.0, -1.0]))
        np.testing.assert_array_equal(out.data, [3.0, -1.0])

    def test_zero_weights(self):
        out = linear_forward(Tensor(np.zeros((2, 3))), Tensor([5.0, 5.0]), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [5.0, 5.0])

    def test_hand_example_against_loops(self):
        W = [[1.0, 2.0], [3.0, 4.0]]
        b = [0.5, -0.5]
        x = [1.0, 1.0]
        expected = [sum(W[o][i] * x[i] for i in range(2)) + b[o] for o in range(2)]
        assert expected == [3.5, 6.5]
        out = linear_forward(Tensor(W), Tensor(b), Tensor(x))
        np.testing.assert_array_equal(out.data, expected)

    def test_batch_rows_match_vectors(self, rng):
        W, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(3))
        X = rng.standard_normal((5, 4))
        batch = linear_forward(W, b, Tensor(X)).data
        for r in range(5):
            np.testing.assert_allclose(batch[r], linear_forward(W, b, Tensor(X[r])).data, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear_forward(Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(DimensionError):
            linear_forward(Tensor(np.eye(2)), Tensor(np.zeros(3)), Tensor([1.0, 2.0]))


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-9

    def test_one_against_extended_precision(self):
        getcontext().prec = 40
        one = Decimal(1)
        oracle = one * (1 + _erf_decimal(one / Decimal(2).sqrt())) / 2
        assert abs(gelu(Tensor([1.0])).data[0] - float(oracle)) < 1e-15
        assert str(oracle).startswith("0.841344746")

    def test_not_tanh_approximation(self):
        x = 1.5
        tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        exact = 0.5 * x * (1 + math.erf(x / math.sqrt(2)))
        got = gelu(Tensor([x])).data[0]
        assert abs(got - exact) < 1e-15
        assert abs(got - tanh_form) > 1e-6


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_unit_vector_fixed(self):
        np.testing.assert_array_equal(l2_normalize(Tensor([0.0, 1.0, 0.0])).data, [0.0, 1.0, 0.0])

    def test_symmetric(self):
        np.testing.assert_array_equal(l2_normalize(Tensor([1.0] * 4)).data, [0.5] * 4)

    def test_degenerate(self):
        with pytest.raises(DegenerateVectorError):
            l2_normalize(Tensor([0.0, 0.0]))
        with pytest.raises(DegenerateVectorError):
            l2_normalize(Tensor([1e-13, 0.0]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
    def test_unit_norm(self, values):
        v = np.asarray(values)
        if np.linalg.norm(v) <= 1e-12:
            return
        assert abs(np.linalg.norm(l2_normalize(Tensor(v)).data) - 1.0) < 1e-12


class TestCosine:
    def test_self(self):
        assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_diagonal(self):
        assert abs(cosine_similarity([1.0, 0.0], [1.0, 1.0]) - 1.0 / math.sqrt(2.0)) < 1e-15

    def test_degenerate(self):
        with pytest.raises(DegenerateVectorError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_mismatched(self):
        with pytest.raises(DimensionError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_clamped(self):
        v = np.array([0.1, 0.2, 0.3]) * 3.0
        c = cosine_similarity(v, v * 7.0)
        assert -1.0 <= c <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3),
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3),
        st.floats(0.01, 100), st.floats(0.01, 100),
    )
    def test_symmetric_and_scale_invariant(self, a, b, alpha, beta):
        a, b = np.asarray(a), np.asarray(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        c = cosine_similarity(a, b)
        assert cosine_similarity(b, a) == c
        assert abs(cosine_similarity(alpha * a, beta * b) - c) < 1e-12


class TestBackward:
    def test_constant_loss_zero_grads(self):
        tape = GradTape()
        w = Tensor([1.0, 2.0])
        loss = Tensor(3.0)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[w], [0.0, 0.0])

    def test_half_squared_norm(self, rng):
        x = Tensor(rng.standard_normal(5))
        tape = GradTape()
        sq = matmul_nt(_row(x, tape), _row(x, tape), tape)
        loss = mean(sq, tape)
        grads = tape.backward(loss)
        # loss = ||x||^2 so the gradient of half of it is x
        np.testing.assert_allclose(0.5 * grads[x], x.data, rtol=0, atol=1e-14)

    def test_consumed_tape(self):
        tape = GradTape()
        x = Tensor([1.0])
        loss = total(x, tape)
        tape.backward(loss)
        with pytest.raises(TapeConsumedError):
            tape.backward(loss)
        with pytest.raises(TapeConsumedError):
            total(x, tape)

    def test_non_scalar_loss(self):
        tape = GradTape()
        with pytest.raises(DimensionError):
            tape.backward(Tensor([1.0, 2.0]))

    def test_loss_seed_scales(self):
        x = Tensor([1.0, -2.0])
        t1, t2 = GradTape(), GradTape()
        g1 = t1.backward(total(x, t1))[x]
        g2 = t2.backward(total(x, t2), loss_seed=3.0)[x]
        np.testing.assert_array_equal(g2, 3.0 * g1)

    def test_reused_tensor_accumulates(self):
        x = Tensor([2.0, 3.0])
        tape = GradTape()
        loss = total(concat([x, x], tape=tape), tape)
        np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 2.0])

    def test_deterministic(self, rng):
        W, b, x = (Tensor(rng.standard_normal(s)) for s in ((4, 3), (4,), (3,)))

        def run():
            tape = GradTape()
            loss = total(gelu(linear_forward(W, b, x, tape), tape), tape)
            g = tape.backward(loss)
            return g[W].tobytes() + g[b].tobytes()

        assert run() == run()


def _row(x: Tensor, tape):
    from dppssl.numerics import reshape
    return reshape(x, (1, -1), tape)


def _weighted(t: Tensor, w: np.ndarray, tape):
    """Scalar ``sum(w * t)`` for a vector ``t``."""
    return total(matmul_nt(_row(t, tape), Tensor(w[None]), tape), tape)


def _check(build, inputs, h=1e-6, tol=1e-5):
    """Backward through ``build`` vs central differences on every input."""
    tape = GradTape()
    tensors = [Tensor(a) for a in inputs]
    loss = build(*tensors, tape=tape)
    grads = tape.backward(loss)
    for k, arr in enumerate(inputs):
        def f(v, k=k):
            args = [Tensor(v) if j == k else t for j, t in enumerate(tensors)]
            return build(*args, tape=None).item()
        fd = finite_difference_gradient(f, arr, h)
        assert relative_error(grads[tensors[k]], fd) < tol


def _random_norm(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v) * rng.uniform(0.1, 10.0)


class TestGradientOps:
    """Every differentiable op against finite differences (100 seeded trials)."""

    @pytest.mark.parametrize("seed", range(100))
    def test_all_ops(self, seed):
        rng = np.random.default_rng(seed)
        probe = rng.standard_normal(4)

        def lin(W, b, x, tape):
            return _weighted(linear_forward(W, b, x, tape), probe, tape)

        _check(lin, [_random_norm(rng, (4, 3)), _random_norm(rng, 4), _random_norm(rng, 3)])

        def act(x, tape):
            return _weighted(gelu(x, tape), probe, tape)

        _check(act, [_random_norm(rng, 4)])

        def norm(v, tape):
            return _weighted(l2_normalize(v, tape), probe, tape)

        _check(norm, [_random_norm(rng, 4)])

        def lse(a, tape):
            mask = np.array([[True, False, True], [True, True, True]])
            return total(logsumexp_rows(a, mask, tape), tape)

        _check(lse, [_random_norm(rng, (2, 3))])

        def gath(a, tape):
            return _weighted(gather(a, [0, 1, 1], [2, 0, 0], tape), probe[:3], tape)

        _check(gath, [_random_norm(rng, (2, 3))])

        cos = np.clip(rng.uniform(-0.9, 0.9, (2, 3)), -1, 1)

        def aam(c, tape):
            return total(additive_angular_margin(c, [1, 2], 0.2, 3.0, tape), tape)

        _check(aam, [cos])


class TestFiniteDifference:
    def test_sum_gives_ones(self, rng):
        x = rng.standard_normal((3, 2))
        np.testing.assert_allclose(finite_difference_gradient(np.sum, x), np.ones((3, 2)), atol=1e-8)

    def test_half_square(self):
        g = finite_difference_gradient(lambda v: 0.5 * float(v[0]) ** 2, np.array([2.0]), 1e-6)
        assert abs(g[0] - 2.0) < 1e-8

    def test_cosine_gradient_analytic(self, rng):
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        c = a @ b / (na * nb)
        analytic = b / (na * nb) - c * a / na ** 2
        fd = finite_difference_gradient(lambda v: cosine_similarity(v, b), a)
        np.testing.assert_allclose(fd, analytic, rtol=0, atol=1e-6)

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(np.sum, np.zeros(2), h=0.0)

    def test_input_not_mutated(self):
        x = np.array([1.0, 2.0])
        finite_difference_gradient(np.sum, x)
        np.testing.assert_array_equal(x, [1.0, 2.0])
