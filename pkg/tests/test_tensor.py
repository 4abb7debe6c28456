"""Tests for the autodiff tensor core."""

import itertools
import math

import numpy as np
import pytest

from gtfc import tensor as T
from gtfc.tensor import (
    DomainError,
    GradcheckReport,
    InvalidAxis,
    NonFiniteOutput,
    NotScalar,
    ShapeMismatch,
    TapeAlreadyConsumed,
    Tensor,
    gradcheck,
)


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, requires_grad=True):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=requires_grad)


@pytest.fixture(autouse=True)
def f64_default():
    """Finite-difference checks in this file need 64-bit tensors."""
    prev = T.get_default_dtype()
    T.set_default_dtype("f64")
    yield
    T.set_default_dtype(prev)


class TestElementwise:
    def test_swish_at_zero(self):
        assert T.swish(Tensor([0.0])).data[0] == 0.0

    def test_swish_at_one_matches_scalar_oracle(self):
        # oracle: evaluate 1 * (1 / (1 + e^-1)) directly
        expected = 1.0 / (1.0 + math.exp(-1.0))
        got = T.swish(Tensor([1.0])).data[0]
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_abs(self):
        np.testing.assert_array_equal(T.abs_(Tensor([-3.0, 4.0])).data, [3.0, 4.0])

    def test_binary_broadcast_shapes(self):
        out = T.add(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((4, 1))))
        assert out.shape == (2, 4, 3)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeMismatch):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))

    def test_div_by_exact_zero(self):
        with pytest.raises(DomainError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_pow_negative_base_fractional_exponent(self):
        with pytest.raises(DomainError):
            T.pow_(Tensor([-2.0]), 0.5)
        # integer exponents stay defined for negative bases
        np.testing.assert_allclose(T.pow_(Tensor([-2.0]), 2.0).data, [4.0])

    def test_dispatcher_matches_named_ops(self):
        a = Tensor([1.0, -2.0])
        b = Tensor([3.0, 4.0])
        np.testing.assert_array_equal(T.elementwise("add", a, b).data, T.add(a, b).data)
        np.testing.assert_array_equal(T.elementwise("abs", a).data, T.abs_(a).data)
        with pytest.raises(ValueError):
            T.elementwise("nope", a)

    def test_broadcast_equals_manual_tiling_exhaustive(self):
        # all compatible shape pairs up to rank 4, extents <= 3
        rng = np.random.default_rng(7)
        shapes = [()]
        for rank in range(1, 5):
            shapes += list(itertools.product((1, 2, 3), repeat=rank))
        for sa, sb in itertools.product(shapes, shapes):
            try:
                target = np.broadcast_shapes(sa, sb)
            except ValueError:
                continue
            a = rng.uniform(-2, 2, sa)
            b = rng.uniform(-2, 2, sb)
            at = np.broadcast_to(a, target).copy()
            bt = np.broadcast_to(b, target).copy()
            for op in ("add", "mul"):
                got = T.elementwise(op, Tensor(a), Tensor(b)).data
                want = T.elementwise(op, Tensor(at), Tensor(bt)).data
                np.testing.assert_array_equal(got, want)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (4, 2))
        report = gradcheck(lambda x, y: T.reduce_sum(T.matmul(x, y)), [a, b], step=1e-5, tol=1e-6)
        assert report.passed, report


class TestReduce:
    def test_sum_all(self):
        assert T.reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]])).data == 10.0

    def test_mean_axis(self):
        assert T.reduce_mean(Tensor([3.0, 4.0]), axes=0).data == 3.5

    def test_l2norm_three_four_five(self):
        assert T.l2norm(Tensor([3.0, 4.0])).data == pytest.approx(5.0, abs=1e-12)

    def test_keepdims(self):
        out = T.reduce_sum(Tensor(np.ones((2, 3))), axes=1, keepdims=True)
        assert out.shape == (2, 1)

    def test_invalid_axis(self):
        with pytest.raises(InvalidAxis):
            T.reduce_sum(Tensor(np.ones((2, 3))), axes=2)
        with pytest.raises(InvalidAxis):
            T.reduce_sum(Tensor(np.ones((2, 3))), axes=(0, 0))

    def test_dispatcher(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.reduce("sum", a, axes=0).data, [4.0, 6.0])
        np.testing.assert_array_equal(T.reduce("max", a, axes=1).data, [2.0, 4.0])


class TestSoftmax:
    def test_uniform_at_equal_logits(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_single_element(self):
        for c in (-5.0, 0.0, 123.0):
            np.testing.assert_allclose(T.softmax(Tensor([c]), axis=0).data, [1.0])

    def test_large_logits_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=(4, 7)) * 10
            y = T.softmax(Tensor(x), axis=1).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
            assert (y >= 0).all()
            shifted = T.softmax(Tensor(x + 3.21), axis=1).data
            np.testing.assert_allclose(y, shifted, atol=1e-9)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        T.reduce_sum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalar):
            (x * x).backward()

    def test_tape_consumed(self):
        x = Tensor([2.0], requires_grad=True)
        loss = T.reduce_sum(x * x)
        loss.backward()
        with pytest.raises(TapeAlreadyConsumed):
            loss.backward()

    def test_no_recorded_ops_leaves_grads_zero(self):
        x = Tensor([1.0], requires_grad=True)
        loss = Tensor([5.0])
        loss.backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_independent_graphs_accumulate(self):
        x = Tensor([2.0], requires_grad=True)
        T.reduce_sum(x * x).backward()
        T.reduce_sum(x * 3.0).backward()
        np.testing.assert_allclose(x.grad, [4.0 + 3.0])

    def test_sum_of_two_graphs_accumulates_additively(self):
        x = Tensor([2.0], requires_grad=True)
        loss = T.reduce_sum(x * x) + T.reduce_sum(x * 3.0)
        loss.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_shared_subexpression(self):
        x = Tensor([1.5], requires_grad=True)
        y = x * x
        loss = T.reduce_sum(y + y)
        loss.backward()
        np.testing.assert_allclose(x.grad, [2 * 2 * 1.5])

    def test_no_grad_blocks_recording(self):
        x = Tensor([2.0], requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad
        assert y._vjp is None


class TestGradcheck:
    def test_linear_function_exact(self):
        # at x = 0 every perturbed sum is exactly representable, so the
        # central difference of a linear functional is bitwise exact
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        report = gradcheck(T.reduce_sum, x)
        assert report.max_rel_error == 0.0

    def test_linear_function_near_exact_any_x(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        report = gradcheck(T.reduce_sum, x, tol=1e-9)
        assert report.passed, report

    def test_sum_tanh(self):
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (3, 4))
        report = gradcheck(lambda t: T.reduce_sum(T.tanh(t)), x, step=1e-5, tol=1e-6)
        assert report.passed, report

    @pytest.mark.parametrize("seed", range(10))
    def test_elementwise_ops_ten_seeds(self, seed):
        rng = np.random.default_rng(seed)
        a = rand_tensor(rng, (2, 3))
        b = rand_tensor(rng, (2, 3), lo=0.5, hi=2.0)

        def f(x, y):
            z = T.swish(x) + T.sigmoid(y) * T.tanh(x) - T.div(x, y)
            z = z + T.exp(x * 0.3) + T.log(y) + T.elu(x) + T.relu(x)
            z = z + T.pow_(T.abs_(x), 1.7)
            return T.reduce_sum(z)

        report = gradcheck(f, [a, b], step=1e-5, tol=1e-6)
        assert report.passed, report

    @pytest.mark.parametrize("seed", range(10))
    def test_reductions_and_softmax_ten_seeds(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = rand_tensor(rng, (3, 5))

        def f(x):
            s = T.reduce_sum(T.softmax(x, axis=1) * x)
            m = T.reduce_mean(x, axes=0)
            return s + T.reduce_sum(m) + T.l2norm(x) + T.reduce_sum(T.reduce_max(x, axes=1))

        report = gradcheck(f, a, step=1e-5, tol=1e-6)
        assert report.passed, report

    @pytest.mark.parametrize("seed", range(5))
    def test_shape_ops(self, seed):
        rng = np.random.default_rng(200 + seed)
        a = rand_tensor(rng, (2, 3, 4))

        def f(x):
            y = T.reshape(x, (6, 4))
            z = T.transpose(y, (1, 0))
            w = T.narrow(z, 0, 1, 2)
            c = T.concat([w, w * 2.0], axis=1)
            return T.reduce_sum(c * c)

        report = gradcheck(f, a, step=1e-5, tol=1e-6)
        assert report.passed, report

    def test_nonfinite_output_detected(self):
        x = Tensor([0.5], requires_grad=True)
        with pytest.raises(NonFiniteOutput):
            gradcheck(lambda t: T.reduce_sum(t * float("nan")), x)

    def test_report_fields(self):
        x = Tensor([1.0], requires_grad=True)
        report = gradcheck(lambda t: T.reduce_sum(t * t), x)
        assert isinstance(report, GradcheckReport)
        assert report.worst[0] == 0 and report.worst[1] == 0


class TestTensorBasics:
    def test_shape_data_consistency(self):
        t = Tensor(np.ones((2, 3)))
        assert t.size == 6 and math.prod(t.shape) == 6

    def test_grad_buffer_matches_shape(self):
        t = Tensor(np.ones((2, 3)), requires_grad=True)
        assert t.grad.shape == t.shape
        np.testing.assert_array_equal(t.grad, 0.0)

    def test_scalar_wrapping_keeps_dtype(self):
        t = Tensor(np.ones(3, dtype=np.float32), dtype=np.float32)
        out = t * 2.0
        assert out.dtype == np.float32

    def test_precision_switch(self):
        T.set_default_dtype("f32")
        assert Tensor([1.0]).dtype == np.float32
        T.set_default_dtype("f64")
        assert Tensor([1.0]).dtype == np.float64


class TestGtf1:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.gtf"
        T.save_gtf1(path, arr)
        back = T.load_gtf1(path)
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.gtf"
        T.save_gtf1(path, np.zeros((2, 3), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"GTF1"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 3
        assert len(raw) == 24 + 4 * 6

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gtf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            T.load_gtf1(path)
