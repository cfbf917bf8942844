import math

import numpy as np
import pytest

from gainmap import autodiff as ad
from gainmap.autodiff import AutodiffError, Tape, Tensor, backward, gradient_check
from gainmap.checks import primitive_gradient_suite


def leaf(values, rg=True):
    return Tensor(np.asarray(values, dtype=float), requires_grad=rg)


class TestForwardExamples:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        out = ad.matmul(Tensor(np.eye(4)), Tensor(a))
        assert np.array_equal(out.value, a)

    def test_softmax_of_constant_is_uniform(self):
        out = ad.softmax(Tensor(np.full((3, 5), 2.7)))
        assert out.value == pytest.approx(np.full((3, 5), 0.2), abs=1e-15)

    def test_softmax_handles_minus_inf(self):
        row = np.array([[1.0, -np.inf, 2.0]])
        out = ad.softmax(Tensor(row))
        assert out.value[0, 1] == 0.0
        assert out.value.sum() == pytest.approx(1.0, abs=1e-15)

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(2.0, 3.0, size=(6, 8)))
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0)
        assert out.value.mean(axis=-1) == pytest.approx(np.zeros(6), abs=1e-12)
        assert out.value.var(axis=-1) == pytest.approx(np.ones(6), abs=1e-12)

    def test_gelu_endpoints(self):
        out = ad.gelu(Tensor(np.array([0.0, 30.0, -30.0])))
        assert out.value[0] == 0.0
        assert out.value[1] == pytest.approx(30.0, abs=1e-12)
        assert out.value[2] == pytest.approx(0.0, abs=1e-12)


class TestBackwardAnalytic:
    def test_quadratic_gradient(self):
        # d/dx (x . x) = 2x
        rng = np.random.default_rng(2)
        x = leaf(rng.normal(size=(7,)).reshape(1, 7))
        with Tape() as tape:
            y = ad.tensor_sum(ad.mul(x, x))
        backward(tape, y)
        assert x.grad == pytest.approx(2.0 * x.value, abs=1e-12)

    def test_affine_gelu_scalar_graph(self):
        # y = gelu(w * x + b); hand-derived chain rule via the gaussian cdf/pdf.
        w, b = leaf([[1.3]]), leaf([0.4])
        x = 0.7
        with Tape() as tape:
            y = ad.tensor_sum(ad.gelu(ad.add(ad.mul(w, x), b)))
        backward(tape, y)
        z = 1.3 * x + 0.4
        cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
        pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        dy_dz = cdf + z * pdf
        assert w.grad[0, 0] == pytest.approx(dy_dz * x, abs=1e-12)
        assert b.grad[0] == pytest.approx(dy_dz, abs=1e-12)

    def test_fanout_accumulates(self):
        # y = x*x + x  =>  dy/dx = 2x + 1
        x = leaf([3.0, -1.5])
        with Tape() as tape:
            y = ad.tensor_sum(ad.add(ad.mul(x, x), x))
        backward(tape, y)
        assert x.grad == pytest.approx(2.0 * x.value + 1.0, abs=1e-12)

    def test_broadcast_bias_gradient(self):
        a = leaf(np.ones((3, 4)))
        bias = leaf(np.zeros(4))
        with Tape() as tape:
            y = ad.tensor_sum(ad.add(a, bias))
        backward(tape, y)
        assert bias.grad == pytest.approx(np.full(4, 3.0), abs=1e-15)

    def test_unused_leaf_reads_as_zero(self):
        x, unused = leaf([1.0]), leaf([2.0])
        with Tape() as tape:
            y = ad.tensor_sum(ad.mul(x, x))
        backward(tape, y)
        assert unused.grad is None
        assert np.array_equal(unused.grad_or_zeros(), np.zeros(1))

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        x = leaf(rng.normal(size=(4, 4)))
        with Tape() as tape:
            y = ad.softmax(ad.matmul(x, x))
        g1 = rng.normal(size=y.value.shape)
        g2 = rng.normal(size=y.value.shape)
        backward(tape, y, g1)
        grad1 = x.grad.copy()
        x.zero_grad()
        backward(tape, y, g2)
        grad2 = x.grad.copy()
        x.zero_grad()
        backward(tape, y, g1 + g2)
        assert np.max(np.abs(x.grad - (grad1 + grad2))) <= 1e-12

    def test_repeated_backward_accumulates(self):
        x = leaf([2.0])
        with Tape() as tape:
            y = ad.tensor_sum(ad.mul(x, x))
        backward(tape, y)
        backward(tape, y)
        assert x.grad == pytest.approx(2.0 * 2.0 * x.value, abs=1e-12)


class TestErrors:
    def test_matmul_shape_mismatch_names_primitive(self):
        with pytest.raises(AutodiffError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_add_shape_mismatch(self):
        with pytest.raises(AutodiffError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_backward_without_forward(self):
        x = leaf([1.0])
        tape = Tape()
        with pytest.raises(AutodiffError, match="backward"):
            backward(tape, x)

    def test_backward_on_foreign_tape(self):
        x = leaf([1.0])
        with Tape():
            y = ad.mul(x, x)
        with Tape() as other:
            ad.mul(x, x)
        with pytest.raises(AutodiffError):
            backward(other, y)

    def test_seed_gradient_shape_checked(self):
        x = leaf(np.zeros((2, 2)))
        with Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(AutodiffError, match="seed"):
            backward(tape, y, np.zeros(3))

    def test_gradient_check_requires_scalar(self):
        x = leaf(np.zeros((2,)))
        with pytest.raises(AutodiffError, match="scalar"):
            gradient_check(lambda ps: ad.mul(ps[0], 1.0), [x])


class TestDeterminism:
    def test_bit_identical_forward(self):
        rng = np.random.default_rng(4)
        a_val = rng.normal(size=(8, 8))

        def run():
            a = Tensor(a_val.copy())
            return ad.softmax(ad.matmul(a, a)).value

        assert np.array_equal(run(), run())


class TestGradientCheck:
    def test_primitive_suite_passes(self):
        name, ok, detail = primitive_gradient_suite(seed=1)
        assert ok, detail

    def test_detects_wrong_fd_function(self):
        # An fd function that disagrees with the graph must fail the check.
        x = leaf([1.0, 2.0])

        def fn(params):
            return ad.tensor_sum(ad.mul(params[0], params[0]))

        def crooked(params):
            return float((params[0].value ** 2).sum() + 0.1 * params[0].value.sum())

        report = gradient_check(fn, [x], fd_fn=crooked)
        assert not report.passed
        assert report.failures

    def test_no_tape_runs_plain(self):
        # Outside a tape, ops still compute values and record nothing.
        x = leaf([1.0, 2.0])
        y = ad.mul(x, x)
        assert y.value == pytest.approx([1.0, 4.0])
        assert y.requires_grad
