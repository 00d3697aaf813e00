"""Gradient and contract checks for the autodiff core.

Every primitive is checked against central finite differences at 64-bit
(step 1e-5, rel tol 1e-4) on >= 20 random instances; the convolution pair
is additionally checked with the adjoint inner-product identity.
"""

import numpy as np
import pytest

from dvbf import diffcore as dc

FD_STEP = 1e-5
FD_TOL = 1e-4


@pytest.fixture(autouse=True)
def _float64():
    with dc.precision("float64"):
        yield


def numeric_grad(f, x: np.ndarray, step=FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def check_grads(build, inputs, tol=FD_TOL):
    """Compare tape gradients of sum(build(*inputs)) against FD for each input."""
    tensors = [dc.parameter(x) for x in inputs]
    with dc.Tape() as tape:
        loss = dc.tsum(build(*tensors))
        tape.backward(loss)

    def scalar():
        return float(np.sum(build(*tensors).data))

    for t in tensors:
        fd = numeric_grad(scalar, t.data)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(np.max(np.abs(fd)), 1e-8)
        rel = np.max(np.abs(got - fd)) / denom
        assert rel < tol, f"rel err {rel:.2e}"


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert dc.sigmoid(dc.Tensor([0.0])).data[0] == 0.5

    def test_softplus_asymptote_no_overflow(self):
        v = dc.softplus(dc.Tensor([50.0])).data[0]
        assert abs(v - (50.0 + np.log1p(np.exp(-50.0)))) < 1e-12
        big = dc.softplus(dc.Tensor([1e4])).data[0]
        assert np.isfinite(big) and abs(big - 1e4) < 1e-8

    def test_log_domain_error(self):
        with pytest.raises(dc.DomainError):
            dc.log(dc.Tensor([1.0, 0.0]))

    def test_broadcast_rule_rejects_row_vector(self):
        a = dc.Tensor(np.ones((3, 4)))
        b = dc.Tensor(np.ones(4))
        with pytest.raises(dc.ShapeError):
            dc.add(a, b)

    def test_scalar_broadcast_ok(self):
        a = dc.Tensor(np.ones((3, 4)))
        out = dc.mul(a, dc.Tensor(2.0))
        assert np.all(out.data == 2.0)

    @pytest.mark.parametrize("op,positive", [
        (dc.relu, False), (dc.sigmoid, False), (dc.softplus, False),
        (dc.exp, False), (dc.log, True), (dc.square, False),
        (dc.tanh, False), (dc.sqrt, True),
    ])
    def test_unary_fd(self, op, positive):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=(3, 4))
            if positive:
                x = np.abs(x) + 0.5
            else:
                x += np.sign(x) * 0.05  # keep relu kinks away from FD step
            check_grads(op, [x])

    @pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div])
    def test_binary_fd(self, op):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.normal(size=(2, 5))
            b = rng.normal(size=(2, 5)) + 3.0  # away from zero for div
            check_grads(op, [a, b])

    def test_binary_scalar_fd(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.normal(size=(4, 3))
            s = np.array(rng.normal() + 2.5)
            check_grads(dc.mul, [a, s])
            check_grads(dc.div, [a, s])


class TestDenseAlgebra:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = dc.matmul(dc.Tensor(np.eye(2)), dc.Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_projector(self):
        p = dc.Tensor([[1.0, 0.0], [0.0, 0.0]])
        v = dc.Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(dc.matmul(p, v).data, [[5.0], [0.0]])

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))

    def test_matmul_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 2))
            check_grads(dc.matmul, [a, b])

    def test_linear_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.normal(size=(5, 3))
            w = rng.normal(size=(3, 2))
            b = rng.normal(size=2)
            check_grads(dc.linear, [x, w, b])

    def test_bmatvec_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=(4, 3, 2))
            v = rng.normal(size=(4, 2))
            check_grads(dc.bmatvec, [a, v])

    def test_bias_add_fd(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = rng.normal(size=(2, 3, 4))
            b = rng.normal(size=3)
            check_grads(lambda x, b: dc.bias_add(x, b, axis=1), [x, b])


class TestShapePlumbing:
    def test_sum_axis_fd(self):
        rng = np.random.default_rng(7)
        for axis in (None, 0, 1, (0, 2)):
            x = rng.normal(size=(2, 3, 4))
            check_grads(lambda t: dc.tsum(t, axis), [x])

    def test_reshape_concat_narrow_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.normal(size=(2, 6))
            b = rng.normal(size=(2, 3))
            check_grads(
                lambda a, b: dc.narrow(dc.concat([dc.reshape(a, (2, 6)), b], axis=1),
                                       axis=1, start=2, length=5),
                [a, b])

    def test_narrow_out_of_range(self):
        with pytest.raises(dc.ShapeError):
            dc.narrow(dc.Tensor(np.ones((2, 3))), axis=1, start=2, length=2)


class TestConv:
    def test_zero_input_zero_output(self):
        k = dc.Tensor(np.random.default_rng(0).normal(size=(4, 2, 3, 3)))
        x = dc.Tensor(np.zeros((2, 8, 8)))
        assert np.all(dc.conv2d(x, k, 2).data == 0)
        y = dc.Tensor(np.zeros((4, 4, 4)))
        assert np.all(dc.conv2d_transpose(y, k, 2).data == 0)

    def test_delta_kernel_identity(self):
        x = dc.Tensor(np.arange(9.0).reshape(1, 3, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(dc.conv2d(x, dc.Tensor(k), 1).data, x.data)
        np.testing.assert_allclose(dc.conv2d_transpose(x, dc.Tensor(k), 1).data, x.data)

    def test_output_size_ceil_rule(self):
        x = dc.Tensor(np.ones((1, 2, 7, 7)))
        k = dc.Tensor(np.ones((3, 2, 3, 3)))
        assert dc.conv2d(x, k, 2).data.shape == (1, 3, 4, 4)

    def test_stride_zero_rejected(self):
        with pytest.raises(dc.ShapeError):
            dc.conv2d(dc.Tensor(np.ones((1, 4, 4))), dc.Tensor(np.ones((1, 1, 3, 3))), 0)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(dc.ShapeError):
            dc.conv2d(dc.Tensor(np.ones((2, 4, 4))), dc.Tensor(np.ones((1, 3, 3, 3))), 1)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_adjoint_identity(self, stride):
        """<conv(x,K), y> == <x, conv_T(y,K)> to 1e-10 relative at 64-bit."""
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.normal(size=(2, 3, 4, 4))
            k = rng.normal(size=(5, 3, 3, 3))
            ho = -(-4 // stride)
            y = rng.normal(size=(2, 5, ho, ho))
            lhs = float(np.sum(dc.conv2d(dc.Tensor(x), dc.Tensor(k), stride).data * y))
            xt = dc.conv2d_transpose(dc.Tensor(y), dc.Tensor(k), stride).data
            assert xt.shape == x.shape
            rhs = float(np.sum(x * xt))
            assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-10

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d_fd(self, stride):
        rng = np.random.default_rng(10)
        for _ in range(10):
            x = rng.normal(size=(2, 8, 8))
            k = rng.normal(size=(3, 2, 3, 3))
            check_grads(lambda x, k: dc.conv2d(x, k, stride), [x, k])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d_transpose_fd(self, stride):
        rng = np.random.default_rng(11)
        for _ in range(10):
            y = rng.normal(size=(3, 4, 4))
            k = rng.normal(size=(3, 2, 3, 3))
            check_grads(lambda y, k: dc.conv2d_transpose(y, k, stride), [y, k])


class TestSampleReparam:
    def test_zero_noise_returns_mean(self):
        mean = dc.Tensor([1.0, -2.0])
        var = dc.Tensor([0.5, 0.25])
        out = dc.sample_reparam(mean, var, np.zeros(2))
        np.testing.assert_array_equal(out.data, mean.data)

    def test_zero_variance_eval_mode_only(self):
        mean = dc.parameter([1.0])
        var = dc.parameter([0.0])
        out = dc.sample_reparam(mean, var, np.zeros(1))  # no tape: allowed
        assert out.data[0] == 1.0
        with dc.Tape():
            with pytest.raises(dc.DomainError):
                dc.sample_reparam(mean, var, np.zeros(1))

    def test_fd(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            mean = rng.normal(size=(3,))
            var = np.abs(rng.normal(size=(3,))) + 0.3
            noise = rng.normal(size=(3,))
            check_grads(lambda m, v: dc.sample_reparam(m, v, noise), [mean, var])

    def test_monte_carlo_mean_gradient(self):
        """d/dmu E[(mu + sigma*eps)^2] = 2*mu, estimated over 1e5 fixed draws."""
        rng = np.random.default_rng(13)
        n = 100_000
        noise = rng.standard_normal(n)
        mean = dc.parameter(np.ones(n))
        var = dc.parameter(np.ones(n))
        with dc.Tape() as tape:
            z = dc.sample_reparam(mean, var, noise)
            loss = dc.tmean(dc.square(z))
            tape.backward(loss)
        est = float(np.sum(mean.grad))
        assert abs(est - 2.0) < 0.05


class TestTape:
    def test_backward_requires_scalar(self):
        x = dc.parameter(np.ones(3))
        with dc.Tape() as tape:
            y = dc.square(x)
            with pytest.raises(dc.ContractError):
                tape.backward(y)

    def test_backward_requires_tape(self):
        with pytest.raises(dc.ContractError):
            dc.backward(dc.Tensor(1.0))

    def test_no_nesting(self):
        with dc.Tape():
            with pytest.raises(dc.ContractError):
                with dc.Tape():
                    pass

    def test_diamond_accumulation(self):
        # f = x*y + x*z -> df/dx = y + z exactly
        x, y, z = dc.parameter(3.0), dc.parameter(5.0), dc.parameter(7.0)
        with dc.Tape() as tape:
            loss = dc.add(dc.mul(x, y), dc.mul(x, z))
            tape.backward(loss)
        assert float(x.grad) == 12.0

    def test_repeated_backward_bitwise_identical(self):
        rng = np.random.default_rng(14)
        w = dc.parameter(rng.normal(size=(4, 4)))
        x = dc.Tensor(rng.normal(size=(2, 4)))

        def run():
            w.zero_grad()
            with dc.Tape() as tape:
                loss = dc.tsum(dc.sigmoid(dc.matmul(x, w)))
                tape.backward(loss)
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_eval_mode_records_nothing(self):
        x = dc.parameter(np.ones(3))
        y = dc.square(x)
        assert not y.requires_grad and y.grad is None

    def test_detach_blocks_gradient(self):
        x = dc.parameter(2.0)
        with dc.Tape() as tape:
            y = dc.mul(x.detach(), x)
            tape.backward(y)
        assert float(x.grad) == 2.0  # only the non-detached factor


class TestComposites:
    def test_softmax_rows(self):
        x = dc.Tensor(np.array([[1.0, 1.0, 1.0], [10.0, 0.0, -10.0]]))
        s = dc.softmax_rows(x).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(s[0], 1 / 3, atol=1e-12)

    def test_softmax_fd(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            x = rng.normal(size=(3, 5))
            w = dc.Tensor(rng.normal(size=(3, 5)))  # sum(softmax) is constant
            check_grads(lambda t: dc.mul(dc.softmax_rows(t), w), [x])

    def test_expand_cols(self):
        col = dc.Tensor(np.array([[2.0], [3.0]]))
        out = dc.expand_cols(col, 4)
        assert out.data.shape == (2, 4)
        assert np.all(out.data[1] == 3.0)
