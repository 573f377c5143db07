import numpy as np
import pytest
import scipy.sparse as sp

from petkit import autodiff as ad
from petkit.autodiff import Adam, Parameter, Tape, Tensor


def fd_gradient(loss_fn, param: Parameter, indices, h=1e-6):
    """Central-difference oracle for d loss / d param at chosen entries."""
    grads = []
    flat = param.data.ravel()
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + h
        hi = loss_fn()
        flat[idx] = orig - h
        lo = loss_fn()
        flat[idx] = orig
        grads.append((hi - lo) / (2 * h))
    return np.array(grads)


def check_param(loss_builder, param, n_samples=6, rtol=1e-6, seed=0):
    """Compare tape gradients against finite differences on random entries."""
    param.grad = None
    with Tape() as tape:
        loss = loss_builder()
        tape.backward(loss)
    analytic = param.grad.ravel().copy()
    rng = np.random.default_rng(seed)
    idx = rng.choice(param.data.size, size=min(n_samples, param.data.size),
                     replace=False)
    fd = fd_gradient(lambda: loss_builder().item(), param, idx)
    denom = np.abs(analytic[idx]) + 1e-8
    assert np.all(np.abs(analytic[idx] - fd) / denom <= rtol), \
        f"analytic {analytic[idx]} vs fd {fd}"


class TestElementwise:
    def test_add_mul_div_with_broadcasting(self):
        rng = np.random.default_rng(1)
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(1, 4)) + 3.0)

        def loss():
            return ad.tsum(ad.div(ad.mul(ad.add(a, b), a), b))

        check_param(loss, a, rtol=1e-5)
        check_param(loss, b, rtol=1e-5)

    def test_pointwise_nonlinearities(self):
        rng = np.random.default_rng(2)
        x = Parameter(rng.normal(size=(5, 5)))

        def loss():
            y = ad.silu(x)
            z = ad.sigmoid(y)
            return ad.tsum(ad.mul(z, ad.exp(ad.mul(x, 0.1))))

        check_param(loss, x, rtol=1e-5)

    def test_log_sqrt_power(self):
        rng = np.random.default_rng(3)
        x = Parameter(rng.uniform(0.5, 2.0, size=(4,)))

        def loss():
            return ad.tsum(ad.add(ad.log(x), ad.add(ad.sqrt(x), ad.power(x, 3))))

        check_param(loss, x, rtol=1e-5)

    def test_clamp_min_subgradient(self):
        x = Parameter(np.array([-1.0, 0.5, 2.0]))
        with Tape() as tape:
            loss = ad.tsum(ad.clamp_min(x, 0.0))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


class TestShapes:
    def test_reshape_getitem_concat(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(2, 6)))

        def loss():
            a = ad.reshape(x, (3, 4))
            b = a[1:, :2]
            c = ad.concat([b, ad.mul(b, 2.0)], axis=1)
            return ad.tsum(ad.mul(c, c))

        check_param(loss, x, rtol=1e-5)

    def test_mean_with_axis(self):
        rng = np.random.default_rng(5)
        x = Parameter(rng.normal(size=(3, 4, 5)))

        def loss():
            return ad.tsum(ad.tmean(x, axis=2))

        with Tape() as tape:
            tape.backward(loss())
        np.testing.assert_allclose(x.grad, np.full((3, 4, 5), 1 / 5))


class TestMatmulConv:
    def test_linear_layer_closed_form(self):
        # gradient of ||W x - y||^2 is 2 (W x - y) x^T
        rng = np.random.default_rng(6)
        W = Parameter(rng.normal(size=(3, 4)))
        x = rng.normal(size=(4, 1))
        y = rng.normal(size=(3, 1))
        with Tape() as tape:
            r = ad.sub(ad.matmul(W, Tensor(x)), Tensor(y))
            loss = ad.tsum(ad.mul(r, r))
            tape.backward(loss)
        expected = 2.0 * (W.data @ x - y) @ x.T
        np.testing.assert_allclose(W.grad, expected, rtol=1e-12)

    def test_matmul_fd(self):
        rng = np.random.default_rng(7)
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))

        def loss():
            return ad.tsum(ad.power(ad.matmul(a, b), 2))

        check_param(loss, a, rtol=1e-5)
        check_param(loss, b, rtol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d_fd(self, stride, padding):
        rng = np.random.default_rng(8)
        x = Parameter(rng.normal(size=(2, 3, 6, 6)))
        w = Parameter(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        b = Parameter(rng.normal(size=(4,)))

        def loss():
            out = ad.conv2d(x, w, b, stride=stride, padding=padding)
            return ad.tsum(ad.mul(out, out))

        check_param(loss, x, rtol=1e-4)
        check_param(loss, w, rtol=1e-4)
        check_param(loss, b, rtol=1e-4)

    def test_upsample_fd(self):
        rng = np.random.default_rng(9)
        x = Parameter(rng.normal(size=(1, 2, 3, 3)))

        def loss():
            return ad.tsum(ad.power(ad.upsample_nearest2x(x), 2))

        check_param(loss, x, rtol=1e-5)

    def test_group_norm_fd(self):
        rng = np.random.default_rng(10)
        x = Parameter(rng.normal(size=(2, 4, 3, 3)))
        gamma = Parameter(rng.uniform(0.5, 1.5, size=(4,)))
        beta = Parameter(rng.normal(size=(4,)))

        def loss():
            out = ad.group_norm(x, 2, gamma, beta)
            return ad.tsum(ad.mul(out, ad.silu(out)))

        check_param(loss, x, rtol=1e-4)
        check_param(loss, gamma, rtol=1e-4)
        check_param(loss, beta, rtol=1e-4)


class TestSparseAndPassthrough:
    def test_spmv_adjoint_gradient(self):
        rng = np.random.default_rng(11)
        dense = rng.uniform(0, 1, size=(5, 7)) * (rng.uniform(size=(5, 7)) > 0.5)
        A = sp.csr_matrix(dense)
        x = Parameter(rng.normal(size=7))
        cot = rng.normal(size=5)
        with Tape() as tape:
            out = ad.spmv(A, x)
            tape.backward(out, cot)
        np.testing.assert_allclose(x.grad, dense.T @ cot, rtol=1e-12)

    def test_passthrough_identity_gradient(self):
        x = Parameter(np.array([1.0, 2.0, 3.0]))
        with Tape() as tape:
            out = ad.passthrough(x, lambda v: np.sort(v)[::-1] * 10)
            loss = ad.tsum(ad.mul(out, np.array([1.0, 2.0, 3.0])))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 2.0, 3.0])

    def test_detach_blocks_gradient(self):
        x = Parameter(np.ones(3))
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x.detach(), x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.ones(3))  # only the live branch


class TestTapeSemantics:
    def test_consumed_tape_raises(self):
        x = Parameter(np.ones(2))
        with Tape() as tape:
            loss = ad.tsum(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)

    def test_zero_cotangent_gives_zero_gradients(self):
        rng = np.random.default_rng(12)
        x = Parameter(rng.normal(size=(3, 3)))
        with Tape() as tape:
            out = ad.mul(ad.silu(x), 2.0)
            tape.backward(out, np.zeros((3, 3)))
        np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))

    def test_no_tape_means_no_recording(self):
        x = Parameter(np.ones(2))
        out = ad.mul(x, 3.0)
        assert not out.requires_grad
        assert x.grad is None

    def test_frozen_tensor_gets_no_gradient(self):
        x = Tensor(np.ones(2), requires_grad=False)
        y = Parameter(np.ones(2))
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, y))
            tape.backward(loss)
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, np.ones(2))


class TestAdam:
    def test_quadratic_converges(self):
        target = np.array([1.0, -2.0, 3.0])
        p = Parameter(np.zeros(3))
        opt = Adam([p], learning_rate=0.1)
        for _ in range(500):
            opt.zero_grad()
            with Tape() as tape:
                r = ad.sub(p, target)
                loss = ad.tsum(ad.mul(r, r))
                tape.backward(loss)
            opt.step()
        np.testing.assert_allclose(p.data, target, atol=1e-3)
