import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ifol import autodiff as ad


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def value(f):
    return lambda x: float(ad.primal(f(x)))


SCALAR_FUNCS = {
    "poly": lambda x: ad.sum(x * x * x - 2.0 * x),
    "trig": lambda x: ad.sum(ad.sin(x) * ad.cos(2.0 * x)),
    "exp_log": lambda x: ad.sum(ad.exp(0.3 * x) + ad.log(x * x + 1.0)),
    "div_pow": lambda x: ad.sum(ad.power(x, 4) / (1.0 + x * x)),
    "reshape_matmul": lambda x: ad.sum(ad.matmul(ad.reshape(x, (2, 3)), ad.transpose(ad.reshape(x, (2, 3))))),
    "where_gather": lambda x: ad.sum(ad.where(np.array([1, 0, 1, 0, 1, 0], bool), x * x, ad.gather(x, np.array([5, 4, 3, 2, 1, 0])))),
}


@pytest.mark.parametrize("name", sorted(SCALAR_FUNCS))
@given(arrays(np.float64, 6, elements=st.floats(-1.5, 1.5)))
def test_gradient_matches_fd(name, x):
    f = SCALAR_FUNCS[name]
    _, g = ad.grad(f, x)
    np.testing.assert_allclose(g, fd_grad(value(f), x), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("name", sorted(SCALAR_FUNCS))
def test_hvp_matches_fd_of_gradient(name, rng):
    f = SCALAR_FUNCS[name]
    x, v = rng.uniform(-1, 1, 6), rng.standard_normal(6)
    h = 1e-6
    gp = ad.grad(f, x + h * v)[1]
    gm = ad.grad(f, x - h * v)[1]
    np.testing.assert_allclose(ad.hvp(f, x, v), (gp - gm) / (2 * h), rtol=1e-6, atol=1e-7)


def test_mixed_hvp_two_arguments(rng):
    f = lambda a, b: ad.sum(ad.sin(a * b) * a)  # noqa: E731
    a, b, ta = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
    _, grads, hv = ad.grad_and_hvp(f, (a, b), (ta, None))
    h = 1e-6
    gp = ad.grad(f, a + h * ta, b)[1]
    gm = ad.grad(f, a - h * ta, b)[1]
    for k in range(2):
        np.testing.assert_allclose(hv[k], (gp[k] - gm[k]) / (2 * h), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("batched", [False, True])
def test_sine_layer_gradients(batched, rng):
    eta = rng.uniform(-1, 1, (5, 2))
    shift_shape = (3, 1, 4) if batched else (4,)
    W0, s0 = rng.standard_normal((4, 2)) * 0.3, rng.standard_normal(shift_shape) * 0.1

    def f(W, s):
        return ad.sum(ad.sine_layer(eta, W, s, 5.0) * np.linspace(-1, 1, 4))

    _, (gW, gs) = ad.grad(f, W0, s0)
    np.testing.assert_allclose(gW, fd_grad(lambda W: float(ad.primal(f(W, s0))), W0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gs, fd_grad(lambda s: float(ad.primal(f(W0, s))), s0), rtol=1e-6, atol=1e-8)
    v = rng.standard_normal(s0.shape)
    hv = ad.grad_and_hvp(f, (W0, s0), (None, v))[2][1]
    h = 1e-6
    ref = (ad.grad(f, W0, s0 + h * v)[1][1] - ad.grad(f, W0, s0 - h * v)[1][1]) / (2 * h)
    np.testing.assert_allclose(hv, ref, rtol=1e-5, atol=1e-8)


def test_fast_sine_layer_close_to_double(rng):
    eta = rng.uniform(-1, 1, (50, 2))
    W, s = rng.standard_normal((8, 2)) * 0.1, rng.standard_normal(8) * 0.05
    slow = ad.sine_layer(eta, W, s, 30.0)
    fast = ad.sine_layer(eta, W, s, 30.0, fast=True)
    assert fast.dtype == np.float32
    np.testing.assert_allclose(fast, slow, atol=1e-5)


def test_stop_gradient_blocks_adjoint_but_not_tangent():
    f = lambda x: ad.sum(ad.stop_gradient(x) * x)  # noqa: E731
    x = np.array([2.0, 3.0])
    _, g = ad.grad(f, x)
    np.testing.assert_array_equal(g, x)
    # tangents pass, so the hvp is the Jacobian of the truncated gradient (= x)
    np.testing.assert_allclose(ad.hvp(f, x, np.array([1.0, 0.0])), [1.0, 0.0])
    g2 = lambda x: ad.sum(ad.primal(x) * x)  # noqa: E731
    np.testing.assert_allclose(ad.hvp(g2, x, np.array([1.0, 0.0])), [0.0, 0.0])


def test_unrolled_gradient_quadratic_closed_form():
    # loss = 0.5 a l^2 - b l ; K steps from l0 = 0 give l_K = (b/a)(1 - (1 - alpha a)^K)
    a0, b0, alpha, K = 1.7, 0.6, 0.3, 3
    loss = lambda a, b, l: ad.sum(0.5 * a * l * l - b * l)  # noqa: E731

    def composite(a, b):
        lk = b / a * (1 - (1 - alpha * a) ** K)
        return 0.5 * a * lk ** 2 - b * lk

    res = ad.unrolled_grad(loss, [np.array(a0), np.array(b0)], np.array(0.0), K, alpha)
    assert res.value == pytest.approx(composite(a0, b0), rel=1e-14)
    h = 1e-6
    da = (composite(a0 + h, b0) - composite(a0 - h, b0)) / (2 * h)
    db = (composite(a0, b0 + h) - composite(a0, b0 - h)) / (2 * h)
    assert float(res.grads[0]) == pytest.approx(da, rel=1e-8)
    assert float(res.grads[1]) == pytest.approx(db, rel=1e-8)
    fo = ad.unrolled_grad(loss, [np.array(a0), np.array(b0)], np.array(0.0), K, alpha, first_order=True)
    lk = res.latent
    assert float(fo.grads[0]) == pytest.approx(0.5 * lk ** 2, rel=1e-12)


def test_non_finite_detected():
    with pytest.raises(ad.EvaluationError), np.errstate(invalid="ignore"):
        ad.grad(lambda x: ad.sum(ad.log(x)), np.array([-1.0, 1.0]))


def test_non_scalar_output_rejected():
    with pytest.raises(ValueError):
        ad.grad(lambda x: x * 2.0, np.ones(3))


def test_dual_integer_power_exact():
    d = ad.Dual(np.array([1.5]), np.array([1.0]))
    p = d ** 3
    assert p.value[0] == 1.5 ** 3 and p.tangent[0] == 3 * 1.5 ** 2
