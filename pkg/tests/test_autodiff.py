import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nisurf import autodiff as ad
from nisurf.autodiff import Dual, InvalidNodeError, NumericError, ParameterStore, Tape

from conftest import central_difference


def grad_of(fn, x):
    tape = Tape()
    v = tape.leaf(x)
    (g,) = tape.gradients(fn(v), [v])
    return g


UNARY = {
    "sin": lambda x: ad.sin(x),
    "cos": lambda x: ad.cos(x),
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), 1.0)),
    "sqrt": lambda x: ad.sqrt(ad.add(ad.mul(x, x), 0.5)),
    "power": lambda x: ad.power(ad.add(ad.mul(x, x), 1.0), 1.5),
    "abs": lambda x: ad.absolute(x),
    "sigmoid": lambda x: ad.sigmoid(x, 3.0),
    "softplus": lambda x: ad.softplus(x, 4.0),
    "softplus_sharp": lambda x: ad.softplus(x, 100.0),
    "relu": lambda x: ad.relu(x),
    "clip": lambda x: ad.clip(x, -0.5, 0.5),
    "reciprocal": lambda x: ad.reciprocal(ad.add(ad.mul(x, x), 1.0)),
    "maximum": lambda x: ad.maximum(x, 0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_partials_match_finite_differences(name, rng):
    # keep away from kinks of abs/relu/clip/maximum
    x = rng.uniform(-1, 1, 7)
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.3, x)
    x = np.where(np.abs(x - 0.1) < 0.05, 0.3, x)
    fn = UNARY[name]
    h = 1e-3 if name == "softplus_sharp" else 1e-5
    g = grad_of(lambda v: ad.vsum(fn(v)), x)
    fd = central_difference(lambda y: float(np.sum(fn(y))), x, h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_partials_with_broadcasting(name, rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    fn = BINARY[name]
    tape = Tape()
    va, vb = tape.leaf(a), tape.leaf(b)
    ga, gb = tape.gradients(ad.vsum(fn(va, vb)), [va, vb])
    np.testing.assert_allclose(ga, central_difference(lambda y: float(np.sum(fn(y, b))), a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central_difference(lambda y: float(np.sum(fn(a, y))), b), rtol=1e-6, atol=1e-9)


def test_structural_ops_match_finite_differences(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))

    def fn(v):
        y = ad.matmul(v, w)
        y = ad.concat([y, ad.getitem(v, (slice(None), slice(None), slice(0, 2)))], axis=-1)
        y = ad.moveaxis(y, 0, -1)
        y = ad.reshape(y, (3, -1))
        y = ad.getitem(y, (np.array([0, 2, 2]),))
        y = ad.where(np.arange(14) % 2 == 0, y, ad.mul(y, 3.0))
        return ad.vsum(ad.mul(ad.vsum(y, axis=-1), np.array([1.0, -2.0, 0.5])))

    g = grad_of(fn, x)
    np.testing.assert_allclose(g, central_difference(lambda y: float(fn(y)), x), rtol=1e-6, atol=1e-8)


def test_exclusive_cumprod_matches_product_form_and_handles_zero_factors(rng):
    x = rng.uniform(0, 1, (3, 6))
    x[1, 2] = 0.0
    out = ad.exclusive_cumprod(x)
    oracle = np.array([[np.prod(r[:i]) for i in range(6)] for r in x])
    np.testing.assert_allclose(out, oracle, rtol=1e-14)
    c = rng.normal(size=(3, 6))
    g = grad_of(lambda v: ad.vsum(ad.mul(ad.exclusive_cumprod(v), c)), x)
    fd = central_difference(lambda y: float(np.sum(ad.exclusive_cumprod(y) * c)), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)
    assert np.all(np.isfinite(g))


def test_simple_polynomial_gradient():
    tape = Tape()
    theta = tape.leaf(np.array([3.0, 2.0]))
    loss = ad.mul(ad.mul(ad.getitem(theta, 0), ad.getitem(theta, 0)), ad.getitem(theta, 1))
    (g,) = tape.gradients(loss, [theta])
    np.testing.assert_allclose(g, [12.0, 9.0])


def test_spatial_eval_reproduces_closed_form_gradient(rng):
    x = rng.normal(size=(50, 3))

    def fn(d):
        r2 = ad.vsum(ad.mul(d, d), axis=-1)
        return ad.add(ad.sin(ad.getitem(d, (Ellipsis, 0))), ad.mul(r2, ad.getitem(d, (Ellipsis, 2))))

    val, grad = ad.spatial_eval(fn, x)
    r2 = np.sum(x * x, axis=-1)
    expect = 2 * x * x[:, 2:3]
    expect[:, 0] += np.cos(x[:, 0])
    expect[:, 2] += r2
    np.testing.assert_allclose(val, np.sin(x[:, 0]) + r2 * x[:, 2], rtol=1e-12)
    np.testing.assert_allclose(grad, expect, rtol=1e-10, atol=1e-12)


def test_mixed_second_derivative_through_dual_on_tape(rng):
    # d/dtheta of |grad_x f|^2 for f = softplus(w . x)
    x = rng.normal(size=(5, 3))
    w0 = rng.normal(size=(3, 1))

    def loss_of(w_arr):
        tape = Tape()
        w = tape.leaf(w_arr)
        _, g = ad.spatial_eval(lambda d: ad.softplus(ad.matmul(d, w), 2.0), x)
        loss = ad.vsum(ad.mul(g, g))
        return tape, w, loss

    tape, w, loss = loss_of(w0)
    (g,) = tape.gradients(loss, [w])
    fd = central_difference(lambda y: float(loss_of(y)[2].value), w0)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_backward_is_deterministic_on_replay(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=20))
    loss = ad.vsum(ad.sin(ad.mul(x, x)))
    g1 = tape.gradients(loss, [x])[0]
    g2 = tape.gradients(loss, [x])[0]
    assert g1.tobytes() == g2.tobytes()


def test_gradient_errors():
    tape, other = Tape(), Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(InvalidNodeError):
        tape.gradients(x, [x])
    with pytest.raises(InvalidNodeError):
        other.gradients(ad.vsum(x), [x])
    y = tape.leaf(np.array([0.0]))
    with pytest.raises(NumericError):
        tape.gradients(ad.vsum(ad.sqrt(y)), [y])


def test_mark_and_truncate_bound_tape_growth():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    mark = tape.mark()
    for _ in range(3):
        ad.vsum(ad.mul(x, 2.0))
    assert len(tape) > mark
    tape.truncate(mark)
    assert len(tape) == mark
    assert tape.kind(x.node) == "leaf"


def test_parameter_store_layout_and_backward(rng):
    store = ParameterStore()
    store.add("a", rng.normal(size=(2, 3)))
    store.add("b", rng.normal(size=4))
    store.check()
    assert len(store) == 10 and store.names() == ["a", "b"]
    with pytest.raises(KeyError):
        store.add("a", [1.0])
    tape = Tape()
    p = store.bind(tape)
    loss = ad.add(ad.vsum(ad.mul(p["a"], p["a"])), ad.vsum(p["b"]))
    g = ad.backward(loss, p)
    np.testing.assert_allclose(g[store.slice_of("a")], 2 * store.view("a").ravel())
    np.testing.assert_allclose(g[store.slice_of("b")], 1.0)


def test_untaped_calls_return_plain_arrays():
    out = ad.softplus(ad.linear(np.ones((2, 3)), np.ones((3, 2)), np.zeros(2)), 10.0)
    assert isinstance(out, np.ndarray)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(0.2, 5.0))
def test_chain_of_ops_matches_finite_differences(xs, scale):
    x = np.array(xs)
    fn = lambda v: ad.vsum(ad.mul(ad.sigmoid(v, scale), ad.cos(v)))
    g = grad_of(fn, x)
    fd = central_difference(lambda y: float(fn(y)), x, 1e-4)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_dual_arithmetic_and_gradient_layout():
    x = np.array([[1.0, 2.0, 3.0]])
    d = Dual(x, np.eye(3).reshape(3, 1, 3))
    f = ad.vsum(ad.mul(d, d), axis=-1)
    np.testing.assert_allclose(f.gradient(), 2 * x)
