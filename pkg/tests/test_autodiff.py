import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qdistill import autodiff as ad
from qdistill.autodiff import GradientError, ShapeError, Tape, Tensor, finite_diff_gradient, grad, rel_error
from qdistill.gradcheck import check_primitives, fd_check

floats = st.floats(-3, 3, allow_nan=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_cube_first_and_second_derivative():
    x = leaf(2.0)
    with Tape():
        y = x * x * x
        (g,) = grad(y, [x], create_graph=True)
        (h,) = grad(g, [x])
    assert g.item() == pytest.approx(12.0)
    assert h.item() == pytest.approx(12.0)


def test_x_squared_gradient():
    x = leaf(3.0)
    with Tape():
        (g,) = grad(x * x, [x])
    assert g.item() == 6.0


def test_sum_of_squares():
    v = np.array([1.0, 2.0, 3.0])
    x = leaf(v)
    with Tape():
        (g,) = grad((x * x).sum(), [x])
    np.testing.assert_array_equal(g.data, 2 * v)


def test_add_broadcast_reduces_gradient():
    a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
    with Tape():
        ga, gb = grad((a + b).sum(), [a, b])
    np.testing.assert_array_equal(ga.data, np.ones((3, 4)))
    np.testing.assert_array_equal(gb.data, np.full(4, 3.0))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((5, 2)))


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((3, 4))) + Tensor(np.ones(3))


def test_non_scalar_loss_rejected():
    x = leaf(np.ones(3))
    with Tape(), pytest.raises(GradientError):
        grad(x * 2.0, [x])


def test_unreachable_leaf():
    x, y = leaf(1.0), leaf(2.0)
    with Tape():
        z = x * 3.0
        with pytest.raises(GradientError):
            grad(z, [y])
        (gy,) = grad(z, [y], allow_unused=True)
    np.testing.assert_array_equal(gy.data, 0.0)


def test_constant_but_connected_loss_gives_zero():
    x = leaf(np.ones(3))
    with Tape():
        (g,) = grad((x * 0.0).sum(), [x])
    np.testing.assert_array_equal(g.data, np.zeros(3))


def test_no_grad_records_nothing():
    x = leaf(2.0)
    with Tape() as tape:
        with ad.no_grad():
            _ = x * x
        assert len(tape.nodes) == 0


def test_division_by_near_zero_raises():
    x = leaf(np.array([1.0, 2.0]))
    with Tape(), pytest.raises(ZeroDivisionError):
        x / Tensor(np.array([1.0, 1e-301]))


def test_sqrt_at_zero_gradient_finite():
    x = leaf(np.zeros(3))
    with Tape():
        (g,) = grad(ad.sqrt(x).sum(), [x])
    assert np.all(np.isfinite(g.data))


def test_tape_signature_is_deterministic():
    def build():
        x = leaf(np.arange(4.0))
        with Tape() as t:
            y = ad.tanh(x * x).sum()
            grad(y, [x], create_graph=True)
        return t.signature()

    assert build() == build()


def test_double_backward_matches_finite_difference_of_gradient(rng):
    """d/dw of <grad_x f(x, w), v>, the structure of a hypergradient."""
    x0, w0, v = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)

    def inner_grad(w):
        x = leaf(x0)
        with Tape():
            (g,) = grad(ad.tanh(x * w).sum() + (x * x * w).sum(), [x])
        return g.data

    w = leaf(w0)
    x = leaf(x0)
    with Tape():
        (g,) = grad(ad.tanh(x * w).sum() + (x * x * w).sum(), [x], create_graph=True)
        (hw,) = grad((g * Tensor(v)).sum(), [w])
    eps = 1e-6
    num = np.array([
        ((inner_grad(w0 + eps * e) - inner_grad(w0 - eps * e)) @ v) / (2 * eps) for e in np.eye(4)
    ])
    assert rel_error(hw.data, num) < 1e-6


def test_every_primitive_passes_finite_differences():
    failing = [r for r in check_primitives(seed=7) if not r.passed]
    assert not failing, [r.line() for r in failing]


def test_broken_backward_rule_is_named(monkeypatch):
    monkeypatch.setattr(ad.Tanh, "backward", lambda self, g, needs: [g * 2.0])
    results = {r.name: r for r in check_primitives(seed=0)}
    assert not results["primitive:tanh"].passed
    assert results["primitive:exp"].passed


@given(arrays(np.float64, st.integers(1, 6), elements=floats), arrays(np.float64, st.integers(1, 6), elements=floats))
def test_product_rule_property(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    x, y = leaf(a), leaf(b)
    with Tape():
        gx, gy = grad((x * y).sum(), [x, y])
    np.testing.assert_array_equal(gx.data, b)
    np.testing.assert_array_equal(gy.data, a)


@given(arrays(np.float64, (2, 3), elements=floats))
def test_linearity_of_grad(a):
    x = leaf(a)
    f = lambda t: ad.sin(t).sum()  # noqa: E731
    with Tape():
        (g1,) = grad(f(x), [x])
        (g3,) = grad(f(x) * 3.0 + f(x), [x])
    np.testing.assert_allclose(g3.data, 4 * g1.data, rtol=1e-12, atol=1e-15)


@given(arrays(np.float64, (3,), elements=st.floats(-2, 2)))
def test_tanh_fd_property(a):
    assert fd_check(lambda t: ad.tanh(t * t).sum(), [a]) < 1e-6


def test_finite_diff_gradient_of_quadratic():
    g = finite_diff_gradient(lambda t: (t * t).sum(), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g.data, [2.0, -4.0], rtol=1e-8)
