import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fd2cl import numcore as nc
from fd2cl.errors import DegenerateFeatureError, DimensionError, EvaluationError
from fd2cl.numcore import Tape, Tensor, grad_check


def param(rng, *shape, name="p"):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


def check(loss_fn, params, tol=1e-6):
    rep = grad_check(loss_fn, params)
    assert rep.max_rel_err < tol, rep
    return rep


def test_matmul_add_broadcast_gradients(rng):
    a, b, c = param(rng, 4, 3, name="a"), param(rng, 3, 5, name="b"), param(rng, 5, name="c")
    check(lambda: nc.sum_all(nc.mul(nc.add(nc.matmul(a, b), c), nc.add(nc.matmul(a, b), c))), [a, b, c])


def test_sub_scale_affine_reshape(rng):
    a, b = param(rng, 2, 6), param(rng, 2, 6)
    check(lambda: nc.mean_all(nc.mul(nc.reshape(nc.affine(nc.sub(a, nc.scale(b, 0.3)), 1.7, -0.2), (3, 4)),
                                     nc.reshape(a, (3, 4)))), [a, b])


def test_gelu_tanh_gradients(rng):
    x = param(rng, 5, 7)
    check(lambda: nc.sum_all(nc.mul(nc.gelu(x), nc.tanh(x))), [x])


def test_concat_and_mean_of(rng):
    a, b, c = param(rng, 3, 2), param(rng, 3, 4), param(rng, 3, 2)
    w = rng.normal(size=(3, 8))
    check(lambda: nc.sum_all(nc.mul(nc.concat([a, b, a], axis=1), Tensor(w))), [a, b])
    check(lambda: nc.sum_all(nc.mul(nc.mean_of([a, c, a]), nc.mean_of([a, c, a]))), [a, c])


def test_normalize_rowdot_gradients(rng):
    x = param(rng, 4, 6)
    t = rng.normal(size=(4, 6))
    check(lambda: nc.mean_all(nc.row_dot(nc.l2_normalize_rows(x), t)), [x])


def test_bce_logsigmoid_and_weighted_dist(rng):
    z = param(rng, 6)
    y = np.array([0, 1, 1, 0, 1, 0])
    check(lambda: nc.add(nc.bce_with_logits(z, y), nc.sum_all(nc.log_sigmoid(z))), [z])
    th = param(rng, 3, 3)
    anchor, weight = rng.normal(size=(3, 3)), rng.uniform(size=(3, 3))
    check(lambda: nc.weighted_sq_dist(th, anchor, weight), [th])


def test_unrelated_tensor_gets_zeros_and_no_accumulation(rng):
    a, b = param(rng, 3), param(rng, 3)
    with Tape() as tape:
        loss = nc.sum_all(nc.mul(a, a))
    g1 = tape.gradient(loss, [a, b])
    g2 = tape.gradient(loss, [a, b])
    np.testing.assert_array_equal(g1[0], 2 * a.data)
    np.testing.assert_array_equal(g1[1], np.zeros(3))
    np.testing.assert_array_equal(g1[0], g2[0])


def test_nothing_recorded_without_tape_or_trainable(rng):
    a = param(rng, 3)
    nc.sum_all(nc.mul(a, a))
    with Tape() as tape:
        nc.sum_all(nc.mul(Tensor(a.data), Tensor(a.data)))
    assert tape.nodes == []


def test_seeded_backward_picks_one_sample(rng):
    w = param(rng, 4)
    x = rng.normal(size=(3, 4))
    with Tape() as tape:
        out = nc.matmul(Tensor(x), nc.reshape(w, (4, 1)))
        out = nc.reshape(out, (3,))
    (g,) = tape.gradient(out, [w], seed=np.array([0.0, 1.0, 0.0]))
    np.testing.assert_allclose(g, x[1])


def test_errors():
    with pytest.raises(DimensionError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DegenerateFeatureError):
        nc.l2_normalize_rows(Tensor(np.zeros((2, 3))))
    with pytest.raises(EvaluationError), np.errstate(over="ignore"):
        nc.mul(Tensor(np.array([1e300])), Tensor(np.array([1e300])))
    with pytest.raises(DimensionError):
        nc.weighted_sq_dist(Tensor(np.ones(3)), np.ones(2), np.ones(3))


def test_grad_check_catches_a_wrong_backward(rng):
    x = param(rng, 5)

    def bad_square(t):
        return nc.emit(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    rep = grad_check(lambda: nc.sum_all(bad_square(x)), [x])
    assert not rep.passed and rep.max_rel_err > 0.4


def test_bce_is_finite_for_huge_logits():
    z = Tensor(np.array([-1000.0, 1000.0, -1000.0, 1000.0]), requires_grad=True)
    y = np.array([1, 0, 0, 1])
    with Tape() as tape:
        loss = nc.bce_with_logits(z, y)
    (g,) = tape.gradient(loss, [z])
    assert loss.item() == pytest.approx(500.0)
    assert np.all(np.isfinite(g))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)),
       st.lists(st.integers(0, 1), min_size=20, max_size=20))
def test_bce_matches_softplus_form(z, bits):
    y = np.array(bits[:z.size])
    expect = np.mean(np.logaddexp(0.0, z) - y * z)
    assert nc.bce_with_logits(Tensor(z), y).item() == pytest.approx(expect, rel=1e-12, abs=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-8, 8)))
def test_gelu_closed_form(x):
    expect = 0.5 * x * (1 + np.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(nc.gelu(Tensor(x)).data, expect, rtol=1e-12, atol=1e-15)
