import numpy as np
import pytest
from hypothesis import given, strategies as st

from fd2cl import numcore as nc
from fd2cl.errors import ContractError, StateError
from fd2cl.losses import LossBreakdown, align_loss, bce_loss, cos2, ewc_penalty, orth_loss
from fd2cl.numcore import Tape, Tensor, grad_check


def named(arr, name):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, name=name)


def test_breakdown_composition():
    lb = LossBreakdown(0.5, 2.0, 0.25, 0.1, 0.5 + 3 * 2.0 + 0.1 * 0.25 + 0.5 * 0.1, 3.0, 0.1, 0.5)
    lb.check()
    assert lb.as_dict()["bce"] == 0.5
    with pytest.raises(StateError):
        LossBreakdown(0.5, 2.0, 0.0, 0.0, 9.0, 3.0, 0.1, 0.5).check()


def test_ewc_hand_case_and_zero_at_anchor():
    th = named([1.5], "w")
    val = ewc_penalty([th], {"w": np.array([1.0])}, {"w": np.array([1.0])}, {"w": np.array([3.0])})
    assert val.item() == 1.0
    zero = ewc_penalty([th], {"w": th.data.copy()}, {"w": np.array([7.0])}, {"w": np.array([0.5])})
    assert zero.item() == 0.0


def test_ewc_gradient(rng):
    a, b = named(rng.normal(size=(3, 2)), "a"), named(rng.normal(size=4), "b")
    snap = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    fr = {"a": rng.uniform(size=(3, 2)), "b": rng.uniform(size=4)}
    ff = {"a": rng.uniform(size=(3, 2)), "b": rng.uniform(size=4)}
    with Tape() as tape:
        loss = ewc_penalty([a, b], snap, fr, ff)
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_allclose(ga, 2 * (fr["a"] + ff["a"]) * (a.data - snap["a"]))
    assert grad_check(lambda: ewc_penalty([a, b], snap, fr, ff), [a, b]).passed


def test_ewc_index_mismatch():
    th = named([1.0, 2.0], "w")
    with pytest.raises(StateError):
        ewc_penalty([th], {"v": np.zeros(2)}, {"w": np.zeros(2)}, {"w": np.zeros(2)})
    with pytest.raises(StateError):
        ewc_penalty([th], {"w": np.zeros(3)}, {"w": np.zeros(3)}, {"w": np.zeros(3)})


def unit_rows(r, n, d):
    x = r.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_align_loss_extremes():
    t_real, t_fake = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    y = np.array([0, 1, 1])
    perfect = Tensor(np.array([t_real, t_fake, t_fake]))
    assert align_loss(perfect, y, (t_real, t_fake)).item() == 0.0
    opposite = Tensor(-perfect.data)
    assert align_loss(opposite, y, (t_real, t_fake)).item() == 2.0
    with pytest.raises(ContractError):
        align_loss(Tensor(2 * perfect.data), y, (t_real, t_fake))


@given(st.integers(2, 12), st.integers(0, 10_000))
def test_align_loss_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    f = unit_rows(r, n, 5)
    y = r.integers(0, 2, n)
    anchors = tuple(unit_rows(r, 2, 5))
    perm = r.permutation(n)
    a = align_loss(Tensor(f), y, anchors).item()
    b = align_loss(Tensor(f[perm]), y[perm], anchors).item()
    assert a == pytest.approx(b, abs=1e-14)
    assert 0.0 <= a <= 2.0


def test_align_loss_gradient_through_normalisation(rng):
    raw = named(rng.normal(size=(6, 4)), "raw")
    y = np.array([0, 1, 0, 1, 1, 0])
    anchors = tuple(unit_rows(rng, 2, 4))
    assert grad_check(lambda: align_loss(nc.l2_normalize_rows(raw), y, anchors), [raw]).max_rel_err < 1e-6


def test_bce_loss_is_mean_bce():
    z = Tensor(np.array([0.0, 0.0]))
    assert bce_loss(z, np.array([0, 1])).item() == pytest.approx(np.log(2))


def test_cos2_and_orth_loss(rng):
    g = rng.normal(size=(3, 4))
    assert cos2(g, 2 * g) == pytest.approx(1.0)
    h = np.zeros_like(g)
    h[0, 0] = 1.0
    g2 = g.copy()
    g2[0, 0] = 0.0
    assert cos2(g2, h) == 0.0
    assert cos2(np.zeros(3), np.ones(3)) == 0.0
    assert orth_loss({"a": g}, {}) == 0.0
    grads = {"a": g, "b": g2}
    cache = {"a": g.ravel() / np.linalg.norm(g), "b": h.ravel(), "c": np.ones(2)}
    assert orth_loss(grads, cache) == pytest.approx(0.5)
