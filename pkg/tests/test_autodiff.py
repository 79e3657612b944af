from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from t2sg import autodiff as ad
from t2sg.autodiff import ContractError, Parameter, Tape, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda rc: arrays(np.float64, rc, elements=finite))


# ---------------------------------------------------------------- forward values


def test_matmul_identity_and_hand_case():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).value, m)
    out = ad.matmul(Tensor(m), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.value, [[2.0], [4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.zeros((2, 2))), Tensor(m)).value, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_associative():
    rng = np.random.default_rng(0)
    a, b, c = (rng.normal(size=s) for s in ((4, 5), (5, 3), (3, 6)))
    left = ad.matmul(ad.matmul(Tensor(a), Tensor(b)), Tensor(c)).value
    right = ad.matmul(Tensor(a), ad.matmul(Tensor(b), Tensor(c))).value
    assert np.max(np.abs(left - right) / (np.abs(left) + 1e-12)) < 1e-9


def test_row_softmax_cases():
    assert np.allclose(ad.row_softmax(Tensor([[2.0, 2.0, 2.0, 2.0]])).value, 0.25, atol=0, rtol=1e-15)
    out = ad.row_softmax(Tensor([[0.0, math.log(3.0)]])).value
    assert out == pytest.approx(np.array([[0.25, 0.75]]), abs=1e-15)
    assert np.array_equal(ad.row_softmax(Tensor([[3.0], [-7.0]])).value, [[1.0], [1.0]])


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_row_softmax_rows_sum_to_one(m):
    out = ad.row_softmax(Tensor(m * 20)).value
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12


def test_layer_norm_cases():
    ones, zeros = Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2)))
    assert np.array_equal(ad.layer_norm(Tensor([[5.0, 5.0]]), ones, zeros).value, [[0.0, 0.0]])
    out = ad.layer_norm(Tensor([[1.0, 3.0]]), ones, zeros).value
    # eps=1e-6 against unit variance
    assert out == pytest.approx(np.array([[-1.0, 1.0]]), abs=1e-6)
    bias = Tensor([[0.5, -2.0]])
    assert np.array_equal(ad.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.zeros((1, 2))), bias).value, bias.value)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-10, 10)))
def test_layer_norm_standardizes(m):
    spread = m.std(axis=1)
    m = m[spread > 1e-2]
    if len(m) == 0:
        return
    out = ad.layer_norm(Tensor(m), Tensor(np.ones((1, 7))), Tensor(np.zeros((1, 7))), eps=0.0).value
    assert np.all(np.abs(out.mean(axis=1)) < 1e-12)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-9)


def test_layer_norm_rejects_bad_gain():
    with pytest.raises(ContractError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))))


def test_mlp_forward_identity_and_zero_final():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ad.mlp_forward(x, [(Tensor(np.eye(3)), Tensor(np.zeros((1, 3))))]).value, x.value)
    layers = [(Tensor(np.ones((3, 4))), Tensor(np.zeros((1, 4)))), (Tensor(np.zeros((4, 2))), Tensor([[1.5, -1.0]]))]
    assert np.array_equal(ad.mlp_forward(x, layers).value, [[1.5, -1.0], [1.5, -1.0]])


def test_mlp_forward_two_layer_relu_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 3)))
    w1, b1 = Parameter(rng.normal(size=(3, 5)), "w1"), Parameter(rng.normal(size=(1, 5)), "b1")
    w2, b2 = Parameter(rng.normal(size=(5, 2)), "w2"), Parameter(rng.normal(size=(1, 2)), "b2")

    def f():
        return ad.total(ad.mlp_forward(x, [(w1, b1), (w2, b2)]))

    with Tape() as tape:
        f()
    assert tape.kink_margin > 1e-3
    assert ad.grad_check(f, [w1, b1, w2, b2]) < 1e-7


# ---------------------------------------------------------------- losses


def test_focal_closed_form():
    logit = math.log(9.0)  # p = 0.9
    loss = ad.sigmoid_focal_loss(Tensor([[logit]]), [[1.0]], 0.25, 2.0).item()
    assert loss == pytest.approx(2.634e-4, rel=1e-3)
    assert loss == pytest.approx(-0.25 * 0.01 * math.log(0.9), rel=1e-12)


def test_focal_confident_correct_is_tiny():
    assert ad.sigmoid_focal_loss(Tensor([[20.0, -20.0]]), [[1.0, 0.0]]).item() < 1e-15


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 4)) * 3
    y = (rng.random((3, 4)) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert ad.sigmoid_focal_loss(Tensor(z), y, alpha=0.5, gamma=0.0).item() == pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_mask_and_all_masked():
    z = Tensor([[1.0, -2.0], [0.5, 3.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    full = ad.sigmoid_focal_loss(z, y).item()
    mask = np.array([[1.0, 0.0], [0.0, 0.0]])
    single = ad.sigmoid_focal_loss(Tensor([[1.0]]), [[1.0]]).item()
    assert ad.sigmoid_focal_loss(z, y, mask=mask).item() == pytest.approx(single, rel=1e-14)
    assert ad.sigmoid_focal_loss(z, y, mask=np.zeros((2, 2))).item() == 0.0
    assert full > 0


def test_focal_on_probs_matches_sigmoid_version_inside_range():
    z = np.array([[0.3, -1.2, 2.0]])
    y = np.array([[1.0, 0.0, 1.0]])
    p = 1 / (1 + np.exp(-z))
    a = ad.focal_loss_on_probs(Tensor(p), y).item()
    b = ad.sigmoid_focal_loss(Tensor(z), y).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_l1_cases():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(3, 5))
    assert ad.l1_loss(Tensor(a), Tensor(a)).item() == 0.0
    assert ad.l1_loss(Tensor(a + 2.0), Tensor(a)).item() == pytest.approx(2.0, abs=1e-15)
    assert ad.l1_loss(Tensor(a), Tensor(b)).item() == pytest.approx(np.abs(a - b).sum() / a.size, rel=1e-14)
    with pytest.raises(ContractError):
        ad.l1_loss(Tensor(a), Tensor(b[:, :2]))


# ---------------------------------------------------------------- tape


def test_backward_sum_and_independent_param():
    p = Parameter(np.arange(6.0).reshape(2, 3), "p")
    q = Parameter(np.ones((2, 2)), "q")
    with Tape() as tape:
        loss = ad.total(p)
    tape.backward(loss)
    assert np.array_equal(p.grad, np.ones((2, 3)))
    assert np.array_equal(q.grad, np.zeros((2, 2)))


def test_double_backward_is_a_contract_violation():
    p = Parameter(np.ones((1, 2)), "p")
    with Tape() as tape:
        loss = ad.total(ad.mul(p, p))
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)
    tape.reset()
    p.zero_grad()
    with tape:
        loss = ad.total(ad.mul(p, p))
    tape.backward(loss)
    assert np.array_equal(p.grad, [[2.0, 2.0]])


def test_reverse_sweep_order():
    p = Parameter(np.ones((2, 2)), "p")
    with Tape() as tape:
        loss = ad.total(ad.relu(ad.scale(ad.matmul(p, p), 2.0)))
    visited = []
    tape.backward(loss, visit=visited.append)
    assert visited == list(reversed(tape.ops))


def test_grad_check_quadratic():
    rng = np.random.default_rng(1)
    p = Parameter(rng.normal(size=(3, 3)), "p")
    a = Tensor(rng.normal(size=(3, 3)))
    assert ad.grad_check(lambda: ad.total(ad.mul(ad.matmul(a, p), p)), [p], h=1e-5) < 1e-9


@pytest.mark.parametrize(
    "op",
    [
        lambda x: ad.row_softmax(x),
        lambda x: ad.sigmoid(x),
        lambda x: ad.log_sigmoid(x),
        lambda x: ad.power(ad.add(ad.mul(x, x), Tensor(1.0)), 1.5),
        lambda x: ad.log(ad.add(ad.mul(x, x), Tensor(1.0))),
        lambda x: ad.layer_norm(x, Tensor(np.full((1, 4), 1.3)), Tensor(np.full((1, 4), 0.2))),
        lambda x: ad.pair_sum(x, ad.scale(x, -0.5)),
        lambda x: ad.reshape(ad.transpose(x), 2, 6),
        lambda x: ad.sub(x, Tensor(np.ones((1, 4)))),
    ],
)
def test_primitive_gradients(op):
    rng = np.random.default_rng(5)
    x = Parameter(rng.normal(size=(3, 4)), "x")
    w = Tensor(rng.normal(size=op(Tensor(x.value)).shape))
    assert ad.grad_check(lambda: ad.total(ad.mul(op(x), w)), [x]) < 1e-7


def test_kink_margin_tracks_relu():
    with Tape() as tape:
        ad.relu(Tensor([[0.5, -2e-4, 3.0]], requires_grad=True))
    assert tape.kink_margin == pytest.approx(2e-4)


def test_parameter_grad_shape_follows_value():
    p = Parameter(np.zeros((2, 5)), "p")
    assert p.grad.shape == p.value.shape
    p.assign(np.ones((2, 5)))
    p.zero_grad()
    assert np.array_equal(p.grad, np.zeros((2, 5)))
