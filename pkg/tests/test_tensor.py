import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import ContractError, DimensionError, EmptyAxisError, LabelError, NumericError
from src.tensor import (Tape, Tensor, add, cross_entropy_logits, l2_normalize, layer_norm, matmul, mean_axis, permute,
                        reshape, softmax_lastdim, sparsemax_lastdim, sum_all, tanh)
from tests.oracles import layer_norm_row, softmax_row, sparsemax_row

ROWS = st.lists(st.floats(min_value=-20, max_value=20, allow_nan=False), min_size=1, max_size=16)


def test_matmul_batched_shapes():
    a = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.ones((4, 5)))
    assert matmul(a, b).shape == (2, 3, 5)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[4, 5\]"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@given(ROWS)
def test_softmax_rows_are_positive_distributions(row):
    p = softmax_lastdim(Tensor(row)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p > 0).all()
    np.testing.assert_allclose(p, softmax_row(row), rtol=1e-12, atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_lastdim(Tensor([0.0, np.nan]))


@given(ROWS)
@settings(max_examples=300)
def test_sparsemax_matches_loop_oracle(row):
    p = sparsemax_lastdim(Tensor(row)).data
    np.testing.assert_allclose(p, sparsemax_row(row), atol=1e-9)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all()


def test_sparsemax_produces_exact_zeros():
    p = sparsemax_lastdim(Tensor([1.0, 0.0, -1.0])).data
    assert p.tolist() == [1.0, 0.0, 0.0]
    np.testing.assert_allclose(sparsemax_lastdim(Tensor([0.5, 0.5])).data, [0.5, 0.5])


def test_sparsemax_empty_axis():
    with pytest.raises(EmptyAxisError):
        sparsemax_lastdim(Tensor(np.zeros((2, 0))))


def test_layer_norm_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, gamma, beta = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    y = layer_norm(Tensor(x), Tensor(gamma), Tensor(beta), 1e-5).data
    for row, out in zip(x, y):
        np.testing.assert_allclose(out, layer_norm_row(row, gamma, beta, 1e-5), rtol=1e-10)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_uniform_logits():
    loss = cross_entropy_logits(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(5))


def test_l2_normalize_zero_vector():
    with pytest.raises(NumericError):
        l2_normalize(Tensor(np.zeros(3)))


def test_mean_over_empty_axis():
    with pytest.raises(EmptyAxisError):
        mean_axis(Tensor(np.zeros((0, 3))), 0)


def test_permute_and_reshape_validate():
    x = Tensor(np.zeros((2, 3, 4)))
    assert permute(x, (2, 0, 1)).shape == (4, 2, 3)
    with pytest.raises(DimensionError):
        permute(x, (0, 0, 1))
    with pytest.raises(DimensionError):
        reshape(x, (5, 5))


def test_nothing_recorded_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tanh(x)
    assert y.tape_id is None
    assert not y.requires_grad


def test_backward_accumulates_into_reused_leaf():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(add(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_needs_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tanh(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tensor_data_is_read_only():
    x = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        x.data[0] = 2.0


def test_replay_reproduces_every_node():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy_logits(matmul(tanh(x), w), [0, 2])
    assert len(tape) == 3
    for node, replayed in zip(tape.nodes, tape.replay()):
        assert np.array_equal(node.output.data, replayed)
    assert loss.size == 1
