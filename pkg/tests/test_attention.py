import numpy as np
import pytest

from src.attention import (AttentionParams, FfnParams, LayerParams, NormParams, ScoreState, attention_layer, ffn,
                           mha_residual_scores, prenorm_sublayer)
from src.errors import ConfigError, ContractError, DimensionError
from src.tensor import Tensor, reshape
from tests.oracles import attention_rows, ffn_row


@pytest.fixture
def params():
    return AttentionParams.initialize(8, 2, np.random.default_rng(0), std=0.3, out_scale=1.0)


def test_output_shape_and_state(params):
    x = Tensor(np.random.default_rng(1).normal(size=(3, 5, 8)))
    y, state = mha_residual_scores(x, params, ScoreState.zeros())
    assert y.shape == x.shape
    assert len(state.scores) == 2
    assert state.scores[0].shape == (3, 5, 5)
    assert state.layer == 1
    for weights in state.weights:
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_previous_scores_are_added(params):
    rng = np.random.default_rng(2)
    x1, x2 = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8)))
    _, first = mha_residual_scores(x1, params, ScoreState.zeros())
    _, own = mha_residual_scores(x2, params, ScoreState.zeros())
    _, chained = mha_residual_scores(x2, params, first)
    for head in range(2):
        np.testing.assert_allclose(chained.scores[head].data, own.scores[head].data + first.scores[head].data,
                                   rtol=1e-12)
    assert chained.layer == 2


def test_shared_mode_forwards_head_average(params):
    x = Tensor(np.random.default_rng(3).normal(size=(4, 8)))
    _, per_head = mha_residual_scores(x, params, ScoreState.zeros())
    _, shared = mha_residual_scores(x, params, ScoreState.zeros(), sharing='shared')
    assert len(shared.scores) == 1
    np.testing.assert_allclose(shared.scores[0].data, (per_head.scores[0].data + per_head.scores[1].data) / 2)


def test_head_count_mismatch(params):
    x = Tensor(np.random.default_rng(4).normal(size=(4, 8)))
    four_heads = AttentionParams.initialize(8, 4, np.random.default_rng(5))
    _, state = mha_residual_scores(x, four_heads, ScoreState.zeros())
    with pytest.raises(ConfigError):
        mha_residual_scores(x, params, state)


def test_attention_length_mismatch(params):
    rng = np.random.default_rng(6)
    _, state = mha_residual_scores(Tensor(rng.normal(size=(4, 8))), params, ScoreState.zeros())
    with pytest.raises(DimensionError):
        mha_residual_scores(Tensor(rng.normal(size=(5, 8))), params, state)


def test_heads_must_divide_features():
    with pytest.raises(ConfigError):
        AttentionParams.initialize(8, 3, np.random.default_rng(0))


@pytest.mark.parametrize('normalizer', ['softmax', 'sparsemax'])
@pytest.mark.parametrize('seed', range(5))
def test_permutation_equivariance(params, normalizer, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 8))
    order = rng.permutation(6)
    y, _ = mha_residual_scores(Tensor(x), params, ScoreState.zeros(), normalizer)
    y_perm, _ = mha_residual_scores(Tensor(x[order]), params, ScoreState.zeros(), normalizer)
    np.testing.assert_allclose(y.data[order], y_perm.data, atol=1e-10)


def test_prenorm_sublayer_is_residual():
    norm = NormParams.initialize(4)
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    y = prenorm_sublayer(x, lambda h: h * 0.0, norm)
    np.testing.assert_array_equal(y.data, x.data)


def test_prenorm_sublayer_rejects_shape_change():
    norm = NormParams.initialize(4)
    x = Tensor(np.ones((3, 4)))
    with pytest.raises(ContractError):
        prenorm_sublayer(x, lambda h: reshape(h, (4, 3)), norm)


def test_attention_layer_threads_state():
    layer = LayerParams.initialize(8, 2, 16, np.random.default_rng(8))
    x = Tensor(np.random.default_rng(9).normal(size=(2, 5, 8)))
    y, state = attention_layer(x, layer, ScoreState.zeros(), 'sparsemax')
    assert y.shape == x.shape
    assert state.layer == 1
    assert np.isfinite(y.data).all()


def _ffn_params(w1, b1, w2, b2) -> FfnParams:
    return FfnParams(*(Tensor(np.asarray(p, dtype=float), requires_grad=True) for p in (w1, b1, w2, b2)))


def test_ffn_with_zero_weights_outputs_bias():
    b2 = np.array([0.5, -1.0, 2.0])
    params = _ffn_params(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 3)), b2)
    y = ffn(Tensor(np.random.default_rng(10).normal(size=(2, 5, 3))), params)
    np.testing.assert_array_equal(y.data, np.broadcast_to(b2, (2, 5, 3)))


def test_ffn_identity_weights_pass_nonnegative_input_through():
    params = _ffn_params(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4))
    x = np.abs(np.random.default_rng(11).normal(size=(6, 4)))
    np.testing.assert_array_equal(ffn(Tensor(x), params).data, x)


def test_ffn_matches_scalar_loop():
    rng = np.random.default_rng(12)
    params = FfnParams.initialize(5, 7, rng, std=0.5)
    params.b1.assign(rng.normal(size=7))
    params.b2.assign(rng.normal(size=5))
    x = rng.normal(size=(4, 5))
    expected = [ffn_row(row, *(p.data.tolist() for p in (params.w1, params.b1, params.w2, params.b2))) for row in x]
    np.testing.assert_allclose(ffn(Tensor(x), params).data, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize('normalizer', ['softmax', 'sparsemax'])
def test_single_position_attends_to_itself(params, normalizer):
    x = Tensor(np.random.default_rng(13).normal(size=(3, 1, 8)))
    y, state = mha_residual_scores(x, params, ScoreState.zeros(), normalizer)
    for weights in state.weights:
        np.testing.assert_allclose(weights.data, np.ones((3, 1, 1)), rtol=1e-12)
    expected = [attention_rows(rows, params, normalizer=normalizer)[0] for rows in x.data]
    np.testing.assert_allclose(y.data[:, 0], expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize('normalizer', ['softmax', 'sparsemax'])
def test_zero_queries_and_keys_attend_uniformly(params, normalizer):
    for head in range(params.heads):
        params.w_q[head].assign(np.zeros((8, 4)))
        params.w_k[head].assign(np.zeros((8, 4)))
    x = Tensor(np.random.default_rng(14).normal(size=(5, 8)))
    y, state = mha_residual_scores(x, params, ScoreState.zeros(), normalizer)
    for weights in state.weights:
        np.testing.assert_allclose(weights.data, np.full((5, 5), 0.2), rtol=1e-12)
    np.testing.assert_allclose(y.data, np.broadcast_to(y.data[0], (5, 8)), rtol=1e-12, atol=1e-12)


def test_previous_scores_steer_two_positions():
    params = AttentionParams.initialize(4, 1, np.random.default_rng(15), std=0.3, out_scale=1.0)
    x = np.random.default_rng(16).normal(size=(2, 4))
    prev_scores = np.array([[0.0, 10.0], [0.0, 0.0]])
    prev = ScoreState(scores=(Tensor(prev_scores),), layer=1)
    y, state = mha_residual_scores(Tensor(x), params, prev)
    np.testing.assert_allclose(y.data, attention_rows(x, params, prev=[prev_scores]), rtol=1e-10, atol=1e-12)
    assert state.layer == 2

    for tensor in (params.w_q[0], params.w_k[0]):
        tensor.assign(np.zeros((4, 4)))
    _, state = mha_residual_scores(Tensor(x), params, prev)
    weights = state.weights[0].data
    assert weights[0, 1] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), rel=1e-12)
    assert weights[0, 1] > 0.9999
    np.testing.assert_allclose(weights[1], [0.5, 0.5], rtol=1e-12)
