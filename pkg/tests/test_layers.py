import math

import numpy as np
import pytest

from sdeep import tensor as T
from sdeep.checks import CASES, gradient_suite
from sdeep.layers import (
    AttentionParams,
    ConvBlockSpec,
    channel_attention,
    conv_temporal,
    dense,
    dropout_mask,
    glorot_uniform,
)
from sdeep.tensor import ShapeError, Tensor


def _attention(rng, n=3, b=4, f=5, d_a=6):
    h = Tensor(rng.normal(size=(n, b, f)))
    p = AttentionParams(Tensor(rng.normal(size=(d_a, f))), Tensor(rng.normal(size=d_a)), Tensor(rng.normal(size=d_a)))
    return h, p


def test_conv_spec_validation():
    with pytest.raises(ValueError):
        ConvBlockSpec(3, 1, 2, (0, 2))  # bank gap
    with pytest.raises(ValueError):
        ConvBlockSpec(4, 1, 2, (0,))  # even kernel with same padding
    with pytest.raises(ValueError):
        ConvBlockSpec(3, 1, 2, (0,), padding="full")
    spec = ConvBlockSpec(3, 2, 4, (0, 1, 0), stride=2)
    assert spec.num_banks == 2 and spec.output_len(21) == 11
    assert spec.param_count() == 2 * (4 * 2 * 3 + 4)
    assert ConvBlockSpec(5, 1, 1, (0,), padding="valid").output_len(4) == 0


def test_conv_shared_bank_gives_identical_features_for_identical_channels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 9, 1))
    x = np.concatenate([x, x, rng.normal(size=(2, 1, 9, 1))], axis=1)
    spec = ConvBlockSpec(3, 1, 4, (0, 0, 1))
    w, b = Tensor(rng.normal(size=(2, 4, 1, 3))), Tensor(rng.normal(size=(2, 4)))
    out = conv_temporal(Tensor(x), spec, w, b).data
    np.testing.assert_array_equal(out[:, 0], out[:, 1])
    assert not np.allclose(out[:, 0], out[:, 2])


def test_conv_shape_errors():
    spec = ConvBlockSpec(3, 1, 4, (0, 1))
    w, b = Tensor(np.zeros((2, 4, 1, 3))), Tensor(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        conv_temporal(Tensor(np.zeros((1, 3, 5, 1))), spec, w, b)
    with pytest.raises(ShapeError):
        conv_temporal(Tensor(np.zeros((1, 2, 5, 1))), spec, Tensor(np.zeros((1, 4, 1, 3))), b)
    with pytest.raises(ShapeError):
        conv_temporal(Tensor(np.zeros((1, 2, 5))), spec, w, b)


def test_dense_activations_and_errors():
    x = Tensor(np.array([[1.0, -2.0]]))
    W = Tensor(np.eye(2))
    b = Tensor(np.zeros(2))
    np.testing.assert_array_equal(dense(x, W, b, "relu").data, [[1.0, 0.0]])
    np.testing.assert_allclose(dense(x, W, b, "tanh").data, np.tanh([[1.0, -2.0]]))
    with pytest.raises(ValueError):
        dense(x, W, b, "gelu")
    with pytest.raises(ShapeError):
        dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))


def test_attention_zero_u_gives_half():
    rng = np.random.default_rng(2)
    h, p = _attention(rng)
    p = p._replace(u=Tensor(np.zeros(6)))
    out = channel_attention(h, p)
    assert np.all(out.alphas.data == 0.5)
    np.testing.assert_allclose(out.pooled.data, 0.5 * h.data.sum(axis=1), atol=1e-12)


def test_attention_weights_are_independent_per_channel():
    rng = np.random.default_rng(3)
    h, p = _attention(rng)
    a1 = channel_attention(h, p).alphas.data
    h2 = h.data.copy()
    h2[:, 1] += 5.0
    a2 = channel_attention(Tensor(h2), p).alphas.data
    np.testing.assert_array_equal(np.delete(a1, 1, axis=1), np.delete(a2, 1, axis=1))
    assert np.all((a1 > 0) & (a1 < 1))


def test_attention_shape_errors():
    rng = np.random.default_rng(4)
    h, p = _attention(rng)
    with pytest.raises(ShapeError):
        channel_attention(Tensor(rng.normal(size=(3, 4, 7))), p)
    with pytest.raises(ShapeError):
        channel_attention(h, p._replace(u=Tensor(np.zeros(5))))
    with pytest.raises(ShapeError):
        channel_attention(Tensor(rng.normal(size=(4, 5))), p)


def test_dropout_mask_inverted_scaling():
    rng = np.random.default_rng(0)
    m = dropout_mask(rng, (2000, 50), 0.2)
    assert set(np.unique(m)) <= {0.0, 1.25}
    assert abs(m.mean() - 1.0) < 0.02
    assert dropout_mask(None, (2, 2), 0.2) is None
    assert dropout_mask(rng, (2, 2), 0.0) is None


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), (50, 40), 50, 40)
    assert np.abs(w).max() <= math.sqrt(6 / 90)


@pytest.mark.parametrize("case", [c for c in CASES if not c.startswith("model")])
def test_layer_gradients(case):
    assert gradient_suite(range(3), cases=[case])[case] <= 1e-4


@pytest.mark.parametrize("case", ["model_A_single_i", "model_C_multi_ii", "model_A_none_ii"])
def test_model_variant_gradients(case):
    # ReLU kinks sit within 1e-5 of some evaluation points for these variants;
    # a smaller step keeps the central difference on one side of them.
    assert gradient_suite(range(2), cases=[case], step=1e-7)[case] <= 1e-4
