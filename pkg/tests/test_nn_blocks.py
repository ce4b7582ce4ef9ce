"""Тесты энкодера, линейного внимания и блока трансформера"""

import numpy as np
import pytest

from src.model.nn_blocks import (
    EncoderMlp, INIT_STD, LinearAttnBlock, block_forward, encode, feature_map, init_weight, linear_attention,
)
from src.numerics import autodiff as ops
from src.numerics.autodiff import grad_check_parameters


def naive_linear_attention(q, k, v, eps=1e-6):
    phi_q = feature_map(q).data
    phi_k = feature_map(k).data
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        weights = np.array([phi_q[i] @ phi_k[j] for j in range(k.shape[0])])
        out[i] = weights @ v / (weights.sum() + eps)
    return out


def perturb(params, rng):
    for p in params.values():
        p.data += rng.normal(0.0, 0.3, p.shape)


class TestEncoder:

    def test_zero_weights(self, rng):
        enc = EncoderMlp(rng, 3, 4, 5)
        for p in enc.parameters().values():
            p.data[...] = 0.0
        g, h = encode(enc, rng.standard_normal((2, 7, 3)))
        assert g.shape == (2, 7, 4) and h.shape == (2, 7, 5)
        np.testing.assert_array_equal(g.data, 0.0)
        np.testing.assert_array_equal(h.data, 0.0)

    def test_pointwise(self, rng):
        enc = EncoderMlp(rng, 2, 4, 4)
        x = rng.standard_normal((6, 2))
        g_all, _ = encode(enc, x)
        g_one, _ = encode(enc, x[2:3])
        np.testing.assert_allclose(g_all.data[2:3], g_one.data, atol=1e-12)

    def test_grad_check(self, rng):
        enc = EncoderMlp(rng, 2, 4, 3)
        params = enc.parameters()
        perturb(params, rng)
        x = rng.standard_normal((5, 2))
        w_g, w_h = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))

        def loss_fn():
            g, h = encode(enc, x)
            return ops.sum(g * w_g) + ops.sum(h * w_h)

        assert grad_check_parameters(loss_fn, params) < 1e-4

    def test_init_truncated(self, rng):
        w = init_weight(rng, 50, 40)
        assert np.max(np.abs(w.data)) <= 2 * INIT_STD
        assert w.grad_required


class TestLinearAttention:

    def test_singleton(self, rng):
        q, k, v = rng.standard_normal((3, 1, 4))
        np.testing.assert_allclose(linear_attention(q, k, v).data, v, rtol=1e-4)

    def test_identical_keys_average(self, rng):
        q = rng.standard_normal((4, 3))
        k = np.tile(rng.standard_normal(3), (6, 1))
        v = rng.standard_normal((6, 2))
        out = linear_attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (4, 1)), rtol=1e-4)

    def test_naive_oracle(self, rng):
        q, k, v = rng.standard_normal((8, 5)), rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
        np.testing.assert_allclose(linear_attention(q, k, v).data, naive_linear_attention(q, k, v), atol=1e-10)

    def test_cross_attention_shape(self, rng):
        q = rng.standard_normal((2, 3, 4))
        k = rng.standard_normal((2, 9, 4))
        v = rng.standard_normal((2, 9, 4))
        out = linear_attention(q, k, v)
        assert out.shape == (2, 3, 4)
        np.testing.assert_allclose(out.data[1], naive_linear_attention(q[1], k[1], v[1]), atol=1e-10)


class TestBlock:

    def test_zero_weights_identity(self, rng):
        block = LinearAttnBlock(rng, 4)
        for dense in (block.query, block.key, block.value, block.ffn.outer):
            dense.weight.data[...] = 0.0
        g = rng.standard_normal((2, 6, 4))
        np.testing.assert_allclose(block_forward(block, g).data, g, atol=1e-15)

    def test_parameter_names(self, rng):
        names = set(LinearAttnBlock(rng, 4).parameters())
        assert {'query.weight', 'key.weight', 'value.weight', 'norm_attn.gamma', 'ffn.inner.weight',
                'ffn.outer.bias'} <= names
        assert 'query.bias' not in names

    def test_cross_context(self, rng):
        block = LinearAttnBlock(rng, 4)
        g = rng.standard_normal((1, 5, 4))
        ctx = rng.standard_normal((1, 11, 4))
        assert block_forward(block, g, context=ctx).shape == (1, 5, 4)
        np.testing.assert_allclose(block_forward(block, g, context=g).data, block_forward(block, g).data)

    def test_grad_check(self, rng):
        block = LinearAttnBlock(rng, 4, ffn_mult=2)
        params = block.parameters()
        perturb(params, rng)
        g = rng.standard_normal((2, 6, 4))
        weights = rng.standard_normal((2, 6, 4))
        assert grad_check_parameters(lambda: ops.sum(block_forward(block, g) * weights), params) < 1e-4


@pytest.mark.parametrize('m', [1, 4, 16])
def test_attention_rows_are_convex_combinations(m, rng):
    q, k = rng.standard_normal((3, 2)), rng.standard_normal((m, 2))
    v = np.ones((m, 1))
    np.testing.assert_allclose(linear_attention(q, k, v).data, 1.0, rtol=1e-4)
