import os
import unittest

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np

from diffknock.core import tensor as T
from diffknock.core.errors import ConfigError, ShapeError
from diffknock.core.layers import (
    ConditionalLayerNorm,
    Dropout,
    LayerSpec,
    Linear,
    MultiHeadSelfAttention,
    PairFilter,
    build_layer,
    layer_forward,
)
from diffknock.core.tensor import Tensor, backward


class LayerForwardTests(unittest.TestCase):
    def test_layer_norm_of_two_values(self):
        out = T.layer_norm(Tensor(np.array([[1.0, 3.0]])))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_conditional_layer_norm_with_identity_modulation(self):
        rng = np.random.default_rng(0)
        layer = ConditionalLayerNorm(4, 3, rng)
        layer.proj_weight.data = np.zeros((3, 8))
        x = Tensor(rng.normal(size=(2, 5, 4)))
        cond = Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_allclose(layer(x, cond).data, T.layer_norm(x).data, atol=1e-12)

    def test_conditional_layer_norm_requires_condition(self):
        layer = ConditionalLayerNorm(4, 3, np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            layer(Tensor(np.ones((2, 4))))

    def test_single_head_attention_with_identity_projections_on_one_token(self):
        d = 3
        attn = MultiHeadSelfAttention(d, 1, np.random.default_rng(0))
        for proj in (attn.query, attn.key, attn.value, attn.out):
            proj.weight.data = np.eye(d)
            proj.bias.data = np.zeros(d)
        x = Tensor(np.array([[[0.5, -1.0, 2.0]]]))
        np.testing.assert_allclose(attn(x).data, x.data, atol=1e-12)

    def test_attention_width_must_divide_heads(self):
        with self.assertRaises(ConfigError):
            MultiHeadSelfAttention(6, 4, np.random.default_rng(0))

    def test_linear_rejects_wrong_width(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            layer_forward(layer, Tensor(np.ones((4, 5))))

    def test_dropout_rate_out_of_range(self):
        with self.assertRaises(ConfigError):
            Dropout(1.0)

    def test_build_layer_from_spec(self):
        layer = build_layer(LayerSpec("linear", {"in": 4, "out": 2}), np.random.default_rng(1))
        self.assertEqual(layer_forward(layer, Tensor(np.ones((3, 4)))).shape, (3, 2))
        with self.assertRaises(ConfigError):
            build_layer(LayerSpec("conv", {}))


class PairFilterTests(unittest.TestCase):
    def _filter(self, z, zk):
        layer = PairFilter(len(z), np.random.default_rng(0))
        layer.z.data = np.asarray(z, dtype=float)
        layer.z_knockoff.data = np.asarray(zk, dtype=float)
        return layer

    def test_pair_filter_arithmetic(self):
        layer = self._filter([1.0, 1.0, 2.0], [1.0, 0.0, -1.0])
        x = Tensor(np.array([[4.0, 7.0, 3.0]]))
        xk = Tensor(np.array([[2.0, 9.0, 1.0]]))
        np.testing.assert_allclose(layer(x, xk).data, [[3.0, 7.0, 5.0 / 3.0]], rtol=1e-12)

    def test_zero_filter_pair_outputs_zero_with_zero_gradients(self):
        layer = self._filter([0.0, 1.0], [0.0, 1.0])
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        xk = Tensor(np.array([[3.0, 4.0]]), requires_grad=True)
        out = layer(x, xk)
        self.assertEqual(out.data[0, 0], 0.0)
        grads = backward(out.sum(), leaves=[x, xk, layer.z, layer.z_knockoff])
        self.assertEqual(grads[layer.z][0], 0.0)
        self.assertEqual(grads[layer.z_knockoff][0], 0.0)
        self.assertEqual(grads[x][0, 0], 0.0)

    def test_filter_weight_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        z0 = rng.uniform(0.5, 1.5, size=3)
        zk0 = rng.uniform(-1.0, 1.0, size=3)
        x = rng.normal(size=(4, 3))
        xk = rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 3))

        def loss_of(z, zk):
            layer = self._filter(z, zk)
            return (layer(Tensor(x), Tensor(xk)) * Tensor(w)).sum(), layer

        loss, layer = loss_of(z0, zk0)
        grads = backward(loss)
        h = 1e-6
        for j in range(3):
            up, down = z0.copy(), z0.copy()
            up[j] += h
            down[j] -= h
            numeric = (loss_of(up, zk0)[0].item() - loss_of(down, zk0)[0].item()) / (2 * h)
            self.assertAlmostEqual(grads[layer.z][j], numeric, places=5)

    def test_knockoff_shape_must_match(self):
        layer = self._filter([1.0, 1.0], [1.0, 1.0])
        with self.assertRaises(ShapeError):
            layer(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))


class ModuleStateTests(unittest.TestCase):
    def test_state_dict_round_trip_and_mismatch(self):
        a = Linear(3, 2, np.random.default_rng(0))
        b = Linear(3, 2, np.random.default_rng(1))
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a.weight.data, b.weight.data)
        with self.assertRaises(ShapeError):
            Linear(2, 2, np.random.default_rng(0)).load_state_dict(a.state_dict())


if __name__ == "__main__":
    unittest.main()
