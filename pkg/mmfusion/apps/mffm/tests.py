import math
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame
from mmfusion.apps.mffm.fusion import (
    MffmConfig,
    cross_attention,
    fuse_residual,
    init_mffm,
    mffm_forward,
    pool_and_encode,
    project_qkv,
)
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.nn import adaptive_pool_matrix
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, NumericError, ShapeError

TINY = MffmConfig(pooled_hw=(2, 2), channels=3, fusion_post_channels=(2, 3))


def store(cfg, seed=0, dtype="f64"):
    params = ParamStore(seed=seed, dtype=dtype)
    init_mffm(params, cfg)
    return params


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class MffmConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = MffmConfig()
        self.assertEqual(cfg.pooled_hw, (25, 22))
        self.assertEqual(cfg.tokens, 550)
        self.assertEqual(cfg.fusion_post_channels, (128, 256))

    def test_pooling_sizes_from_ablation_are_legal(self):
        for hw in ((25, 22), (50, 44), (100, 88)):
            self.assertEqual(MffmConfig(pooled_hw=hw).pooled_hw, hw)

    def test_post_stack_must_end_at_channel_width(self):
        with self.assertRaises(ConfigError):
            MffmConfig(fusion_post_channels=(128, 64))

    def test_unknown_residual_mode(self):
        with self.assertRaises(ConfigError):
            MffmConfig(residual_mode="both")

    def test_default_pooling_uses_exact_eight_by_eight_windows(self):
        for n_in, n_out in ((200, 25), (176, 22)):
            m = adaptive_pool_matrix(n_in, n_out)
            np.testing.assert_array_equal((m > 0).sum(axis=1), 8)
            np.testing.assert_allclose(m.sum(axis=1), 1.0)


class PoolAndEncodeTests(SimpleTestCase):
    def test_constant_map_gives_constant_tokens(self):
        params = store(TINY)
        f_l = FeatureMap(np.full((3, 4, 6), 2.5))
        f_i = FeatureMap(np.zeros((3, 1, 1)), Frame.IMAGE)
        tl, ti = pool_and_encode(f_l, f_i, TINY, params)
        self.assertEqual(tl.dims, [4, 3])
        np.testing.assert_allclose(tl.data, 2.5)
        np.testing.assert_allclose(ti.data, 0.0)

    def test_same_size_is_flatten(self):
        params = store(TINY)
        data = np.random.default_rng(0).normal(size=(3, 2, 2))
        tl, _ = pool_and_encode(FeatureMap(data), FeatureMap(data), TINY, params)
        np.testing.assert_allclose(tl.data, data.reshape(3, 4).T, rtol=1e-12)

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            pool_and_encode(FeatureMap(np.zeros((3, 2, 2))), FeatureMap(np.zeros((2, 2, 2))), TINY, store(TINY))


class ProjectQkvTests(SimpleTestCase):
    def test_identity_phi(self):
        params = store(TINY)
        params.set_value("mffm.phi.w", np.eye(3))
        tokens = t64(np.random.default_rng(1).normal(size=(4, 3)))
        q, _, _ = project_qkv(tokens, tokens, params)
        np.testing.assert_array_equal(q.data, tokens.data)

    def test_zero_image_tokens_zero_keys_and_values(self):
        params = store(TINY)
        _, k, v = project_qkv(t64(np.ones((4, 3))), t64(np.zeros((4, 3))), params)
        np.testing.assert_array_equal(k.data, 0.0)
        np.testing.assert_array_equal(v.data, 0.0)

    def test_scalar_two_token_hand_evaluation(self):
        cfg = MffmConfig(pooled_hw=(1, 2), channels=1, fusion_post_channels=(1, 1))
        params = store(cfg)
        for name, (w, b) in {"phi": (2.0, 0.5), "psi": (-1.0, 0.0), "theta": (3.0, 1.0)}.items():
            params.set_value(f"mffm.{name}.w", [[w]])
            params.set_value(f"mffm.{name}.b", [b])
        q, k, v = project_qkv(t64([[1.0], [2.0]]), t64([[0.5], [-1.0]]), params)
        np.testing.assert_allclose(q.data, [[2.5], [4.5]])
        np.testing.assert_allclose(k.data, [[-0.5], [1.0]])
        np.testing.assert_allclose(v.data, [[2.5], [-2.0]])


class CrossAttentionTests(SimpleTestCase):
    def test_hand_softmax(self):
        w, _ = cross_attention(t64([[2.0]]), t64([[1.0], [3.0]]), t64([[0.0], [1.0]]), 1)
        np.testing.assert_allclose(w.data, [[0.0180, 0.9820]], atol=1e-4)
        self.assertAlmostEqual(w.data[0, 1], 1.0 / (1.0 + math.exp(-4.0)), places=12)

    def test_equal_keys_give_uniform_weights(self):
        v = t64(np.random.default_rng(2).normal(size=(3, 2)))
        w, a = cross_attention(t64(np.random.default_rng(3).normal(size=(2, 2))), t64(np.ones((3, 2))), v, 2)
        np.testing.assert_allclose(w.data, 1.0 / 3.0)
        np.testing.assert_allclose(a.data, np.broadcast_to(v.data.mean(axis=0), (2, 2)))

    def test_single_token(self):
        w, a = cross_attention(t64([[0.3, 0.1]]), t64([[-1.0, 2.0]]), t64([[4.0, 5.0]]), 2)
        np.testing.assert_array_equal(w.data, [[1.0]])
        np.testing.assert_allclose(a.data, [[4.0, 5.0]])

    def test_rows_are_stochastic_and_shift_invariant(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q, k = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            w, _ = cross_attention(t64(q), t64(k), t64(rng.normal(size=(5, 4))), 4)
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-5)
            self.assertTrue(np.all((w.data > 0) & (w.data <= 1)))
            logits = q @ k.T / 2.0
            shifted = engine.softmax(t64(logits + rng.normal(size=(5, 1)) * 10), axis=-1)
            np.testing.assert_allclose(shifted.data, w.data, atol=1e-6)

    def test_non_finite_logits(self):
        with self.assertRaises(NumericError):
            cross_attention(t64([[np.inf]]), t64([[1.0]]), t64([[1.0]]), 1)


class FuseTests(SimpleTestCase):
    def test_zero_image_path_is_identity_before_post_stack(self):
        params = store(TINY, seed=5)
        f_l = FeatureMap(np.random.default_rng(6).normal(size=(3, 5, 4)))
        f_i = FeatureMap(np.zeros((3, 3, 2)), Frame.IMAGE)
        tl, ti = pool_and_encode(f_l, f_i, TINY, params)
        q, k, v = project_qkv(tl, ti, params)
        w, _ = cross_attention(q, k, v, 3)
        pre = fuse_residual(f_l, w, v, tl, TINY, params)
        np.testing.assert_array_equal(pre.data, f_l.data)

    def test_constant_residual_adds_constant(self):
        cfg = MffmConfig(pooled_hw=(2, 2), channels=1, fusion_post_channels=(1, 1))
        params = store(cfg)
        params.set_value("mffm.gamma.w", [[0.0]])
        params.set_value("mffm.gamma.b", [0.75])
        f_l = FeatureMap(np.random.default_rng(7).normal(size=(1, 6, 5)))
        w = t64(np.full((4, 4), 0.25))
        v = t64(np.random.default_rng(8).normal(size=(4, 1)))
        pre = fuse_residual(f_l, w, v, v, cfg, params)
        np.testing.assert_allclose(pre.data - f_l.data, 0.75, rtol=1e-12)

    def test_two_token_scalar_end_to_end(self):
        cfg = MffmConfig(pooled_hw=(1, 2), channels=1, fusion_post_channels=(1, 1))
        params = store(cfg)
        setting = {"phi": (1.0, 0.0), "psi": (2.0, 0.0), "theta": (1.0, 0.5), "gamma": (0.5, 0.1)}
        for name, (wt, b) in setting.items():
            params.set_value(f"mffm.{name}.w", [[wt]])
            params.set_value(f"mffm.{name}.b", [b])
        f_l = FeatureMap(np.array([[[1.0, 3.0]]]))
        f_i = FeatureMap(np.array([[[0.5, -0.5]]]), Frame.IMAGE)
        # straight-line evaluation
        q = [1.0, 3.0]
        k = [1.0, -1.0]
        v = [1.0, 0.0]
        expected = []
        for i in range(2):
            e = [math.exp(q[i] * kj) for kj in k]
            w = [x / sum(e) for x in e]
            attended = w[0] * v[0] + w[1] * v[1]
            expected.append(f_l.data[0, 0, i] + 0.5 * (attended + v[i]) + 0.1)
        tl, ti = pool_and_encode(f_l, f_i, cfg, params)
        q_t, k_t, v_t = project_qkv(tl, ti, params)
        w_t, _ = cross_attention(q_t, k_t, v_t, 1)
        pre = fuse_residual(f_l, w_t, v_t, tl, cfg, params)
        np.testing.assert_allclose(pre.data[0, 0], expected, rtol=1e-12)

    def test_query_side_residual_uses_lidar_tokens(self):
        cfg = MffmConfig(pooled_hw=(1, 1), channels=1, residual_mode="query_side", fusion_post_channels=(1, 1))
        params = store(cfg)
        params.set_value("mffm.gamma.w", [[1.0]])
        f_l = FeatureMap(np.array([[[2.0]]]))
        pre = fuse_residual(f_l, t64([[1.0]]), t64([[0.5]]), t64([[2.0]]), cfg, params)
        np.testing.assert_allclose(pre.data, [[[4.5]]])

    def test_precomputed_attended_matches_recomputed(self):
        params = store(TINY, seed=3)
        params.set_value("mffm.gamma.w", np.eye(3))
        rng = np.random.default_rng(9)
        f_l = FeatureMap(rng.normal(size=(3, 5, 4)))
        f_i = FeatureMap(rng.normal(size=(3, 3, 2)), Frame.IMAGE)
        tl, ti = pool_and_encode(f_l, f_i, TINY, params)
        q, k, v = project_qkv(tl, ti, params)
        w, wv = cross_attention(q, k, v, 3)
        recomputed = fuse_residual(f_l, w, v, tl, TINY, params)
        passed = fuse_residual(f_l, w, v, tl, TINY, params, attended=wv)
        np.testing.assert_array_equal(passed.data, recomputed.data)
        shifted = fuse_residual(f_l, w, v, tl, TINY, params, attended=t64(wv.data + 1.0))
        self.assertFalse(np.allclose(shifted.data, recomputed.data))


class MffmForwardTests(SimpleTestCase):
    def test_output_dims_match_lidar_map(self):
        params = store(TINY, seed=1)
        out = mffm_forward(FeatureMap(np.ones((3, 7, 5))), FeatureMap(np.ones((3, 3, 2))), TINY, params)
        self.assertEqual(out.dims, [3, 7, 5])

    def test_attention_output_is_reused(self):
        params = store(TINY, seed=1)
        with mock.patch("mmfusion.apps.mffm.fusion.fuse_residual", wraps=fuse_residual) as spy:
            mffm_forward(FeatureMap(np.ones((3, 7, 5))), FeatureMap(np.ones((3, 3, 2))), TINY, params)
        attended = spy.call_args.args[6]
        self.assertIsNotNone(attended)
        self.assertEqual(attended.dims, [4, 3])

    def test_disabled_fusion_ignores_image(self):
        cfg = MffmConfig(pooled_hw=(2, 2), channels=3, fusion_post_channels=(2, 3), enabled=False)
        params = store(cfg, seed=2)
        f_l = FeatureMap(np.random.default_rng(0).normal(size=(3, 4, 4)))
        a = mffm_forward(f_l, FeatureMap(np.zeros((3, 2, 2))), cfg, params).data
        b = mffm_forward(f_l, FeatureMap(np.ones((3, 2, 2))), cfg, params).data
        np.testing.assert_array_equal(a, b)
        self.assertNotIn("mffm.phi.w", params)

    def test_gradients_match_finite_differences(self):
        params = store(TINY, seed=3)
        rng = np.random.default_rng(4)
        for name in params.names():
            if name.endswith(".b") or name.startswith("mffm.pos"):
                params.set_value(name, rng.normal(scale=0.1, size=params.value(name).shape))
        f_l = FeatureMap(rng.normal(size=(3, 4, 3)))
        f_i = FeatureMap(rng.normal(size=(3, 3, 2)), Frame.IMAGE)
        weights = rng.normal(size=(3, 4, 3))

        def loss(p):
            return (mffm_forward(f_l, f_i, TINY, p).tensor * weights).sum()

        report = grad_check(loss, params, tol=1e-5)
        self.assertTrue(report.passed, msg=f"{report.worst_name}: {report.max_rel_error}")
