"""
End-to-end checks across apps: configuration numbers, attention and voxel
invariants, the loss combination, determinism of a full chain of stage runs,
and (with MMFUSION_SLOW_TESTS=1) the full-size partition and toy overfit runs.
"""

import filecmp
import os
import tempfile
import unittest

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.clouds import write_kitti_bin
from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame
from mmfusion.apps.dataio.synthetic import placeholder_image, random_cloud, synth_scene
from mmfusion.apps.detect_head.head import LossWeights, combine_losses
from mmfusion.apps.mffm.fusion import cross_attention, fuse_residual, pool_and_encode, project_qkv
from mmfusion.apps.pipeline.config import PipelineConfig, tiny_config, toy_config
from mmfusion.apps.pipeline.model import Pipeline
from mmfusion.apps.pipeline.runs import (
    fit_scenes,
    run_encode,
    run_fuse,
    run_synth_scenes,
    run_train_toy,
    run_voxelize,
)
from mmfusion.apps.tensor_core.checkpoint import save_checkpoint
from mmfusion.apps.tensor_core.engine import Tensor, no_grad
from mmfusion.apps.voxelizer.voxels import VoxelBatch, voxelize
from mmfusion.apps.vlpm.module import vlpm_forward

SLOW = os.getenv("MMFUSION_SLOW_TESTS") == "1"


class ConfigurationFidelityTests(SimpleTestCase):
    def test_default_numbers(self):
        cfg = PipelineConfig()
        gx, gy, gz = cfg.voxelizer.grid_dims
        # reported as (y, x, z)
        self.assertEqual((gy, gx, gz), (1600, 1408, 40))
        self.assertEqual(cfg.streams.lidar_out, (256, 200, 176))
        self.assertEqual(cfg.streams.image_out, (256, 39, 11))
        self.assertEqual(cfg.mffm.pooled_hw, (25, 22))
        self.assertEqual(cfg.mffm.tokens, 550)
        self.assertEqual((cfg.loss.alpha, cfg.loss.beta), (2.0, 0.2))


class AttentionNormalizationTests(SimpleTestCase):
    def test_rows_sum_to_one_and_stay_inside_value_bounds(self):
        cfg = tiny_config()
        pipeline = Pipeline(cfg)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            params = pipeline.init_params(seed=seed)
            f_l = FeatureMap(rng.normal(size=cfg.streams.lidar_out))
            f_i = FeatureMap(rng.normal(scale=3.0, size=cfg.streams.image_out), Frame.IMAGE)
            with no_grad():
                tl, ti = pool_and_encode(f_l, f_i, cfg.mffm, params)
                q, k, v = project_qkv(tl, ti, params)
                w, wv = cross_attention(q, k, v, cfg.mffm.channels)
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-5)
            lo, hi = v.data.min(axis=0), v.data.max(axis=0)
            self.assertTrue(np.all(wv.data >= lo - 1e-9), seed)
            self.assertTrue(np.all(wv.data <= hi + 1e-9), seed)


class PermutationInvarianceTests(SimpleTestCase):
    def test_point_order_inside_voxels(self):
        cfg = toy_config()
        pipeline = Pipeline(cfg)
        params = pipeline.init_params()
        scene = synth_scene(4, 2, 400, cfg.range, points_per_object=80)
        batch = pipeline.voxelize(scene.cloud)
        batch = VoxelBatch(
            batch.indices[:100], batch.points[:100], batch.counts[:100], batch.means[:100], batch.grid
        )
        rng = np.random.default_rng(1)
        shuffled = VoxelBatch(batch.indices, batch.points.copy(), batch.counts, batch.means, batch.grid)
        for i, c in enumerate(batch.counts):
            shuffled.points[i, :c] = batch.points[i, rng.permutation(c)]
        with no_grad():
            a = vlpm_forward(batch, cfg.vlpm, params).data
            b = vlpm_forward(shuffled, cfg.vlpm, params).data
        self.assertEqual(a.dtype, np.float32)
        self.assertLess(float(np.max(np.abs(a - b))), 1e-5)


class ZeroImageIdentityTests(SimpleTestCase):
    def test_fusion_leaves_lidar_features_untouched(self):
        cfg = tiny_config()
        pipeline = Pipeline(cfg)
        params = pipeline.init_params(seed=8)
        scene = synth_scene(8, 1, 20, cfg.range, points_per_object=24)
        with no_grad():
            f_l = pipeline.lidar_features(pipeline.voxelize(scene.cloud), params)
            f_i = FeatureMap(np.zeros(cfg.streams.image_out), Frame.IMAGE)
            tl, ti = pool_and_encode(f_l, f_i, cfg.mffm, params)
            q, k, v = project_qkv(tl, ti, params)
            w, _ = cross_attention(q, k, v, cfg.mffm.channels)
            pre = fuse_residual(f_l, w, v, tl, cfg.mffm, params)
        np.testing.assert_array_equal(pre.data, f_l.data)


class VoxelPartitionTests(SimpleTestCase):
    def check_partition(self, n_points):
        cfg = PipelineConfig().voxelizer
        cloud = random_cloud(3, n_points, cfg.range)
        one = voxelize(cloud, cfg, workers=1)
        eight = voxelize(cloud, cfg, workers=8)
        self.assertEqual(int(one.counts.sum()) + one.dropped_by_points + one.dropped_by_cap, n_points)
        keys = one.indices[:, 0] * 10**8 + one.indices[:, 1] * 10**4 + one.indices[:, 2]
        self.assertEqual(len(np.unique(keys)), len(one))
        for field in ("indices", "points", "counts", "means"):
            np.testing.assert_array_equal(getattr(one, field), getattr(eight, field))
        self.assertEqual(one.summary(), eight.summary())

    def test_partition_short(self):
        self.check_partition(20_000)

    @unittest.skipUnless(SLOW, "set MMFUSION_SLOW_TESTS=1")
    def test_partition_full_frame(self):
        self.check_partition(120_000)


class LossCombinationTests(SimpleTestCase):
    def test_total_is_weighted_sum(self):
        weights = LossWeights()
        rng = np.random.default_rng(0)
        for cls, reg, dir_ in rng.uniform(0.0, 5.0, size=(10, 3)):
            cls, reg, dir_ = float(cls), float(reg), float(dir_)
            self.assertEqual(combine_losses(cls, reg, dir_, weights), cls + 2.0 * reg + 0.2 * dir_)
            tensor = combine_losses(Tensor(np.float64(cls)), Tensor(np.float64(reg)), Tensor(np.float64(dir_)), weights)
            self.assertEqual(float(tensor.item()), cls + 2.0 * reg + 0.2 * dir_)

    def test_pipeline_loss_parts_add_up(self):
        cfg = tiny_config()
        pipeline = Pipeline(cfg)
        prepared = pipeline.prepare(synth_scene(5, 1, 10, cfg.range, points_per_object=24))
        parts = pipeline.scene_loss(prepared, pipeline.init_params())
        cls, reg, dir_ = (float(getattr(parts, n).item()) for n in ("cls", "reg", "dir"))
        self.assertAlmostEqual(float(parts.total.item()), cls + 2.0 * reg + 0.2 * dir_, places=12)


class DeterminismTests(SimpleTestCase):
    def run_chain(self, tmp, tag):
        cfg = tiny_config()
        scenes = os.path.join(tmp, "scenes.json")
        if not os.path.exists(scenes):
            run_synth_scenes(cfg, 2, 1, 10, scenes, points_per_object=24)
            write_kitti_bin(synth_scene(9, 1, 30, cfg.range, points_per_object=24).cloud, os.path.join(tmp, "f.bin"))
            np.save(os.path.join(tmp, "img.npy"), placeholder_image(9, cfg.streams.image_in))

        def out(name):
            return os.path.join(tmp, f"{tag}_{name}")

        run_train_toy(cfg, scenes, 3, 1e-2, checkpoint_path=out("ck.mmck"), trace_path=out("trace.csv"))
        run_voxelize(cfg, os.path.join(tmp, "f.bin"), out("v.mmvx"), out("v.json"))
        run_encode(cfg, "lidar", out("v.mmvx"), out("ck.mmck"), out("l.mmff"))
        run_encode(cfg, "image", os.path.join(tmp, "img.npy"), out("ck.mmck"), out("i.mmff"))
        run_fuse(cfg, out("l.mmff"), out("i.mmff"), out("ck.mmck"), out("fused.mmff"))

    def test_two_runs_are_bit_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.run_chain(tmp, "a")
            self.run_chain(tmp, "b")
            for name in ("ck.mmck", "trace.csv", "v.mmvx", "fused.mmff"):
                a, b = os.path.join(tmp, f"a_{name}"), os.path.join(tmp, f"b_{name}")
                self.assertTrue(filecmp.cmp(a, b, shallow=False), name)

    def test_checkpoint_bytes_are_stable(self):
        cfg = tiny_config()
        params = Pipeline(cfg).init_params(seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "p.mmck")
            save_checkpoint(params, path)
            save_checkpoint(params, os.path.join(tmp, "q.mmck"))
            self.assertTrue(filecmp.cmp(path, os.path.join(tmp, "q.mmck"), shallow=False))


class ToyOverfitTests(SimpleTestCase):
    def scenes(self, cfg):
        return [synth_scene(cfg.seed + i, 1, 200, cfg.range) for i in range(5)]

    def check_overfit(self, optimizer, lr):
        cfg = toy_config()
        result, recall = fit_scenes(cfg, self.scenes(cfg), 500, lr, optimizer=optimizer)
        self.assertEqual(len(result.trace), 500)
        self.assertLessEqual(result.final_loss, 0.1 * result.initial_loss)
        self.assertGreaterEqual(recall, 0.9)

    def test_short_gradient_descent_run_reduces_loss(self):
        cfg = toy_config()
        result, _ = fit_scenes(cfg, self.scenes(cfg)[:2], 15, 5e-3)
        self.assertLess(result.final_loss, result.initial_loss)

    def test_short_adam_run_reduces_loss(self):
        cfg = toy_config()
        result, _ = fit_scenes(cfg, self.scenes(cfg)[:2], 15, 1e-2, optimizer="adam")
        self.assertLess(result.final_loss, result.initial_loss)

    @unittest.skipUnless(SLOW, "set MMFUSION_SLOW_TESTS=1")
    def test_gradient_descent_overfits_five_scenes(self):
        self.check_overfit("sgd", 2e-2)

    @unittest.skipUnless(SLOW, "set MMFUSION_SLOW_TESTS=1")
    def test_adam_overfits_five_scenes(self):
        self.check_overfit("adam", 1e-2)
