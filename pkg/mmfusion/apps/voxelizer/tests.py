import copy
import os
import struct
import tempfile
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.clouds import PointCloud, RangeSpec
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.voxelizer.dump import decode_voxel_batch, encode_voxel_batch, load_voxel_batch, save_voxel_batch
from mmfusion.apps.voxelizer.voxels import (
    VoxelConfig,
    mean_pool_features,
    scatter_bev,
    voxel_index,
    voxelize,
)
from mmfusion.errors import ConfigError, DomainError, FormatError

COARSE = VoxelConfig(
    voxel_size=(0.5, 0.5, 0.5),
    range=RangeSpec(x=(0.0, 8.0), y=(-4.0, 4.0), z=(-3.0, 5.0)),
    max_points_per_voxel=2,
)


def cloud(rows):
    return PointCloud(np.asarray(rows, dtype=np.float32).reshape(-1, 4))


def random_cloud(seed, n, rs=RangeSpec()):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(rs.mins, rs.maxs, size=(n, 3))
    pts = np.hstack([coords, rng.uniform(size=(n, 1))]).astype(np.float32)
    pts[:, :3] = np.minimum(pts[:, :3], np.nextafter(rs.maxs.astype(np.float32), -np.inf))
    return PointCloud(pts)


class VoxelConfigTests(SimpleTestCase):
    def test_default_grid(self):
        self.assertEqual(VoxelConfig().grid_dims, (1408, 1600, 40))

    def test_caps_follow_phase(self):
        self.assertEqual(VoxelConfig().max_voxels, 16000)
        self.assertEqual(VoxelConfig(phase="test").max_voxels, 40000)

    def test_indivisible_extent_rejected(self):
        with self.assertRaises(ConfigError):
            VoxelConfig(voxel_size=(0.3, 0.05, 0.1))

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError):
            VoxelConfig.from_dict({"voxels": 3})

    def test_bad_sampling_mode_rejected(self):
        with self.assertRaises(ConfigError):
            VoxelConfig(sampling="middle")


class VoxelIndexTests(SimpleTestCase):
    def test_hand_floor_arithmetic(self):
        self.assertEqual(voxel_index((0.12, -39.97, -2.95), VoxelConfig()), (2, 0, 0))

    def test_lower_corner(self):
        self.assertEqual(voxel_index((0.0, -40.0, -3.0), VoxelConfig()), (0, 0, 0))

    def test_out_of_range_is_domain_error(self):
        with self.assertRaises(DomainError):
            voxel_index((70.4, 0.0, 0.0), VoxelConfig())

    def test_cell_re_contains_point(self):
        cfg = VoxelConfig()
        pts = random_cloud(2, 500).points
        size = np.asarray(cfg.voxel_size)
        for p in pts[:100]:
            idx = np.asarray(voxel_index(p, cfg))
            lo = cfg.range.mins + idx * size
            self.assertTrue(np.all(lo <= p[:3] + 1e-9))
            self.assertTrue(np.all(p[:3] < lo + size + 1e-9))


class VoxelizeTests(SimpleTestCase):
    def test_two_points_one_voxel(self):
        batch = voxelize(cloud([[1, 2, 3, 0.5], [1.01, 2.01, 3.01, 0.1]]), COARSE)
        self.assertEqual(len(batch), 1)
        self.assertEqual(int(batch.counts[0]), 2)
        np.testing.assert_allclose(batch.means[0], [1.005, 2.005, 3.005, 0.3], atol=1e-6)

    def test_first_n_points_by_input_order(self):
        rows = [[1, 2, 3, 0.1], [1.1, 2.1, 3.1, 0.2], [1.2, 2.2, 3.2, 0.3]]
        batch = voxelize(cloud(rows), COARSE)
        self.assertEqual(int(batch.counts[0]), 2)
        np.testing.assert_array_equal(batch.points[0], np.asarray(rows[:2], dtype=np.float32))
        self.assertEqual(batch.dropped_by_points, 1)

    def test_empty_cloud(self):
        batch = voxelize(PointCloud(), VoxelConfig())
        self.assertEqual(len(batch), 0)
        self.assertEqual(batch.points.shape, (0, 5, 4))

    def test_uncropped_input_is_domain_error(self):
        with self.assertRaises(DomainError):
            voxelize(cloud([[80.0, 0, 0, 0]]), VoxelConfig())

    def test_padding_rows_are_zero(self):
        batch = voxelize(random_cloud(1, 400, COARSE.range), COARSE)
        for k, count in enumerate(batch.counts):
            self.assertTrue(np.all(batch.points[k, count:] == 0))

    def test_partition_and_uniqueness_under_cap(self):
        cfg = VoxelConfig(max_voxels_train=300, seed=5)
        batch = voxelize(random_cloud(0, 5000), cfg)
        self.assertLessEqual(len(batch), 300)
        self.assertEqual(int(batch.counts.sum()) + batch.dropped_by_points + batch.dropped_by_cap, 5000)
        self.assertEqual(len({tuple(r) for r in batch.indices.tolist()}), len(batch))
        self.assertTrue(np.all(batch.indices >= 0))
        self.assertTrue(np.all(batch.indices < np.asarray(cfg.grid_dims)))

    def test_worker_count_does_not_change_result(self):
        pc = random_cloud(9, 20000, COARSE.range)
        one = voxelize(pc, COARSE, workers=1)
        eight = voxelize(pc, COARSE, workers=8)
        for a, b in ((one.indices, eight.indices), (one.points, eight.points), (one.means, eight.means)):
            self.assertEqual(a.tobytes(), b.tobytes())

    def test_random_sampling_is_seeded(self):
        cfg = VoxelConfig(
            voxel_size=COARSE.voxel_size, range=COARSE.range, max_points_per_voxel=2, sampling="random", seed=3
        )
        pc = random_cloud(4, 3000, COARSE.range)
        a, b = voxelize(pc, cfg), voxelize(pc, cfg)
        self.assertEqual(a.points.tobytes(), b.points.tobytes())
        self.assertEqual(int(a.counts.sum()) + a.dropped_by_points, 3000)

    def test_mean_pool_matches_means(self):
        batch = voxelize(random_cloud(5, 200, COARSE.range), COARSE)
        np.testing.assert_array_equal(mean_pool_features(batch).data, batch.means)


class ScatterBevTests(SimpleTestCase):
    grid = (4, 3, 2)

    def test_single_voxel(self):
        fmap = scatter_bev(Tensor(np.array([[1.0, 2.0]])), np.array([[2, 1, 0]]), self.grid)
        self.assertEqual(fmap.dims, [2, 3, 4])
        expected = np.zeros((2, 3, 4))
        expected[:, 1, 2] = [1.0, 2.0]
        np.testing.assert_array_equal(fmap.data, expected)

    def test_elementwise_max_over_z(self):
        feats = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
        fmap = scatter_bev(feats, np.array([[0, 0, 0], [0, 0, 1]]), self.grid)
        np.testing.assert_array_equal(fmap.data[:, 0, 0], [3.0, 5.0])

    def test_no_voxels(self):
        fmap = scatter_bev(Tensor(np.zeros((0, 3))), np.zeros((0, 3), dtype=np.int64), self.grid)
        np.testing.assert_array_equal(fmap.data, np.zeros((3, 3, 4)))

    def test_index_outside_grid(self):
        with self.assertRaises(DomainError):
            scatter_bev(Tensor(np.ones((1, 1))), np.array([[4, 0, 0]]), self.grid)

    def test_height_index_outside_grid(self):
        for iz in (2, -1):
            with self.assertRaises(DomainError):
                scatter_bev(Tensor(np.ones((1, 1))), np.array([[0, 0, iz]]), self.grid)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(12, 3))
        idx = np.stack([rng.integers(0, 4, 12), rng.integers(0, 3, 12), rng.integers(0, 2, 12)], axis=1)
        perm = rng.permutation(12)
        a = scatter_bev(Tensor(feats), idx, self.grid).data
        b = scatter_bev(Tensor(feats[perm]), idx[perm], self.grid).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_matches_finite_differences(self):
        params = ParamStore(seed=1, dtype="f64")
        params.add("f", np.random.default_rng(1).normal(size=(5, 2)))
        idx = np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1], [3, 2, 1], [3, 2, 0]])
        weights = np.random.default_rng(2).normal(size=(2, 3, 4))

        def loss(p):
            return (scatter_bev(p["f"], idx, self.grid).tensor * weights).sum()

        self.assertTrue(grad_check(loss, params, tol=1e-6).passed)


class VoxelDumpTests(SimpleTestCase):
    def test_round_trip(self):
        batch = voxelize(random_cloud(6, 300, COARSE.range), COARSE)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "b.mmvx")
            save_voxel_batch(batch, path)
            back = load_voxel_batch(path)
        np.testing.assert_array_equal(back.indices, batch.indices)
        np.testing.assert_array_equal(back.points, batch.points)
        np.testing.assert_array_equal(back.counts, batch.counts)
        self.assertEqual(back.grid, batch.grid)
        self.assertEqual(back.range, COARSE.range)
        self.assertEqual(back.voxel_size, (0.5, 0.5, 0.5))
        back.check_config(COARSE)

    def test_empty_batch_round_trip(self):
        back = decode_voxel_batch(encode_voxel_batch(voxelize(PointCloud(), VoxelConfig())))
        self.assertEqual(len(back), 0)

    def test_bad_magic(self):
        payload = encode_voxel_batch(voxelize(PointCloud(), VoxelConfig()))
        with self.assertRaises(FormatError):
            decode_voxel_batch(b"MMFF" + payload[4:])

    def test_truncated(self):
        payload = encode_voxel_batch(voxelize(random_cloud(0, 50, COARSE.range), COARSE))
        with self.assertRaises(FormatError):
            decode_voxel_batch(payload[:-1])

    def test_header_records_geometry(self):
        payload = encode_voxel_batch(voxelize(PointCloud(), COARSE))
        fields = struct.unpack_from("<4sH5I9d", payload, 0)
        self.assertEqual(fields[1], 2)
        self.assertEqual(fields[4:7], COARSE.grid_dims)
        self.assertEqual(fields[7:13], (0.0, 8.0, -4.0, 4.0, -3.0, 5.0))
        self.assertEqual(fields[13:], (0.5, 0.5, 0.5))

    def test_index_outside_stored_grid(self):
        batch = voxelize(random_cloud(2, 40, COARSE.range), COARSE)
        gx, gy, gz = COARSE.grid_dims
        for axis, bad in ((0, gx), (1, gy), (2, gz), (2, -1)):
            with self.subTest(axis=axis, value=bad):
                broken = copy.deepcopy(batch)
                broken.indices[0, axis] = bad
                with self.assertRaises(FormatError) as ctx:
                    decode_voxel_batch(encode_voxel_batch(broken), path="bad.mmvx")
                self.assertIn("outside the stored", str(ctx.exception))

    def test_invalid_range_in_header(self):
        payload = bytearray(encode_voxel_batch(voxelize(PointCloud(), COARSE)))
        payload[26:34] = struct.pack("<d", 9.0)  # x min above x max
        with self.assertRaises(FormatError):
            decode_voxel_batch(bytes(payload))


class BatchConfigCheckTests(SimpleTestCase):
    def test_matching_config_passes(self):
        voxelize(random_cloud(3, 30, COARSE.range), COARSE).check_config(COARSE)

    def test_mismatches_are_config_errors(self):
        batch = voxelize(random_cloud(3, 30, COARSE.range), COARSE)
        others = {
            "grid": replace(COARSE, range=RangeSpec(x=(0.0, 4.0), y=(-4.0, 4.0), z=(-3.0, 5.0))),
            "max points": replace(COARSE, max_points_per_voxel=3),
            "range": replace(COARSE, range=RangeSpec(x=(1.0, 9.0), y=(-4.0, 4.0), z=(-3.0, 5.0))),
            "voxel size": replace(
                COARSE, voxel_size=(0.25, 1.0, 0.5), range=RangeSpec(x=(0.0, 4.0), y=(-8.0, 8.0), z=(-3.0, 5.0))
            ),
        }
        for what, cfg in others.items():
            with self.subTest(what):
                with self.assertRaises(ConfigError) as ctx:
                    batch.check_config(cfg)
                self.assertIn(what, str(ctx.exception))
