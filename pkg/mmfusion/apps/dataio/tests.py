import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.clouds import (
    PointCloud,
    RangeSpec,
    crop_range,
    decode_kitti_bin,
    read_kitti_bin,
    write_kitti_bin,
)
from mmfusion.apps.dataio.feature_maps import (
    FeatureMap,
    Frame,
    decode_feature_map,
    encode_feature_map,
    load_feature_map,
    save_feature_map,
)
from mmfusion.apps.dataio.images import load_image, nearest_resize
from mmfusion.apps.dataio.synthetic import load_scenes, placeholder_image, save_scenes, synth_scene
from mmfusion.errors import ConfigError, DataError, FormatError


class KittiBinTests(SimpleTestCase):
    def test_decodes_one_little_endian_point(self):
        payload = bytes.fromhex("0000803f" "00000040" "00004040" "0000003f")
        cloud = decode_kitti_bin(payload)
        self.assertEqual(len(cloud), 1)
        np.testing.assert_array_equal(cloud.points[0], [1.0, 2.0, 3.0, 0.5])

    def test_empty_file_gives_empty_cloud(self):
        self.assertEqual(len(decode_kitti_bin(b"")), 0)

    def test_seventeen_bytes_reports_offset_sixteen(self):
        with self.assertRaises(FormatError) as ctx:
            decode_kitti_bin(b"\x00" * 17, path="frame.bin")
        self.assertEqual(ctx.exception.offset, 16)
        self.assertIn("path=frame.bin", str(ctx.exception))

    def test_non_finite_value_is_a_data_error(self):
        payload = np.array([[1.0, np.nan, 0.0, 0.0]], dtype="<f4").tobytes()
        with self.assertRaises(DataError) as ctx:
            decode_kitti_bin(payload)
        self.assertEqual(ctx.exception.offset, 4)

    def test_file_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.normal(size=(50, 4)).astype(np.float32))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "f.bin")
            write_kitti_bin(cloud, path)
            back = read_kitti_bin(path)
        self.assertEqual(back.points.tobytes(), cloud.points.tobytes())

    def test_missing_file_is_a_format_error_with_path(self):
        with self.assertRaises(FormatError) as ctx:
            read_kitti_bin("/nonexistent/frame.bin")
        self.assertIn("/nonexistent/frame.bin", str(ctx.exception))


class CropRangeTests(SimpleTestCase):
    def cloud(self, *xs):
        return PointCloud(np.array([[x, 0.0, 0.0, 0.2] for x in xs], dtype=np.float32))

    def test_interior_point_is_kept(self):
        self.assertEqual(len(crop_range(self.cloud(35.0), RangeSpec())), 1)

    def test_point_beyond_range_is_dropped(self):
        self.assertEqual(len(crop_range(self.cloud(80.0), RangeSpec())), 0)

    def test_upper_bound_is_open(self):
        self.assertEqual(len(crop_range(self.cloud(70.4), RangeSpec())), 0)
        self.assertEqual(len(crop_range(self.cloud(0.0), RangeSpec())), 1)

    def test_order_preserved_and_idempotent(self):
        rng = np.random.default_rng(0)
        pts = np.hstack([rng.uniform(-10, 90, size=(200, 3)), rng.uniform(size=(200, 1))]).astype(np.float32)
        once = crop_range(PointCloud(pts), RangeSpec())
        twice = crop_range(once, RangeSpec())
        np.testing.assert_array_equal(once.points, twice.points)
        np.testing.assert_array_equal(once.points, pts[RangeSpec().contains(pts[:, :3])])

    def test_range_rejects_inverted_axis(self):
        with self.assertRaises(ConfigError):
            RangeSpec(x=(1.0, 1.0))

    def test_range_from_dict_rejects_unknown_keys(self):
        with self.assertRaises(ConfigError):
            RangeSpec.from_dict({"w": [0, 1]})


class FeatureMapTests(SimpleTestCase):
    def test_round_trip_bit_identical(self):
        data = np.random.default_rng(1).normal(size=(4, 5, 6)).astype(np.float32)
        back = decode_feature_map(encode_feature_map(FeatureMap(data)))
        self.assertEqual(back.data.tobytes(), data.tobytes())

    def test_image_sized_map_keeps_dims(self):
        fmap = FeatureMap(np.zeros((256, 39, 11), dtype=np.float32), Frame.IMAGE)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "img.mmff")
            save_feature_map(fmap, path)
            back = load_feature_map(path, Frame.IMAGE)
        self.assertEqual(back.dims, [256, 39, 11])
        self.assertEqual(back.frame, Frame.IMAGE)

    def test_bad_magic(self):
        payload = b"XXXX" + encode_feature_map(FeatureMap(np.zeros((1, 1, 1))))[4:]
        with self.assertRaises(FormatError):
            decode_feature_map(payload)

    def test_truncated_payload(self):
        payload = encode_feature_map(FeatureMap(np.ones((2, 2, 2))))[:-3]
        with self.assertRaises(FormatError):
            decode_feature_map(payload)

    def test_zero_dims_round_trip(self):
        fmap = FeatureMap(np.zeros((1, 0, 16), dtype=np.float32))
        payload = encode_feature_map(fmap)
        self.assertEqual(len(payload), 19)
        self.assertEqual(decode_feature_map(payload).dims, [1, 0, 16])
        with self.assertRaises(FormatError):
            decode_feature_map(payload + b"\0\0\0\0")

    def test_dim_overflow(self):
        payload = encode_feature_map(FeatureMap(np.ones((1, 1, 1))))
        header = bytearray(payload[:19])
        header[7:19] = np.array([65536, 65536, 2], dtype="<u4").tobytes()
        with self.assertRaises(FormatError):
            decode_feature_map(bytes(header))


class SyntheticSceneTests(SimpleTestCase):
    def test_same_seed_same_scene(self):
        a, b = synth_scene(0, 3, 100), synth_scene(0, 3, 100)
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        self.assertEqual(a.boxes, b.boxes)

    def test_different_seeds_differ(self):
        self.assertFalse(np.array_equal(synth_scene(0, 2, 50).cloud.points, synth_scene(1, 2, 50).cloud.points))

    def test_single_object_without_noise_lies_in_its_box(self):
        scene = synth_scene(4, 1, 0)
        self.assertTrue(scene.boxes[0].contains(scene.cloud.points).all())

    def test_every_box_has_points_and_valid_yaw(self):
        scene = synth_scene(7, 5, 500)
        self.assertEqual(len(scene.boxes), 5)
        for box in scene.boxes:
            self.assertGreaterEqual(int(box.contains(scene.cloud.points).sum()), 1)
            self.assertTrue(-np.pi < box.yaw <= np.pi)
        self.assertTrue(RangeSpec().contains(scene.cloud.coords).all())

    def test_zero_objects_rejected(self):
        with self.assertRaises(ConfigError):
            synth_scene(0, 0, 10)

    def test_scene_file_round_trip(self):
        scenes = [synth_scene(s, 2, 20) for s in range(2)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "scenes.json")
            save_scenes(scenes, path)
            back = load_scenes(path)
        self.assertEqual(len(back), 2)
        np.testing.assert_array_equal(back[1].cloud.points, scenes[1].cloud.points)
        np.testing.assert_allclose(back[0].boxes_array(), scenes[0].boxes_array())

    def test_placeholder_image_is_deterministic(self):
        np.testing.assert_array_equal(placeholder_image(3, (3, 8, 4)), placeholder_image(3, (3, 8, 4)))


class ImageTests(SimpleTestCase):
    def test_uint8_hwc_is_scaled_and_resized(self):
        arr = np.full((20, 10, 3), 255, dtype=np.uint8)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "img.npy")
            np.save(path, arr)
            img = load_image(path)
        self.assertEqual(img.shape, (3, 1216, 352))
        np.testing.assert_array_equal(img, 1.0)

    def test_nearest_resize_identity(self):
        img = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        np.testing.assert_array_equal(nearest_resize(img, (3, 4)), img)

    def test_not_npy_is_format_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "img.npy")
            with open(path, "wb") as f:
                f.write(b"garbage")
            with self.assertRaises(FormatError):
                load_image(path)
