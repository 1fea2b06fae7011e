import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame, load_feature_map, save_feature_map
from mmfusion.apps.streams.encoders import StreamConfig, bev_encode, image_encode, init_streams
from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError

TINY = StreamConfig(
    lidar_out=(3, 4, 4),
    image_out=(3, 3, 2),
    bev_channels=(2,),
    image_in=(3, 8, 4),
    image_patch=4,
    image_hidden=2,
)


def store(cfg, bev_in, seed=0, dtype="f64"):
    params = ParamStore(seed=seed, dtype=dtype)
    init_streams(params, cfg, bev_in)
    return params


class StreamConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = StreamConfig()
        self.assertEqual(cfg.lidar_out, (256, 200, 176))
        self.assertEqual(cfg.image_out, (256, 39, 11))
        self.assertEqual(cfg.bev_channels, (16, 32, 48, 64))

    def test_channel_widths_must_match(self):
        with self.assertRaises(ConfigError):
            StreamConfig(image_out=(128, 39, 11))

    def test_empty_channel_list(self):
        with self.assertRaises(ConfigError):
            StreamConfig(bev_channels=())

    def test_from_dict_lists_and_unknown_keys(self):
        cfg = StreamConfig.from_dict({"lidar_out": [8, 4, 4], "image_out": [8, 2, 2]})
        self.assertEqual(cfg.lidar_out, (8, 4, 4))
        with self.assertRaises(ConfigError):
            StreamConfig.from_dict({"camera": "on"})


class BevEncodeTests(SimpleTestCase):
    def test_zero_input_zero_bias_gives_zero(self):
        params = store(TINY, 2)
        out = bev_encode(FeatureMap(np.zeros((2, 8, 8))), TINY, params)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_default_output_dims(self):
        cfg = StreamConfig()
        params = store(cfg, 4, dtype="f32")
        out = bev_encode(FeatureMap(np.random.default_rng(0).normal(size=(4, 32, 32)).astype(np.float32)), cfg, params)
        self.assertEqual(out.dims, [256, 200, 176])
        self.assertEqual(out.frame, Frame.BEV)

    def test_first_layer_is_linear_before_relu(self):
        params = store(TINY, 2)
        x = np.random.default_rng(1).normal(size=(2, 6, 6))
        w = params["bev.conv0.w"]
        a = engine.conv2d(Tensor(x), w, None, stride=2, padding=1).data
        b = engine.conv2d(Tensor(2 * x), w, None, stride=2, padding=1).data
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        params = store(TINY, 2, seed=3)
        for name in ("bev.conv0.b", "bev.proj.b"):
            params.set_value(name, np.random.default_rng(4).normal(scale=0.1, size=params.value(name).shape))
        x = FeatureMap(np.random.default_rng(5).normal(size=(2, 6, 6)))
        weights = np.random.default_rng(6).normal(size=(3, 4, 4))
        names = [n for n in params.names() if n.startswith("bev.")]

        def loss(p):
            return (bev_encode(x, TINY, p).tensor * weights).sum()

        self.assertTrue(grad_check(loss, params, names=names, tol=1e-5).passed)


class ImageEncodeTests(SimpleTestCase):
    def test_constant_gray_image_is_spatially_constant(self):
        params = store(TINY, 2)
        out = image_encode(np.full((3, 8, 4), 0.5), TINY, params).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), rtol=1e-12, atol=1e-15)

    def test_default_output_dims(self):
        cfg = StreamConfig()
        params = store(cfg, 4, dtype="f32")
        img = np.random.default_rng(0).uniform(size=(3, 1216, 352)).astype(np.float32)
        out = image_encode(img, cfg, params)
        self.assertEqual(out.dims, [256, 39, 11])
        self.assertEqual(out.frame, Frame.IMAGE)

    def test_wrong_image_dims(self):
        with self.assertRaises(ConfigError):
            image_encode(np.zeros((3, 16, 4)), TINY, store(TINY, 2))

    def test_feature_file_is_returned_unchanged(self):
        cfg = StreamConfig(image_source="feature_file")
        data = np.random.default_rng(2).normal(size=(256, 39, 11)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "img.mmff")
            save_feature_map(FeatureMap(data, Frame.IMAGE), path)
            loaded = load_feature_map(path, Frame.IMAGE)
        out = image_encode(loaded, cfg, ParamStore())
        self.assertEqual(out.data.tobytes(), data.tobytes())

    def test_feature_file_dims_checked(self):
        cfg = StreamConfig(image_source="feature_file")
        with self.assertRaises(ConfigError):
            image_encode(FeatureMap(np.zeros((256, 38, 11))), cfg, ParamStore())

    def test_gradients_match_finite_differences(self):
        params = store(TINY, 2, seed=7)
        for name in ("img.fc1.b1", "img.fc1.b2", "img.fc2.b1", "img.fc2.b2"):
            params.set_value(name, np.random.default_rng(8).normal(scale=0.1, size=params.value(name).shape))
        img = np.random.default_rng(9).uniform(size=(3, 8, 4))
        weights = np.random.default_rng(10).normal(size=(3, 3, 2))
        names = [n for n in params.names() if n.startswith("img.")]

        def loss(p):
            return (image_encode(img, TINY, p).tensor * weights).sum()

        self.assertTrue(grad_check(loss, params, names=names, tol=1e-5).passed)
