import math
import os
import struct
import tempfile
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.tensor_core import engine
from mmfusion.apps.tensor_core.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.nn import (
    FcBlockSpec,
    avg_pool2d,
    fc_block,
    init_fc_block,
    linear_forward,
    softmax,
    upsample2d,
)
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import (
    ConfigError,
    FormatError,
    NumericError,
    OracleError,
    ParamLookupError,
    ShapeError,
)


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class LinearForwardTests(SimpleTestCase):
    def test_identity_weight(self):
        y = linear_forward(t64([[1, 2]]), t64(np.eye(2)), t64([0, 0]))
        np.testing.assert_array_equal(y.data, [[1, 2]])

    def test_hand_evaluated_dot_products(self):
        y = linear_forward(t64([[1, 2]]), t64([[1, 2], [3, 4]]), t64([0, 0]))
        np.testing.assert_array_equal(y.data, [[5, 11]])

    def test_zero_input_passes_bias_through(self):
        y = linear_forward(t64(np.zeros((1, 3))), t64([[0.3, -2.0, 9.0]]), t64([7]))
        np.testing.assert_array_equal(y.data, [[7]])

    def test_shape_error_names_both_operands(self):
        with self.assertRaises(ShapeError) as ctx:
            linear_forward(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))), None)
        self.assertIn("[2, 3]", str(ctx.exception))
        self.assertIn("[4, 5]", str(ctx.exception))

    def test_linearity_without_bias(self):
        rng = np.random.default_rng(3)
        w = t64(rng.normal(size=(4, 6)))
        x, y = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        a, b = 1.7, -0.4
        lhs = linear_forward(t64(a * x + b * y), w).data
        rhs = a * linear_forward(t64(x), w).data + b * linear_forward(t64(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class FcBlockTests(SimpleTestCase):
    def scalar_store(self, w1, b1, w2, b2):
        params = ParamStore(dtype="f64")
        params.add("blk.w1", w1)
        params.add("blk.b1", b1)
        params.add("blk.w2", w2)
        params.add("blk.b2", b2)
        return params

    def test_relu_clamps_negative(self):
        params = self.scalar_store([[1.0]], [0.0], [[1.0]], [0.0])
        y = fc_block(t64([[-3.0]]), FcBlockSpec(1, 1, 1), params, "blk")
        np.testing.assert_array_equal(y.data, [[0.0]])

    def test_identity_on_positive_path(self):
        params = self.scalar_store([[1.0]], [0.0], [[1.0]], [0.0])
        y = fc_block(t64([[3.0]]), FcBlockSpec(1, 1, 1), params, "blk")
        np.testing.assert_array_equal(y.data, [[3.0]])

    def test_two_hidden_units(self):
        params = self.scalar_store([[1.0], [-1.0]], [0.0, 0.0], [[1.0, 1.0]], [0.0])
        y = fc_block(t64([[2.0]]), FcBlockSpec(1, 2, 1), params, "blk")
        np.testing.assert_array_equal(y.data, [[2.0]])

    def test_missing_parameter_is_lookup_error(self):
        with self.assertRaises(ParamLookupError):
            fc_block(t64([[1.0]]), FcBlockSpec(1, 1, 1), ParamStore(), "absent")

    def test_spec_rejects_zero_width(self):
        with self.assertRaises(ConfigError):
            FcBlockSpec(1, 0, 1)


class SoftmaxTests(SimpleTestCase):
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(t64([0.0, 0.0])).data, [0.5, 0.5])

    def test_hand_evaluated(self):
        np.testing.assert_allclose(softmax(t64([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(softmax(t64([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out64 = softmax(t64(rng.normal(size=(20, 7)) * 10)).data
        np.testing.assert_allclose(out64.sum(axis=-1), 1.0, atol=1e-6)
        out32 = softmax(Tensor(rng.normal(size=(20, 7)).astype(np.float32) * 10)).data
        np.testing.assert_allclose(out32.sum(axis=-1), 1.0, atol=1e-5)
        self.assertTrue(np.all(out64 > 0) and np.all(out64 <= 1))

    def test_non_finite_input(self):
        with self.assertRaises(NumericError):
            softmax(t64([0.0, np.nan]))


class PoolingTests(SimpleTestCase):
    def test_mean_of_four(self):
        out = avg_pool2d(t64([[[1, 3], [5, 7]]]), (1, 1))
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    def test_constant_map_any_size(self):
        x = t64(np.full((2, 6, 5), 2.5))
        for hw in [(1, 1), (3, 2), (6, 5), (9, 11)]:
            np.testing.assert_allclose(avg_pool2d(x, hw).data, 2.5)
            np.testing.assert_allclose(upsample2d(x, hw).data, 2.5)

    def test_identity_when_size_unchanged(self):
        x = t64(np.random.default_rng(1).normal(size=(3, 4, 5)))
        np.testing.assert_array_equal(avg_pool2d(x, (4, 5)).data, x.data)
        np.testing.assert_array_equal(upsample2d(x, (4, 5)).data, x.data)

    def test_single_source_upsample(self):
        out = upsample2d(t64([[[1.25]]]), (4, 3))
        np.testing.assert_array_equal(out.data, np.full((1, 4, 3), 1.25))

    def test_pool_then_upsample_constant_is_identity(self):
        x = t64(np.full((2, 8, 6), -0.75))
        back = upsample2d(avg_pool2d(x, (2, 3)), (8, 6))
        np.testing.assert_allclose(back.data, x.data)

    def test_zero_sized_target(self):
        with self.assertRaises(ConfigError):
            avg_pool2d(t64(np.zeros((1, 2, 2))), (0, 1))
        with self.assertRaises(ConfigError):
            upsample2d(t64(np.zeros((1, 2, 2))), (2, 0))


class GradCheckTests(SimpleTestCase):
    def test_square(self):
        params = ParamStore(dtype="f64")
        params.add("x", [3.0])
        report = grad_check(lambda p: p["x"] * p["x"], params)
        self.assertTrue(report.passed)
        params.zero_grad()
        (params["x"] * params["x"]).backward()
        self.assertAlmostEqual(float(params.grad("x")[0]), 6.0)

    def test_inactive_relu(self):
        params = ParamStore(dtype="f64")
        params.add("x", [-1.0])
        report = grad_check(lambda p: engine.relu(p["x"]), params)
        self.assertTrue(report.passed)
        self.assertEqual(report.rows[0].analytic, 0.0)
        self.assertEqual(report.rows[0].numeric, 0.0)

    def test_every_primitive_on_random_tensors(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params = ParamStore(seed=seed, dtype="f64")
            params.add("a", rng.normal(size=(3, 4)))
            params.add("b", rng.normal(size=(4, 2)))
            params.add("img", rng.normal(size=(2, 5, 4)))
            params.add("k", rng.normal(size=(3, 2, 3, 3)))
            params.add("kb", rng.normal(size=(3,)))
            direction = rng.normal(size=(3, 2))
            cells = np.array([0, 2, 0])

            def f(p):
                ab = p["a"] @ p["b"]
                s = engine.softmax(ab) + engine.log_softmax(ab) * 0.3
                act = engine.sigmoid(ab) * engine.exp(ab * 0.1) + engine.log_sigmoid(ab)
                sm = engine.smooth_l1(ab, 1.0 / 9.0)
                pooled = avg_pool2d(p["img"], (2, 3)) * 1.0
                up = upsample2d(p["img"], (7, 6))
                conv = engine.conv2d(p["img"], p["k"], p["kb"], stride=2, padding=1)
                scattered = engine.scatter_max(ab, cells, 4)
                parts = [
                    (s * direction).sum(),
                    (act * direction).sum(),
                    sm.sum(),
                    engine.power(engine.sigmoid(ab), 2.0).sum(),
                    (pooled * pooled).sum(),
                    up.mean(),
                    (engine.relu(conv) * 0.5).sum(),
                    (scattered * scattered).sum(),
                    engine.concat([ab, ab * 2.0], axis=0).reshape(-1).sum(),
                    engine.take_rows(ab, np.array([2, 0, 2])).sum(),
                ]
                return engine.stack_losses(parts)

            report = grad_check(f, params, h=1e-5, tol=1e-5)
            self.assertTrue(report.passed, msg=f"seed {seed}: {report.as_dict()}")

    def test_corrupted_gradient_is_named(self):
        params = ParamStore(dtype="f64")
        params.add("good", [1.0, 2.0])
        params.add("bad", [0.5])
        report = grad_check(lambda p: (p["good"] * p["bad"]).sum(), params, corrupt="bad")
        self.assertFalse(report.passed)
        self.assertEqual(report.worst_name, "bad")

    def test_zero_tolerance_fails(self):
        params = ParamStore(dtype="f64")
        params.add("x", [0.3, -0.2])
        report = grad_check(lambda p: engine.exp(p["x"]).sum(), params, tol=0.0)
        self.assertFalse(report.passed)

    def test_non_deterministic_function(self):
        params = ParamStore(dtype="f64")
        params.add("x", [1.0])
        counter = {"n": 0}

        def f(p):
            counter["n"] += 1
            return p["x"] * float(counter["n"])

        with self.assertRaises(OracleError):
            grad_check(f, params)


class ParamStoreTests(SimpleTestCase):
    def test_seeded_initialization_is_name_keyed(self):
        a, b = ParamStore(seed=4), ParamStore(seed=4)
        spec = FcBlockSpec(3, 5, 2)
        init_fc_block(a, "x", spec)
        b.init_zeros("other", (2,))
        init_fc_block(b, "x", spec)
        np.testing.assert_array_equal(a.value("x.w1"), b.value("x.w1"))
        np.testing.assert_array_equal(a.value("x.b1"), np.zeros(5))
        bound = 1.0 / np.sqrt(3)
        self.assertTrue(np.all(np.abs(a.value("x.w1")) <= bound))

    def test_duplicate_name_rejected(self):
        params = ParamStore()
        params.add("w", [1.0])
        with self.assertRaises(ConfigError):
            params.add("w", [2.0])

    def test_zero_grad(self):
        params = ParamStore(dtype="f64")
        params.add("w", [1.0, 2.0])
        (params["w"] * params["w"]).sum().backward()
        self.assertTrue(np.any(params.grad("w") != 0))
        params.zero_grad()
        np.testing.assert_array_equal(params.grad("w"), [0.0, 0.0])
        self.assertEqual(params.grad("w").shape, params.value("w").shape)


class CheckpointTests(SimpleTestCase):
    def make_store(self):
        params = ParamStore(seed=2)
        init_fc_block(params, "pam1.alpha", FcBlockSpec(3, 4, 4))
        params.add("mffm.pos_lidar", np.random.default_rng(0).normal(size=(2, 3, 3)))
        params.add("scalar", 1.5)
        return params

    def test_round_trip_is_bit_exact(self):
        params = self.make_store()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "ck.mmck")
            save_checkpoint(params, path)
            loaded = load_checkpoint(path)
            with open(path, "rb") as f:
                self.assertEqual(f.read(), encode_checkpoint(loaded))
        self.assertEqual(loaded.names(), params.names())
        for name in params.names():
            self.assertEqual(loaded.value(name).tobytes(), params.value(name).tobytes())

    def test_header_layout(self):
        payload = encode_checkpoint(self.make_store())
        self.assertEqual(payload[:4], b"MMCK")
        self.assertEqual(int.from_bytes(payload[4:6], "little"), 1)
        self.assertEqual(int.from_bytes(payload[6:10], "little"), 6)

    def test_bad_magic_and_truncation(self):
        payload = encode_checkpoint(self.make_store())
        with self.assertRaises(FormatError):
            decode_checkpoint(b"XXXX" + payload[4:])
        with self.assertRaises(FormatError):
            decode_checkpoint(payload[:-3])

    def test_missing_file(self):
        with self.assertRaises(FormatError) as ctx:
            load_checkpoint("/nonexistent/ck.mmck")
        self.assertIn("/nonexistent/ck.mmck", str(ctx.exception))

    def test_duplicate_name_is_format_error(self):
        entry = struct.pack("<H", 1) + b"a" + struct.pack("<B", 0) + np.float32(1.0).astype("<f4").tobytes()
        payload = b"MMCK" + struct.pack("<HI", 1, 2) + entry + entry
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(payload, path="dup.mmck")
        self.assertEqual(ctx.exception.exit_code, 2)
        self.assertIn("duplicate parameter 'a'", str(ctx.exception))
        self.assertIn(f"offset={10 + len(entry)}", str(ctx.exception))

    def test_directory_is_format_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                load_checkpoint(tmp)

    def test_unreadable_file_is_format_error(self):
        for err in (PermissionError(13, "Permission denied"), OSError(5, "Input/output error")):
            with self.subTest(err=type(err).__name__):
                with mock.patch("pathlib.Path.read_bytes", side_effect=err):
                    with self.assertRaises(FormatError) as ctx:
                        load_checkpoint("locked.mmck")
                self.assertEqual(ctx.exception.exit_code, 2)
                self.assertIn("path=locked.mmck", str(ctx.exception))
