import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from mmfusion.apps.dataio.clouds import RangeSpec
from mmfusion.apps.dataio.feature_maps import FeatureMap
from mmfusion.apps.detect_head.anchors import (
    IGNORED,
    NEGATIVE,
    POSITIVE,
    AnchorConfig,
    assign_targets,
    bev_iou,
    decode_boxes,
    encode_boxes,
    make_anchors,
)
from mmfusion.apps.detect_head.head import (
    LossBreakdown,
    LossWeights,
    combine_losses,
    focal_loss,
    head_forward,
    init_head,
    rpn_loss,
)
from mmfusion.apps.detect_head.predict import nms_bev, predict, recall_at_iou
from mmfusion.apps.detect_head.training import trace_csv, train_toy, write_trace
from mmfusion.apps.tensor_core.engine import Tensor
from mmfusion.apps.tensor_core.gradcheck import grad_check
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.errors import ConfigError, TrainingError

SMALL_RANGE = RangeSpec(x=(0.0, 8.0), y=(-4.0, 4.0), z=(-3.0, 1.0))
CAR = (3.9, 1.6, 1.56)


def anchors_2x2(cfg=AnchorConfig()):
    return make_anchors(cfg, SMALL_RANGE, (2, 2))


def gt_on_anchor(index, yaw=0.0):
    a = anchors_2x2()[index].copy()
    a[6] = yaw
    return a[None, :]


def head_store(channels=4, seed=0, dtype="f64", cfg=AnchorConfig()):
    params = ParamStore(seed=seed, dtype=dtype)
    init_head(params, channels, cfg)
    return params


class AnchorTests(SimpleTestCase):
    def test_layout_is_cell_major(self):
        anchors = anchors_2x2()
        self.assertEqual(anchors.shape, (8, 7))
        np.testing.assert_allclose(anchors[0], [2.0, -2.0, -1.0, *CAR, 0.0])
        np.testing.assert_allclose(anchors[1], [2.0, -2.0, -1.0, *CAR, math.pi / 2])
        # next column moves along x
        np.testing.assert_allclose(anchors[2, :2], [6.0, -2.0])
        # next row moves along y
        np.testing.assert_allclose(anchors[4, :2], [2.0, 2.0])

    def test_rejects_crossed_thresholds(self):
        with self.assertRaises(ConfigError):
            AnchorConfig(match_iou=0.4, ignore_iou=0.45)

    def test_config_round_trip(self):
        cfg = AnchorConfig(yaws=(0.0,), num_classes=3)
        self.assertEqual(AnchorConfig.from_dict(cfg.to_dict()), cfg)
        with self.assertRaises(ConfigError):
            AnchorConfig.from_dict({"stride": 2})

    def test_rotated_footprint_swaps_length_and_width(self):
        a = np.array([[0, 0, 0, 4.0, 2.0, 1.0, 0.0]])
        b = np.array([[0, 0, 0, 2.0, 4.0, 1.0, math.pi / 2]])
        self.assertAlmostEqual(float(bev_iou(a, b)[0, 0]), 1.0)

    def test_encode_then_decode_recovers_boxes(self):
        rng = np.random.default_rng(0)
        anchors = anchors_2x2()
        boxes = anchors + np.column_stack(
            [rng.normal(size=(8, 3)), rng.uniform(-0.3, 0.3, size=(8, 3)), rng.normal(size=8)]
        )
        boxes[:, 3:6] = anchors[:, 3:6] * np.exp(rng.uniform(-0.3, 0.3, size=(8, 3)))
        np.testing.assert_allclose(decode_boxes(anchors, encode_boxes(anchors, boxes)), boxes, rtol=1e-12)


class AssignTargetsTests(SimpleTestCase):
    def test_exact_match_is_positive_with_zero_residual(self):
        targets = assign_targets(anchors_2x2(), gt_on_anchor(0), AnchorConfig())
        self.assertEqual(targets.labels[0], POSITIVE)
        self.assertEqual(targets.num_positive, 1)
        np.testing.assert_allclose(targets.residuals[0], 0.0, atol=1e-12)
        self.assertEqual(targets.matched[0], 0)

    def test_perpendicular_anchor_is_negative(self):
        targets = assign_targets(anchors_2x2(), gt_on_anchor(0), AnchorConfig())
        # overlap of 1.6×3.9 and 3.9×1.6 footprints is about 0.26
        self.assertEqual(targets.labels[1], NEGATIVE)

    def test_no_ground_truth_gives_all_negative(self):
        targets = assign_targets(anchors_2x2(), np.zeros((0, 7)), AnchorConfig())
        np.testing.assert_array_equal(targets.labels, NEGATIVE)
        np.testing.assert_array_equal(targets.residuals, 0.0)

    def test_weak_overlap_forces_single_best_anchor(self):
        small = np.array([[2.0, -2.0, -1.0, 1.0, 1.0, 1.0, 0.0]])
        targets = assign_targets(anchors_2x2(), small, AnchorConfig())
        self.assertEqual(targets.num_positive, 1)
        self.assertEqual(targets.labels[0], POSITIVE)

    def test_middle_overlap_is_ignored(self):
        cfg = AnchorConfig()
        shifted = gt_on_anchor(0)
        shifted[0, 0] += 1.2  # IoU (2.7·1.6)/(2·6.24 − 4.32) ≈ 0.53
        targets = assign_targets(anchors_2x2(), shifted, cfg)
        self.assertEqual(targets.labels[0], POSITIVE)
        anchors = anchors_2x2()[:1]
        loose = assign_targets(np.vstack([anchors, anchors]), shifted, cfg)
        self.assertEqual(list(loose.labels), [POSITIVE, IGNORED])

    def test_ties_go_to_the_lowest_box_index(self):
        gt = np.vstack([gt_on_anchor(0), gt_on_anchor(0)])
        targets = assign_targets(anchors_2x2(), gt, AnchorConfig())
        self.assertEqual(targets.matched[0], 0)

    def test_direction_bin_follows_yaw_sign(self):
        pos = assign_targets(anchors_2x2(), gt_on_anchor(0, yaw=0.3), AnchorConfig())
        neg = assign_targets(anchors_2x2(), gt_on_anchor(0, yaw=-0.3), AnchorConfig())
        self.assertEqual(pos.dir_bins[0], 1)
        self.assertEqual(neg.dir_bins[0], 0)
        self.assertAlmostEqual(pos.residuals[0, 6], 0.3)

    def test_class_column(self):
        cfg = AnchorConfig(num_classes=3)
        gt = np.hstack([gt_on_anchor(2), [[2.0]]])
        targets = assign_targets(make_anchors(cfg, SMALL_RANGE, (2, 2)), gt, cfg)
        self.assertEqual(targets.classes[2], 2)

    def test_no_anchors(self):
        with self.assertRaises(ConfigError):
            assign_targets(np.zeros((0, 7)), gt_on_anchor(0), AnchorConfig())


class HeadTests(SimpleTestCase):
    def test_channel_counts(self):
        params = head_store(channels=4)
        out = head_forward(FeatureMap(np.ones((4, 3, 5))), params)
        self.assertEqual(out.cls_logits.dims, [2, 3, 5])
        self.assertEqual(out.box_deltas.dims, [14, 3, 5])
        self.assertEqual(out.dir_logits.dims, [4, 3, 5])

    def test_zero_weights_give_zero_outputs(self):
        params = head_store()
        for name in params.names():
            params.set_value(name, np.zeros_like(params.value(name)))
        out = head_forward(FeatureMap(np.random.default_rng(1).normal(size=(4, 2, 2))), params)
        for t in (out.cls_logits, out.box_deltas, out.dir_logits):
            np.testing.assert_array_equal(t.data, 0.0)

    def test_deterministic_initialization(self):
        a, b = head_store(seed=9), head_store(seed=9)
        for name in a.names():
            np.testing.assert_array_equal(a.value(name), b.value(name))

    def test_flat_rows_follow_anchor_order(self):
        params = head_store()
        params.set_value("head.cls.w", np.zeros_like(params.value("head.cls.w")))
        params.set_value("head.cls.b", [1.0, -1.0])
        cls_rows, box_rows, dir_rows = head_forward(FeatureMap(np.ones((4, 2, 2))), params).flat(2)
        self.assertEqual(cls_rows.dims, [8, 1])
        self.assertEqual(box_rows.dims, [8, 7])
        self.assertEqual(dir_rows.dims, [8, 2])
        np.testing.assert_array_equal(cls_rows.data[:, 0], [1.0, -1.0] * 4)


class LossTests(SimpleTestCase):
    def test_weighted_sum_arithmetic(self):
        self.assertAlmostEqual(combine_losses(1.0, 0.5, 0.1, LossWeights()), 2.02)

    def test_weighted_sum_matches_for_tensors_and_floats(self):
        rng = np.random.default_rng(11)
        weights = LossWeights()
        for _ in range(10):
            c, r, d = rng.uniform(0, 5, size=3)
            expected = c + 2.0 * r + 0.2 * d
            self.assertAlmostEqual(combine_losses(c, r, d, weights), expected, places=12)
            t = combine_losses(Tensor(np.float64(c)), Tensor(np.float64(r)), Tensor(np.float64(d)), weights)
            self.assertAlmostEqual(t.item(), expected, places=12)

    def test_focal_hand_values(self):
        logit = Tensor(np.zeros((1, 1)))
        one, valid = np.ones((1, 1)), np.ones((1, 1))
        pos = focal_loss(logit, one, valid, LossWeights()).item()
        neg = focal_loss(logit, np.zeros((1, 1)), valid, LossWeights()).item()
        self.assertAlmostEqual(pos, 0.25 * 0.25 * math.log(2.0), places=12)
        self.assertAlmostEqual(neg, 0.25 * 0.75 * math.log(2.0), places=12)
        self.assertEqual(focal_loss(logit, one, np.zeros((1, 1)), LossWeights()).item(), 0.0)

    def test_without_positives_total_is_classification(self):
        params = head_store(seed=2)
        out = head_forward(FeatureMap(np.random.default_rng(3).normal(size=(4, 2, 2))), params)
        targets = assign_targets(anchors_2x2(), np.zeros((0, 7)), AnchorConfig())
        losses = rpn_loss(out, targets, LossWeights(), 2).values()
        self.assertEqual(losses["reg"], 0.0)
        self.assertEqual(losses["dir"], 0.0)
        self.assertAlmostEqual(losses["total"], losses["cls"], places=12)

    def test_confident_background_has_vanishing_loss(self):
        params = head_store(seed=2)
        params.set_value("head.cls.w", np.zeros_like(params.value("head.cls.w")))
        params.set_value("head.cls.b", [-30.0, -30.0])
        out = head_forward(FeatureMap(np.ones((4, 2, 2))), params)
        targets = assign_targets(anchors_2x2(), np.zeros((0, 7)), AnchorConfig())
        self.assertLess(rpn_loss(out, targets, LossWeights(), 2).total.item(), 1e-12)

    def test_gradients_match_finite_differences(self):
        params = head_store(seed=4)
        rng = np.random.default_rng(5)
        fmap = FeatureMap(rng.normal(size=(4, 2, 2)))
        gt = gt_on_anchor(3, yaw=0.2) + [[0.3, 0.2, 0.1, 0, 0, 0, 0]]
        targets = assign_targets(anchors_2x2(), gt, AnchorConfig())

        def loss(p):
            return rpn_loss(head_forward(fmap, p), targets, LossWeights(), 2).total

        report = grad_check(loss, params, h=1e-6, tol=1e-5)
        self.assertTrue(report.passed, msg=f"{report.worst_name}: {report.max_rel_error}")


class PredictTests(SimpleTestCase):
    def test_nms_keeps_highest_of_overlapping_pair(self):
        boxes = np.array(
            [
                [0, 0, 0, 4, 2, 1, 0],
                [0.2, 0, 0, 4, 2, 1, 0],
                [10, 10, 0, 4, 2, 1, 0],
            ],
            dtype=float,
        )
        keep = nms_bev(boxes, np.array([0.6, 0.9, 0.5]))
        self.assertEqual(list(keep), [1, 2])

    def test_recall(self):
        gt = np.vstack([gt_on_anchor(0), gt_on_anchor(6)])
        self.assertEqual(recall_at_iou(gt, gt), 1.0)
        self.assertEqual(recall_at_iou(np.zeros((0, 7)), gt), 0.0)
        self.assertEqual(recall_at_iou(gt[:1], np.vstack([gt[:1], gt[:1]])), 0.5)

    def test_predict_decodes_confident_anchors(self):
        params = head_store()
        for name in params.names():
            params.set_value(name, np.zeros_like(params.value(name)))
        params.set_value("head.cls.b", [5.0, -5.0])
        out = head_forward(FeatureMap(np.ones((4, 2, 2))), params)
        boxes, scores = predict(out, anchors_2x2(), 2)
        self.assertEqual(len(boxes), 4)
        np.testing.assert_allclose(np.sort(boxes[:, 0]), [2.0, 2.0, 6.0, 6.0])
        np.testing.assert_allclose(boxes[:, 6], 0.0)
        np.testing.assert_allclose(scores, 1.0 / (1.0 + math.exp(-5.0)))


class TrainToyTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(21)
        self.fmaps = [FeatureMap(rng.normal(size=(4, 2, 2))) for _ in range(2)]
        self.targets = [
            assign_targets(anchors_2x2(), gt_on_anchor(0, yaw=0.1), AnchorConfig()),
            assign_targets(anchors_2x2(), gt_on_anchor(7, yaw=-0.2), AnchorConfig()),
        ]

    def loss_fn(self, params, i):
        return rpn_loss(head_forward(self.fmaps[i], params), self.targets[i], LossWeights(), 2)

    def test_zero_learning_rate_gives_constant_trace(self):
        result = train_toy(self.loss_fn, head_store(seed=1), 2, 4, lr=0.0)
        totals = [row["total"] for row in result.trace]
        self.assertEqual(len(set(totals)), 1)

    def test_repeat_runs_are_identical(self):
        a = train_toy(self.loss_fn, head_store(seed=1), 2, 5, lr=0.02).trace
        b = train_toy(self.loss_fn, head_store(seed=1), 2, 5, lr=0.02).trace
        self.assertEqual(a, b)

    def test_descent_lowers_loss(self):
        for optimizer in ("sgd", "adam"):
            result = train_toy(self.loss_fn, head_store(seed=1), 2, 30, lr=0.01, optimizer=optimizer)
            self.assertLess(result.final_loss, result.initial_loss, msg=optimizer)

    def test_trace_row_is_weighted_sum_of_parts(self):
        row = train_toy(self.loss_fn, head_store(seed=1), 2, 1, lr=0.0).trace[0]
        self.assertAlmostEqual(row["total"], row["cls"] + 2.0 * row["reg"] + 0.2 * row["dir"], places=10)

    def test_non_finite_loss_reports_step(self):
        def bad(params, i):
            nan = Tensor(np.array(np.nan))
            return LossBreakdown(nan, nan, nan, nan)

        with self.assertRaises(TrainingError) as ctx:
            train_toy(bad, head_store(), 1, 3, lr=0.1)
        self.assertEqual(ctx.exception.step, 0)

    def test_bad_arguments(self):
        with self.assertRaises(ConfigError):
            train_toy(self.loss_fn, head_store(), 0, 3, lr=0.1)
        with self.assertRaises(ConfigError):
            train_toy(self.loss_fn, head_store(), 1, 3, lr=-1.0)
        with self.assertRaises(ConfigError):
            train_toy(self.loss_fn, head_store(), 1, 3, lr=0.1, optimizer="lbfgs")

    def test_trace_csv(self):
        trace = train_toy(self.loss_fn, head_store(seed=1), 2, 2, lr=0.01).trace
        text = trace_csv(trace)
        lines = text.splitlines()
        self.assertEqual(lines[0], "step,total,cls,reg,dir")
        self.assertEqual(len(lines), 3)
        self.assertEqual(float(lines[1].split(",")[1]), trace[0]["total"])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "trace.csv")
            write_trace(trace, path)
            with open(path) as fh:
                self.assertEqual(fh.read(), text)
