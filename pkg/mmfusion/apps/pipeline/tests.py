import csv
import io
import json
import os
import tempfile
from dataclasses import replace
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from mmfusion.apps.dataio.clouds import PointCloud, RangeSpec, write_kitti_bin
from mmfusion.apps.dataio.feature_maps import Frame, FeatureMap, load_feature_map, save_feature_map
from mmfusion.apps.dataio.synthetic import synth_scene
from mmfusion.apps.pipeline.config import (
    PipelineConfig,
    load_config,
    resolve_config,
    tiny_config,
    toy_config,
)
from mmfusion.apps.pipeline.model import Pipeline
from mmfusion.apps.pipeline.runs import (
    fit_scenes,
    gradcheck_report_csv,
    run_bench,
    run_encode,
    run_fuse,
    run_gradcheck,
    run_synth_scenes,
    run_train_toy,
    run_voxelize,
    run_vlpm,
)
from mmfusion.apps.detect_head.head import init_head
from mmfusion.apps.tensor_core.checkpoint import save_checkpoint
from mmfusion.apps.tensor_core.engine import no_grad
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.voxelizer.dump import save_voxel_batch
from mmfusion.apps.voxelizer.voxels import voxelize
from mmfusion.errors import ConfigError, FormatError, OracleError, ParamLookupError, ShapeError
from mmfusion.files import atomic_write_json


def write_json(tmp, name, payload):
    path = os.path.join(tmp, name)
    atomic_write_json(path, payload)
    return path


class PipelineConfigTests(SimpleTestCase):
    def test_defaults_match_the_full_detector(self):
        cfg = PipelineConfig()
        self.assertEqual(cfg.voxelizer.grid_dims, (1408, 1600, 40))
        self.assertEqual(cfg.streams.lidar_out, (256, 200, 176))
        self.assertEqual(cfg.streams.image_out, (256, 39, 11))
        self.assertEqual(cfg.mffm.tokens, 550)
        self.assertEqual(cfg.loss.alpha, 2.0)
        self.assertEqual(cfg.loss.beta, 0.2)
        self.assertEqual(cfg.feature_hw, (200, 176))

    def test_round_trip_through_dict(self):
        cfg = toy_config()
        self.assertEqual(PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))), cfg)

    def test_unknown_section_rejected(self):
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"fusion": {}})

    def test_unknown_key_inside_section_rejected(self):
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"mffm": {"heads": 8}})

    def test_section_must_be_object(self):
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"vlpm": 4})

    def test_channel_mismatch_between_streams_and_fusion(self):
        data = tiny_config().to_dict()
        data["mffm"]["channels"] = 16
        data["mffm"]["fusion_post_channels"] = [4, 16]
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict(data)

    def test_pooled_size_larger_than_lidar_map(self):
        data = tiny_config().to_dict()
        data["mffm"]["pooled_hw"] = [5, 2]
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict(data)

    def test_bad_precision_and_seed(self):
        with self.assertRaises(ConfigError):
            PipelineConfig(precision="f16")
        with self.assertRaises(ConfigError):
            PipelineConfig(seed=-1)

    def test_invalid_json_is_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "cfg.json")
            with open(path, "w") as fh:
                fh.write("{not json")
            with self.assertRaises(ConfigError):
                load_config(path)

    def test_missing_file_is_format_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FormatError):
                load_config(os.path.join(tmp, "absent.json"))

    @override_settings(MMFUSION_SEED=9, MMFUSION_PRECISION="f64")
    def test_settings_fill_what_the_file_omits(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json(tmp, "cfg.json", {"vlpm": {"feature_dim": 16}})
            cfg = resolve_config(path)
        self.assertEqual((cfg.seed, cfg.precision), (9, "f64"))
        self.assertEqual(cfg.vlpm.feature_dim, 16)

    @override_settings(MMFUSION_SEED=9, MMFUSION_PRECISION="f64")
    def test_file_beats_settings_and_flags_beat_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_json(tmp, "cfg.json", {"seed": 4, "precision": "f32"})
            self.assertEqual(resolve_config(path).seed, 4)
            cfg = resolve_config(path, seed=5, precision="f64")
        self.assertEqual((cfg.seed, cfg.precision), (5, "f64"))

    def test_presets(self):
        self.assertEqual(resolve_config(preset="tiny"), tiny_config())
        self.assertEqual(resolve_config(preset="toy", seed=3).seed, 3)
        with self.assertRaises(ConfigError):
            resolve_config(preset="huge")


class PipelineModelTests(SimpleTestCase):
    def setUp(self):
        self.cfg = tiny_config()
        self.pipeline = Pipeline(self.cfg)

    def test_init_is_deterministic(self):
        a, b = self.pipeline.init_params(), self.pipeline.init_params()
        self.assertEqual(a.names(), b.names())
        for name in a.names():
            np.testing.assert_array_equal(a.value(name), b.value(name))

    def test_every_stage_owns_parameters(self):
        names = self.pipeline.init_params().names()
        for prefix in ("pam", "dwm.", "bev.", "img.", "mffm.", "head."):
            self.assertTrue(any(n.startswith(prefix) for n in names), prefix)

    def test_check_params_rejects_missing_and_mis_sized(self):
        params = self.pipeline.init_params()
        self.pipeline.check_params(params)
        partial = ParamStore(seed=0, dtype="f64")
        init_head(partial, self.cfg.streams.channels, self.cfg.anchors)
        with self.assertRaises(ConfigError):
            self.pipeline.check_params(partial)
        self.pipeline.check_params(partial, ("head.",))

        other = Pipeline(PipelineConfig.from_dict({**self.cfg.to_dict(), "vlpm": {"feature_dim": 8}}))
        with self.assertRaises(ShapeError):
            self.pipeline.check_params(other.init_params(), ("pam",))

    def test_forward_dims(self):
        params = self.pipeline.init_params()
        prepared = self.pipeline.prepare(synth_scene(1, 1, 10, self.cfg.range, points_per_object=24))
        with no_grad():
            result = self.pipeline.forward(prepared.batch, prepared.image, params)
        self.assertEqual(result.f_l.dims, [8, 4, 4])
        self.assertEqual(result.f_i.dims, [8, 3, 3])
        self.assertEqual(result.f_f.dims, [8, 4, 4])
        self.assertEqual(result.out.cls_logits.dims, [2, 4, 4])
        self.assertEqual(result.out.box_deltas.dims, [14, 4, 4])
        self.assertEqual(result.out.dir_logits.dims, [4, 4, 4])

    def test_scene_loss_is_finite_and_repeatable(self):
        params = self.pipeline.init_params()
        prepared = self.pipeline.prepare(synth_scene(2, 1, 10, self.cfg.range, points_per_object=24))
        a = self.pipeline.scene_loss(prepared, params).total.item()
        b = self.pipeline.scene_loss(prepared, params).total.item()
        self.assertTrue(np.isfinite(a))
        self.assertEqual(a, b)

    def test_workers_must_be_positive(self):
        with self.assertRaises(ConfigError):
            Pipeline(self.cfg, workers=0)


class StageRunTests(SimpleTestCase):
    def test_empty_cloud_voxelizes_to_nothing(self):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "empty.bin")
            write_kitti_bin(PointCloud(np.zeros((0, 4), dtype=np.float32)), src)
            summary = run_voxelize(tiny_config(), src, os.path.join(tmp, "v.mmvx"), os.path.join(tmp, "v.json"))
            self.assertEqual(summary["K"], 0)
            with open(os.path.join(tmp, "v.json")) as fh:
                self.assertEqual(json.load(fh)["K"], 0)

    def test_out_of_range_points_are_cropped(self):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "pts.bin")
            pts = np.array([[1.5, 0.5, -1.0, 0.3], [50.0, 0.0, 0.0, 0.1]], dtype=np.float32)
            write_kitti_bin(PointCloud(pts), src)
            summary = run_voxelize(tiny_config(), src, os.path.join(tmp, "v.mmvx"), os.path.join(tmp, "v.json"))
        self.assertEqual(summary["K"], 1)

    def write_dump(self, tmp, voxel_cfg, name="v.mmvx"):
        path = os.path.join(tmp, name)
        pts = np.array([[1.5, 0.5, -1.0, 0.3]], dtype=np.float32)
        save_voxel_batch(voxelize(PointCloud(pts), voxel_cfg), path)
        return path

    def test_encode_rejects_dump_from_another_voxel_config(self):
        base = tiny_config().voxelizer
        others = {
            "grid": replace(base, range=RangeSpec(x=(0.0, 4.0), y=(-4.0, 4.0), z=(-3.0, 1.0))),
            "range": replace(base, range=RangeSpec(x=(1.0, 9.0), y=(-4.0, 4.0), z=(-3.0, 1.0))),
            "max points": replace(base, max_points_per_voxel=5),
        }
        for what, voxel_cfg in others.items():
            with self.subTest(what), tempfile.TemporaryDirectory() as tmp:
                dump = self.write_dump(tmp, voxel_cfg)
                out = os.path.join(tmp, "l.mmff")
                with self.assertRaises(ConfigError) as ctx:
                    run_encode(tiny_config(), "lidar", dump, None, out)
                self.assertIn(what, str(ctx.exception))
                self.assertFalse(os.path.exists(out))
                with self.assertRaises(ConfigError):
                    run_vlpm(tiny_config(), dump, None, os.path.join(tmp, "f.mmff"))

    def test_encode_accepts_dump_from_its_own_config(self):
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            dump = self.write_dump(tmp, cfg.voxelizer)
            dims = run_encode(cfg, "lidar", dump, None, os.path.join(tmp, "l.mmff"))
        self.assertEqual(dims, [8, 4, 4])

    def test_vlpm_writes_one_row_per_voxel(self):
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            dump = self.write_dump(tmp, cfg.voxelizer)
            dims = run_vlpm(cfg, dump, None, os.path.join(tmp, "f.mmff"))
        self.assertEqual(dims, [1, 1, 4])

    def test_vlpm_on_an_empty_frame_writes_an_empty_map(self):
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "empty.bin")
            write_kitti_bin(PointCloud(np.zeros((0, 4), dtype=np.float32)), src)
            dump = os.path.join(tmp, "v.mmvx")
            run_voxelize(cfg, src, dump, os.path.join(tmp, "v.json"))
            out = os.path.join(tmp, "f.mmff")
            dims = run_vlpm(cfg, dump, None, out)
            self.assertEqual(load_feature_map(out).dims, [1, 0, 4])
        self.assertEqual(dims, [1, 0, 4])

    def test_missing_checkpoint_names_the_path(self):
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            f_l = os.path.join(tmp, "l.mmff")
            f_i = os.path.join(tmp, "i.mmff")
            save_feature_map(FeatureMap(np.zeros((8, 4, 4)), Frame.BEV), f_l)
            save_feature_map(FeatureMap(np.zeros((8, 3, 3)), Frame.IMAGE), f_i)
            missing = os.path.join(tmp, "nope.ckpt")
            with self.assertRaises(FormatError) as ctx:
                run_fuse(cfg, f_l, f_i, missing, os.path.join(tmp, "f.mmff"))
        self.assertEqual(ctx.exception.path, missing)
        self.assertIn("nope.ckpt", ctx.exception.error_line())

    def test_fuse_is_deterministic_given_a_checkpoint(self):
        cfg = tiny_config()
        rng = np.random.default_rng(5)
        with tempfile.TemporaryDirectory() as tmp:
            ckpt = os.path.join(tmp, "p.ckpt")
            save_checkpoint(Pipeline(cfg).init_params(seed=3), ckpt)
            f_l = os.path.join(tmp, "l.mmff")
            f_i = os.path.join(tmp, "i.mmff")
            save_feature_map(FeatureMap(rng.normal(size=(8, 4, 4))), f_l)
            save_feature_map(FeatureMap(rng.normal(size=(8, 3, 3)), Frame.IMAGE), f_i)
            outs = []
            for name in ("a.mmff", "b.mmff"):
                dims = run_fuse(cfg, f_l, f_i, ckpt, os.path.join(tmp, name))
                outs.append(load_feature_map(os.path.join(tmp, name)).data)
        self.assertEqual(dims, [8, 4, 4])
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_fuse_rejects_maps_of_the_wrong_size(self):
        with tempfile.TemporaryDirectory() as tmp:
            f_l = os.path.join(tmp, "l.mmff")
            f_i = os.path.join(tmp, "i.mmff")
            save_feature_map(FeatureMap(np.zeros((8, 5, 5))), f_l)
            save_feature_map(FeatureMap(np.zeros((8, 3, 3)), Frame.IMAGE), f_i)
            with self.assertRaises(ConfigError):
                run_fuse(tiny_config(), f_l, f_i, None, os.path.join(tmp, "f.mmff"))

    def test_synth_scene_count(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run_synth_scenes(tiny_config(), 2, 1, 5, os.path.join(tmp, "s.json"), 10), 2)
            with self.assertRaises(ConfigError):
                run_synth_scenes(tiny_config(), 0, 1, 5, os.path.join(tmp, "s.json"))


class GradcheckRunTests(SimpleTestCase):
    def test_tiny_pipeline_passes(self):
        with tempfile.TemporaryDirectory() as tmp:
            report_path = os.path.join(tmp, "grad.csv")
            report = run_gradcheck(tiny_config(), 1e-4, report_path=report_path, max_entries=3)
            with open(report_path) as fh:
                rows = list(csv.DictReader(fh))
        self.assertTrue(report.passed)
        self.assertEqual(rows[-1]["module"], "end_to_end")
        modules = {r["module"] for r in rows if r["parameter"] == "*"}
        self.assertTrue({"vlpm", "streams", "mffm", "head", "end_to_end"} <= modules)

    def test_corrupted_gradient_is_named(self):
        with self.assertRaises(OracleError) as ctx:
            run_gradcheck(tiny_config(), 1e-4, corrupt="head.cls.w", max_entries=2)
        self.assertIn("head.cls.w", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_zero_tolerance_fails(self):
        with self.assertRaises(OracleError):
            run_gradcheck(tiny_config(), 0.0, max_entries=1)

    def test_unknown_corrupt_target(self):
        with self.assertRaises(ParamLookupError):
            run_gradcheck(tiny_config(), corrupt="head.nothing")

    def test_report_rows_follow_tolerance(self):
        report = run_gradcheck(tiny_config(), 1e-4, max_entries=1)
        rows = list(csv.DictReader(io.StringIO(gradcheck_report_csv(report))))
        self.assertTrue(all(r["passed"] == "1" for r in rows))


class BenchRunTests(SimpleTestCase):
    def test_repetitions_must_be_positive(self):
        with self.assertRaises(ConfigError):
            run_bench(tiny_config(), repetitions=0, points=10)

    def test_report_holds_every_sample(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bench.json")
            report = run_bench(tiny_config(), frames=2, repetitions=5, points=200, output_path=path)
            with open(path) as fh:
                self.assertEqual(json.load(fh)["repetitions"], 5)
        self.assertEqual(len(report["stages"]["end_to_end"]["samples_ms"]), 5)
        self.assertEqual(len(report["voxels_per_frame"]), 2)
        for stats in report["stages"].values():
            self.assertGreaterEqual(stats["median_ms"], 0.0)


class TrainRunTests(SimpleTestCase):
    def test_short_run_writes_checkpoint_and_trace(self):
        cfg = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            scenes = os.path.join(tmp, "scenes.json")
            run_synth_scenes(cfg, 2, 1, 5, scenes, points_per_object=24)
            ckpt = os.path.join(tmp, "p.ckpt")
            trace = os.path.join(tmp, "trace.csv")
            summary = run_train_toy(cfg, scenes, 3, 1e-3, checkpoint_path=ckpt, trace_path=trace)
            self.assertTrue(os.path.exists(ckpt))
            with open(trace) as fh:
                self.assertEqual(len(list(csv.DictReader(fh))), 3)
        self.assertEqual(summary["scenes"], 2)
        self.assertTrue(0.0 <= summary["recall_at_0.5"] <= 1.0)

    def test_same_seed_same_result(self):
        cfg = tiny_config()
        scenes = [synth_scene(s, 1, 5, cfg.range, points_per_object=24) for s in (0, 1)]
        a, _ = fit_scenes(cfg, scenes, 3, 1e-2, optimizer="adam")
        b, _ = fit_scenes(cfg, scenes, 3, 1e-2, optimizer="adam")
        self.assertEqual(a.trace, b.trace)


class CommandTests(SimpleTestCase):
    def call(self, *args):
        out = io.StringIO()
        call_command(*args, stdout=out)
        return out.getvalue()

    def test_voxelize_command_writes_summary_next_to_output(self):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "pts.bin")
            write_kitti_bin(PointCloud(np.array([[1.5, 0.5, -1.0, 0.3]], dtype=np.float32)), src)
            out = os.path.join(tmp, "v.mmvx")
            text = self.call("voxelize", "--preset", "tiny", "--input", src, "--output", out)
            self.assertTrue(os.path.exists(out + ".json"))
        self.assertEqual(json.loads(text)["K"], 1)

    def test_format_error_maps_to_exit_code_two(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError) as ctx:
                self.call("voxelize", "--input", os.path.join(tmp, "none.bin"), "--output", os.path.join(tmp, "v"))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertTrue(str(ctx.exception).startswith("kind=format code=2 msg="))

    def test_bad_workers_is_config_error(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("bench", "--preset", "tiny", "--workers", "0", "--points", "10")
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("kind=config", str(ctx.exception))

    def test_mismatched_voxel_dump_is_config_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "pts.bin")
            write_kitti_bin(PointCloud(np.array([[1.5, 0.5, -1.0, 0.3]], dtype=np.float32)), src)
            dump = os.path.join(tmp, "v.mmvx")
            self.call("voxelize", "--preset", "toy", "--input", src, "--output", dump)
            with self.assertRaises(CommandError) as ctx:
                self.call("encode", "--preset", "tiny", "--stream", "lidar", "--input", dump,
                          "--output", os.path.join(tmp, "l.mmff"))
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertTrue(str(ctx.exception).startswith("kind=config code=1 msg="))

    def test_vlpm_command_accepts_an_empty_frame(self):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "empty.bin")
            write_kitti_bin(PointCloud(np.zeros((0, 4), dtype=np.float32)), src)
            dump = os.path.join(tmp, "v.mmvx")
            self.call("voxelize", "--preset", "tiny", "--input", src, "--output", dump)
            out = os.path.join(tmp, "f.mmff")
            self.call("vlpm", "--preset", "tiny", "--input", dump, "--output", out)
            self.assertEqual(load_feature_map(out).dims, [1, 0, 4])

    def test_gradcheck_failure_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("gradcheck", "--tolerance", "0", "--max-entries", "1")
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertIn("kind=oracle", str(ctx.exception))

    def test_gradcheck_passes_on_tiny_preset(self):
        text = self.call("gradcheck", "--max-entries", "2")
        self.assertIn("gradcheck passed", text)

    def test_synth_then_train_commands(self):
        with tempfile.TemporaryDirectory() as tmp:
            scenes = os.path.join(tmp, "s.json")
            self.call("synth_scenes", "--preset", "tiny", "--count", "1", "--points-per-object", "24",
                      "--noise-points", "5", "--output", scenes)
            text = self.call("train_toy", "--preset", "tiny", "--scenes", scenes, "--steps", "2")
        self.assertEqual(json.loads(text)["steps"], 2)

    def test_background_train_is_queued(self):
        with mock.patch("mmfusion.apps.pipeline.management.commands.train_toy.train_toy_task") as task:
            task.delay.return_value.id = "abc"
            text = self.call("train_toy", "--scenes", "s.json", "--background")
        self.assertIn("abc", text)
        args = task.delay.call_args[0]
        self.assertEqual(PipelineConfig.from_dict(args[0]), toy_config())
