"""
Stage drivers shared by the management commands and the Celery tasks.

Each driver reads its inputs, runs one slice of the pipeline and writes its
artifacts atomically. They raise MMFusionError subclasses and never exit.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import platform
import statistics
import time
from contextlib import contextmanager
from typing import Optional

import numpy as np

from mmfusion.apps.dataio.clouds import read_kitti_bin
from mmfusion.apps.dataio.feature_maps import FeatureMap, Frame, load_feature_map, save_feature_map
from mmfusion.apps.dataio.images import load_image
from mmfusion.apps.dataio.synthetic import (
    SyntheticScene,
    load_scenes,
    placeholder_image,
    random_cloud,
    save_scenes,
    synth_scene,
)
from mmfusion.apps.detect_head.head import head_forward
from mmfusion.apps.detect_head.training import TrainResult, train_toy, write_trace
from mmfusion.apps.pipeline.config import PipelineConfig
from mmfusion.apps.pipeline.model import STAGE_PREFIXES, Pipeline
from mmfusion.apps.streams.encoders import bev_encode
from mmfusion.apps.tensor_core.checkpoint import load_checkpoint, save_checkpoint
from mmfusion.apps.tensor_core.engine import no_grad
from mmfusion.apps.tensor_core.gradcheck import GradCheckReport, grad_check
from mmfusion.apps.tensor_core.params import ParamStore
from mmfusion.apps.voxelizer.dump import load_voxel_batch, save_summary, save_voxel_batch
from mmfusion.apps.voxelizer.voxels import scatter_bev
from mmfusion.errors import ConfigError, DataError, OracleError, ParamLookupError
from mmfusion.files import PathLike, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

GRADCHECK_FIELDS = ("module", "parameter", "checked", "max_rel_error", "worst_index", "analytic", "numeric", "passed")
BENCH_STAGES = ("voxelize", "vlpm", "scatter", "bev_encode", "image_encode", "mffm", "head", "end_to_end")


def load_params(pipeline: Pipeline, checkpoint: Optional[PathLike], prefixes=None) -> ParamStore:
    """Checkpoint parameters checked against the config, or a seeded fresh set."""
    cfg = pipeline.cfg
    if checkpoint is None:
        logger.warning(f"No checkpoint given; using seeded initialization (seed={cfg.seed})")
        return pipeline.init_params()
    params = load_checkpoint(checkpoint, dtype=cfg.precision, seed=cfg.seed)
    pipeline.check_params(params, prefixes)
    return params


@contextmanager
def _stage(name: str):
    start = time.perf_counter()
    yield
    logger.info(f"{name} took {1000 * (time.perf_counter() - start):.1f} ms")


# ---------------------------
# Single stages
# ---------------------------


def run_voxelize(
    cfg: PipelineConfig, input_path: PathLike, output_path: PathLike, summary_path: PathLike, workers: int = 1
) -> dict:
    pipeline = Pipeline(cfg, workers)
    cloud = read_kitti_bin(input_path)
    with _stage("voxelize"):
        batch = pipeline.voxelize(cloud)
    save_voxel_batch(batch, output_path)
    summary = save_summary(batch, summary_path)
    logger.info(
        f"Voxelized {batch.n_input} points into {len(batch)} voxels "
        f"(dropped {batch.dropped_by_points} by N, {batch.dropped_by_cap} by cap)"
    )
    return summary


def run_vlpm(
    cfg: PipelineConfig,
    input_path: PathLike,
    checkpoint: Optional[PathLike],
    output_path: PathLike,
    workers: int = 1,
) -> list[int]:
    """Per-voxel features, stored as a 1×K×d feature map."""
    pipeline = Pipeline(cfg, workers)
    batch = load_voxel_batch(input_path)
    batch.check_config(cfg.voxelizer)
    if len(batch) == 0:
        logger.warning(f"Voxel batch {input_path} is empty; writing a 1×0×{cfg.vlpm.output_dim} map")
    params = load_params(pipeline, checkpoint, STAGE_PREFIXES["vlpm"])
    with no_grad(), _stage("vlpm"):
        feats = pipeline.voxel_features(batch, params)
    fmap = FeatureMap(feats.data[None, :, :])
    save_feature_map(fmap, output_path)
    return fmap.dims


def run_encode(
    cfg: PipelineConfig,
    stream: str,
    input_path: PathLike,
    checkpoint: Optional[PathLike],
    output_path: PathLike,
    workers: int = 1,
) -> list[int]:
    pipeline = Pipeline(cfg, workers)
    if stream == "lidar":
        params = load_params(pipeline, checkpoint, STAGE_PREFIXES["vlpm"] + ("bev.",))
        batch = load_voxel_batch(input_path)
        batch.check_config(cfg.voxelizer)
        with no_grad(), _stage("lidar stream"):
            fmap = pipeline.lidar_features(batch, params)
    elif stream == "image":
        params = load_params(pipeline, checkpoint, ("img.",))
        if cfg.streams.image_source == "feature_file":
            image = load_feature_map(input_path, Frame.IMAGE)
        else:
            image = load_image(input_path, cfg.streams.image_in)
        with no_grad(), _stage("image stream"):
            fmap = pipeline.image_features(image, params)
    else:
        raise ConfigError(f"stream must be 'lidar' or 'image', got {stream!r}")
    save_feature_map(fmap, output_path)
    return fmap.dims


def run_fuse(
    cfg: PipelineConfig,
    lidar_path: PathLike,
    image_path: PathLike,
    checkpoint: Optional[PathLike],
    output_path: PathLike,
) -> list[int]:
    pipeline = Pipeline(cfg)
    f_l = load_feature_map(lidar_path, Frame.BEV)
    f_i = load_feature_map(image_path, Frame.IMAGE)
    if tuple(f_l.dims) != tuple(cfg.streams.lidar_out):
        raise ConfigError(f"LiDAR features have dims {f_l.dims}, config expects {list(cfg.streams.lidar_out)}")
    if tuple(f_i.dims) != tuple(cfg.streams.image_out):
        raise ConfigError(f"image features have dims {f_i.dims}, config expects {list(cfg.streams.image_out)}")
    params = load_params(pipeline, checkpoint, STAGE_PREFIXES["mffm"])
    dtype = params.dtype
    f_l = FeatureMap(f_l.data.astype(dtype), Frame.BEV)
    f_i = FeatureMap(f_i.data.astype(dtype), Frame.IMAGE)
    with no_grad(), _stage("fuse"):
        fused = pipeline.fuse(f_l, f_i, params)
    save_feature_map(fused, output_path)
    return fused.dims


# ---------------------------
# Scenes and training
# ---------------------------


def run_synth_scenes(
    cfg: PipelineConfig,
    count: int,
    objects: int,
    noise_points: int,
    output_path: PathLike,
    points_per_object: int = 60,
) -> int:
    if count < 1:
        raise ConfigError(f"scene count must be >= 1, got {count}")
    scenes = [
        synth_scene(cfg.seed + i, objects, noise_points, cfg.range, points_per_object=points_per_object)
        for i in range(count)
    ]
    save_scenes(scenes, output_path)
    return len(scenes)


def fit_scenes(
    cfg: PipelineConfig,
    scenes: list[SyntheticScene],
    steps: int,
    lr: float,
    *,
    optimizer: str = "sgd",
    weight_decay: float = 0.01,
    params: Optional[ParamStore] = None,
    workers: int = 1,
) -> tuple[TrainResult, float]:
    """Train the whole pipeline on in-memory scenes; returns the result and the training-set recall."""
    if not scenes:
        raise DataError("no scenes to train on")
    pipeline = Pipeline(cfg, workers)
    prepared = [pipeline.prepare(s) for s in scenes]
    params = params if params is not None else pipeline.init_params()

    def loss_fn(p: ParamStore, i: int):
        return pipeline.scene_loss(prepared[i], p)

    with _stage(f"train_toy ({steps} steps)"):
        result = train_toy(loss_fn, params, len(prepared), steps, lr, optimizer=optimizer, weight_decay=weight_decay)
    return result, pipeline.recall(prepared, result.params)


def run_train_toy(
    cfg: PipelineConfig,
    scenes_path: PathLike,
    steps: int,
    lr: float,
    *,
    optimizer: str = "sgd",
    weight_decay: float = 0.01,
    checkpoint_path: Optional[PathLike] = None,
    trace_path: Optional[PathLike] = None,
    init_checkpoint: Optional[PathLike] = None,
    workers: int = 1,
) -> dict:
    scenes = load_scenes(scenes_path)
    if not scenes:
        raise DataError("scene file holds no scenes", path=str(scenes_path))
    params = load_params(Pipeline(cfg), init_checkpoint) if init_checkpoint else None
    result, recall = fit_scenes(
        cfg, scenes, steps, lr, optimizer=optimizer, weight_decay=weight_decay, params=params, workers=workers
    )
    if checkpoint_path is not None:
        save_checkpoint(result.params, checkpoint_path)
    if trace_path is not None:
        write_trace(result.trace, trace_path)
    summary = {
        "scenes": len(scenes),
        "steps": steps,
        "lr": lr,
        "optimizer": optimizer,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "recall_at_0.5": recall,
    }
    logger.info(f"Toy training finished: {summary}")
    return summary


# ---------------------------
# Gradient oracle
# ---------------------------


def _module_of(name: str) -> str:
    for module, prefixes in STAGE_PREFIXES.items():
        if name.startswith(prefixes):
            return module
    return "other"


def perturb_biases(params: ParamStore, seed: int, scale: float = 0.1) -> None:
    """Move biases and positional encodings off zero so no ReLU sits on its kink."""
    rng = np.random.default_rng([seed, 3])
    for name in params.names():
        if name.rsplit(".", 1)[-1] in ("b", "b1", "b2") or name.startswith("mffm.pos"):
            params.set_value(name, rng.normal(scale=scale, size=params.value(name).shape))


def gradcheck_report_csv(report: GradCheckReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GRADCHECK_FIELDS)
    by_module: dict[str, list] = {}
    for row in report.rows:
        module = _module_of(row.name)
        by_module.setdefault(module, []).append(row)
        writer.writerow(
            [
                module,
                row.name,
                row.checked,
                repr(row.max_rel_error),
                "x".join(str(i) for i in row.worst_index),
                repr(row.analytic),
                repr(row.numeric),
                int(row.max_rel_error < report.tolerance),
            ]
        )
    for module, rows in by_module.items():
        worst = max(rows, key=lambda r: r.max_rel_error)
        passed = int(worst.max_rel_error < report.tolerance)
        checked = sum(r.checked for r in rows)
        writer.writerow([module, "*", checked, repr(worst.max_rel_error), worst.name, "", "", passed])
    checked = sum(r.checked for r in report.rows)
    worst_name = report.worst_name or ""
    writer.writerow(["end_to_end", "*", checked, repr(report.max_rel_error), worst_name, "", "", int(report.passed)])
    return buf.getvalue()


def run_gradcheck(
    cfg: PipelineConfig,
    tolerance: float = 1e-4,
    *,
    h: float = 1e-6,
    report_path: Optional[PathLike] = None,
    corrupt: Optional[str] = None,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """
    Finite-difference check of every parameter against the end-to-end detection loss
    of one small synthetic scene. Raises OracleError naming the worst tensor on failure.
    """
    if tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
    if cfg.precision != "f64":
        logger.warning("Gradient check in 32-bit precision will not meet tight tolerances")
    pipeline = Pipeline(cfg)
    scene = synth_scene(cfg.seed, 1, 20, cfg.range, points_per_object=24)
    prepared = pipeline.prepare(scene)
    params = pipeline.init_params()
    perturb_biases(params, cfg.seed)
    if corrupt is not None and corrupt not in params:
        raise ParamLookupError(f"no parameter named {corrupt!r} to corrupt")

    def loss(p: ParamStore):
        return pipeline.scene_loss(prepared, p).total

    with _stage("gradcheck"):
        report = grad_check(loss, params, h=h, tol=tolerance, max_entries=max_entries, corrupt=corrupt, seed=cfg.seed)
    if report_path is not None:
        atomic_write_text(report_path, gradcheck_report_csv(report))
    if not report.passed:
        raise OracleError(
            f"gradient check failed: {report.worst_name} max rel error {report.max_rel_error:.3e} >= {tolerance:g}"
        )
    return report


# ---------------------------
# Benchmark
# ---------------------------


def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
        "numpy": np.__version__,
    }


def run_bench(
    cfg: PipelineConfig,
    frames: int = 1,
    repetitions: int = 5,
    points: int = 120_000,
    *,
    output_path: Optional[PathLike] = None,
    workers: int = 1,
) -> dict:
    """
    Median wall time per stage over ``repetitions`` passes of ``frames`` synthetic frames.

    Every stage sample is milliseconds per frame; nothing is asserted.
    """
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    pipeline = Pipeline(cfg, workers)
    params = pipeline.init_params()
    clouds = [random_cloud(cfg.seed + i, points, cfg.range) for i in range(frames)]
    images = [placeholder_image(cfg.seed + i, cfg.streams.image_in) for i in range(frames)]
    samples = {stage: [] for stage in BENCH_STAGES}
    throughput = []
    voxels = []

    for rep in range(repetitions):
        spent = dict.fromkeys(BENCH_STAGES, 0.0)
        for cloud, image in zip(clouds, images):
            with no_grad():
                t0 = time.perf_counter()
                batch = pipeline.voxelize(cloud)
                t1 = time.perf_counter()
                feats = pipeline.voxel_features(batch, params)
                t2 = time.perf_counter()
                bev = scatter_bev(feats, batch.indices, cfg.voxelizer.grid_dims)
                t3 = time.perf_counter()
                f_l = bev_encode(bev, cfg.streams, params)
                t4 = time.perf_counter()
                f_i = pipeline.image_features(image, params)
                t5 = time.perf_counter()
                f_f = pipeline.fuse(f_l, f_i, params)
                t6 = time.perf_counter()
                head_forward(f_f, params)
                t7 = time.perf_counter()
            marks = (t0, t1, t2, t3, t4, t5, t6, t7)
            for stage, (a, b) in zip(BENCH_STAGES, zip(marks, marks[1:])):
                spent[stage] += b - a
            spent["end_to_end"] += t7 - t0
            if rep == 0:
                voxels.append(len(batch))
        for stage in BENCH_STAGES:
            samples[stage].append(1000.0 * spent[stage] / frames)
        throughput.append(points * frames / max(spent["voxelize"], 1e-12))
        logger.info(f"Bench repetition {rep + 1}/{repetitions}: {samples['end_to_end'][-1]:.1f} ms/frame")

    report = {
        "frames": frames,
        "repetitions": repetitions,
        "points_per_frame": points,
        "workers": workers,
        "voxels_per_frame": voxels,
        "machine": machine_info(),
        "stages": {
            stage: {"samples_ms": values, "median_ms": statistics.median(values)} for stage, values in samples.items()
        },
        "voxelize_points_per_s": {"samples": throughput, "median": statistics.median(throughput)},
    }
    if output_path is not None:
        atomic_write_json(output_path, report)
    return report
