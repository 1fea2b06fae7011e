import logging
from typing import Optional

from celery import shared_task

from mmfusion.apps.pipeline.config import PipelineConfig
from mmfusion.apps.pipeline.runs import run_bench, run_train_toy
from mmfusion.errors import MMFusionError

logger = logging.getLogger(__name__)


@shared_task(queue="training", bind=True)
def train_toy_task(
    self,
    config: dict,
    scenes_path: str,
    steps: int,
    lr: float,
    optimizer: str = "sgd",
    weight_decay: float = 0.01,
    checkpoint_path: Optional[str] = None,
    trace_path: Optional[str] = None,
    init_checkpoint: Optional[str] = None,
    workers: int = 1,
) -> dict:
    """
    Toy overfitting run on the training worker.
    Takes the config as a plain dict so the task payload stays JSON.
    """
    cfg = PipelineConfig.from_dict(config)
    logger.info(f"[train_toy {self.request.id}] {steps} steps on {scenes_path}")
    try:
        return run_train_toy(
            cfg,
            scenes_path,
            steps,
            lr,
            optimizer=optimizer,
            weight_decay=weight_decay,
            checkpoint_path=checkpoint_path,
            trace_path=trace_path,
            init_checkpoint=init_checkpoint,
            workers=workers,
        )
    except MMFusionError as e:
        logger.error(f"[train_toy {self.request.id}] {e.error_line()}")
        raise


@shared_task(queue="training", bind=True)
def bench_task(
    self,
    config: dict,
    frames: int = 1,
    repetitions: int = 5,
    points: int = 120_000,
    output_path: Optional[str] = None,
    workers: int = 1,
) -> dict:
    cfg = PipelineConfig.from_dict(config)
    logger.info(f"[bench {self.request.id}] {repetitions}x{frames} frames of {points} points")
    try:
        return run_bench(cfg, frames, repetitions, points, output_path=output_path, workers=workers)
    except MMFusionError as e:
        logger.error(f"[bench {self.request.id}] {e.error_line()}")
        raise
