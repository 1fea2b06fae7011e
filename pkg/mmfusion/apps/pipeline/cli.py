import json
import logging
from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from mmfusion.apps.pipeline.config import PRESETS, PipelineConfig, resolve_config
from mmfusion.apps.tensor_core.engine import PRECISIONS
from mmfusion.errors import ConfigError, MMFusionError

logger = logging.getLogger(__name__)


# Base command
class PipelineCommand(BaseCommand):
    """
    Base class for the pipeline management commands.

    Subclasses:
    1. Add their own flags in add_stage_arguments()
    2. Implement run(cfg, workers, **options) on top of a pipeline.runs driver
    3. Set ``preset`` when they should default to a small config instead of the full one

    Global flags (--config, --preset, --seed, --workers, --precision) are handled
    here. Any MMFusionError becomes a CommandError whose return code is the
    error's exit code and whose message is the kind=/code=/msg= line.
    """

    preset: Optional[str] = None

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Pipeline config JSON; missing keys take defaults.")
        parser.add_argument(
            "--preset",
            choices=sorted(PRESETS),
            help="Built-in config used when --config is omitted.",
        )
        parser.add_argument("--seed", type=int, help="Overrides the config seed.")
        parser.add_argument("--workers", type=int, help="Threads for voxelization and VLPM.")
        parser.add_argument("--precision", choices=sorted(PRECISIONS), help="Overrides the config precision.")
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def run(self, cfg: PipelineConfig, workers: int, **options) -> None:
        raise NotImplementedError("run method must be implemented by sub-classes")

    def handle(self, *args, **options):
        try:
            cfg = resolve_config(
                options.get("config"),
                seed=options.get("seed"),
                precision=options.get("precision"),
                preset=options.get("preset") or self.preset,
            )
            workers = options.get("workers")
            workers = settings.MMFUSION_WORKERS if workers is None else workers
            if workers < 1:
                raise ConfigError(f"--workers must be >= 1, got {workers}")
            options.pop("workers", None)
            self.run(cfg, workers, **options)
        except MMFusionError as err:
            logger.debug(f"{type(err).__name__} in {self.__module__}", exc_info=True)
            raise CommandError(err.error_line(), returncode=err.exit_code) from err

    def emit_json(self, payload) -> None:
        self.stdout.write(json.dumps(payload, indent=2, sort_keys=True))
