from mmfusion.apps.detect_head.training import OPTIMIZERS
from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_train_toy
from mmfusion.apps.pipeline.tasks import train_toy_task


class Command(PipelineCommand):
    help = "Overfit the full pipeline on a small set of labeled synthetic scenes."

    preset = "toy"

    def add_stage_arguments(self, parser):
        parser.add_argument("--scenes", required=True, help="Scene JSON from synth_scenes.")
        parser.add_argument("--steps", type=int, default=500)
        parser.add_argument("--lr", type=float, default=1e-3)
        parser.add_argument("--optimizer", choices=sorted(OPTIMIZERS), default="sgd")
        parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.01)
        parser.add_argument("--out", help="Checkpoint to write after training.")
        parser.add_argument("--trace", help="CSV loss trace, one row per step.")
        parser.add_argument("--init-checkpoint", dest="init_checkpoint", help="Start from these parameters.")
        parser.add_argument("--background", action="store_true", help="Queue on the training worker instead.")

    def run(self, cfg, workers, **options):
        kwargs = dict(
            optimizer=options["optimizer"],
            weight_decay=options["weight_decay"],
            checkpoint_path=options["out"],
            trace_path=options["trace"],
            init_checkpoint=options["init_checkpoint"],
            workers=workers,
        )
        if options["background"]:
            result = train_toy_task.delay(cfg.to_dict(), options["scenes"], options["steps"], options["lr"], **kwargs)
            self.stdout.write(self.style.SUCCESS(f"Queued train_toy as task {result.id}"))
            return
        summary = run_train_toy(cfg, options["scenes"], options["steps"], options["lr"], **kwargs)
        self.emit_json(summary)
