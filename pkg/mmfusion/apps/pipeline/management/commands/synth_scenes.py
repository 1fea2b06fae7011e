from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_synth_scenes


class Command(PipelineCommand):
    help = "Write seeded synthetic labeled scenes for toy training."

    preset = "toy"

    def add_stage_arguments(self, parser):
        parser.add_argument("--count", type=int, default=5)
        parser.add_argument("--objects", type=int, default=1)
        parser.add_argument("--noise-points", dest="noise_points", type=int, default=200)
        parser.add_argument("--points-per-object", dest="points_per_object", type=int, default=60)
        parser.add_argument("--output", required=True)

    def run(self, cfg, workers, **options):
        n = run_synth_scenes(
            cfg,
            options["count"],
            options["objects"],
            options["noise_points"],
            options["output"],
            points_per_object=options["points_per_object"],
        )
        self.stdout.write(self.style.SUCCESS(f"Wrote {n} scenes to {options['output']}"))
