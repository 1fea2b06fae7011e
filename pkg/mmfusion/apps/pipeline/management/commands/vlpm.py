from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_vlpm


class Command(PipelineCommand):
    help = (
        "Compute per-voxel VLPM features for a voxel dump (written as a 1 x K x d feature map; "
        "an empty dump gives 1 x 0 x d)."
    )

    def add_stage_arguments(self, parser):
        parser.add_argument("--input", required=True, help="Voxel batch (MMVX).")
        parser.add_argument("--checkpoint", help="Parameter checkpoint; a seeded init is used when omitted.")
        parser.add_argument("--output", required=True)

    def run(self, cfg, workers, **options):
        dims = run_vlpm(cfg, options["input"], options["checkpoint"], options["output"], workers)
        self.stdout.write(self.style.SUCCESS(f"voxel features {dims} -> {options['output']}"))
