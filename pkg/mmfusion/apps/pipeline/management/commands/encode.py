from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_encode


class Command(PipelineCommand):
    help = "Run the LiDAR (voxel dump) or image stream encoder and write an MMFF feature map."

    def add_stage_arguments(self, parser):
        parser.add_argument("--stream", required=True, choices=["lidar", "image"])
        parser.add_argument("--input", required=True, help="MMVX dump for lidar; .npy image or MMFF map for image.")
        parser.add_argument("--checkpoint", help="Parameter checkpoint; a seeded init is used when omitted.")
        parser.add_argument("--output", required=True)

    def run(self, cfg, workers, **options):
        dims = run_encode(
            cfg, options["stream"], options["input"], options["checkpoint"], options["output"], workers
        )
        self.stdout.write(self.style.SUCCESS(f"{options['stream']} features {dims} -> {options['output']}"))
