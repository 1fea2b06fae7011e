from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_fuse


class Command(PipelineCommand):
    help = "Fuse a LiDAR and an image feature map with MFFM."

    def add_stage_arguments(self, parser):
        parser.add_argument("--lidar-features", dest="lidar", required=True)
        parser.add_argument("--image-features", dest="image", required=True)
        parser.add_argument("--checkpoint", help="Parameter checkpoint; a seeded init is used when omitted.")
        parser.add_argument("--output", required=True)

    def run(self, cfg, workers, **options):
        dims = run_fuse(cfg, options["lidar"], options["image"], options["checkpoint"], options["output"])
        self.stdout.write(self.style.SUCCESS(f"fused features {dims} -> {options['output']}"))
