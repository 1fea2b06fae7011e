from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_voxelize


class Command(PipelineCommand):
    help = "Voxelize a KITTI .bin point cloud into an MMVX voxel dump plus a JSON summary."

    def add_stage_arguments(self, parser):
        parser.add_argument("--input", required=True, help="KITTI float32 x,y,z,r point file.")
        parser.add_argument("--output", required=True, help="Voxel batch (MMVX) to write.")
        parser.add_argument("--summary", help="Summary JSON; defaults to <output>.json.")

    def run(self, cfg, workers, **options):
        summary_path = options["summary"] or f"{options['output']}.json"
        summary = run_voxelize(cfg, options["input"], options["output"], summary_path, workers)
        self.emit_json(summary)
