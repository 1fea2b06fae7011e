from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_bench
from mmfusion.apps.pipeline.tasks import bench_task


class Command(PipelineCommand):
    help = "Time every pipeline stage on synthetic frames and report per-stage medians."

    def add_stage_arguments(self, parser):
        parser.add_argument("--frames", type=int, default=1)
        parser.add_argument("--repetitions", type=int, default=5)
        parser.add_argument("--points", type=int, default=120_000, help="Points per frame.")
        parser.add_argument("--output", help="JSON report path.")
        parser.add_argument("--background", action="store_true", help="Queue on the training worker instead.")

    def run(self, cfg, workers, **options):
        args = (options["frames"], options["repetitions"], options["points"])
        if options["background"]:
            result = bench_task.delay(cfg.to_dict(), *args, output_path=options["output"], workers=workers)
            self.stdout.write(self.style.SUCCESS(f"Queued bench as task {result.id}"))
            return
        report = run_bench(cfg, *args, output_path=options["output"], workers=workers)
        for stage, stats in report["stages"].items():
            self.stdout.write(f"{stage:<14}{stats['median_ms']:10.2f} ms/frame")
        self.stdout.write(f"voxelize      {report['voxelize_points_per_s']['median']:12.0f} points/s")
