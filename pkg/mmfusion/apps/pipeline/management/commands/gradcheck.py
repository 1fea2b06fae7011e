from mmfusion.apps.pipeline.cli import PipelineCommand
from mmfusion.apps.pipeline.runs import run_gradcheck


class Command(PipelineCommand):
    help = "Compare analytic and finite-difference gradients of the end-to-end loss for every parameter."

    preset = "tiny"

    def add_stage_arguments(self, parser):
        parser.add_argument("--tolerance", type=float, default=1e-4)
        parser.add_argument("--step", type=float, default=1e-6, help="Central-difference step h.")
        parser.add_argument("--report", help="Per-parameter CSV report.")
        parser.add_argument("--corrupt", help="Parameter whose analytic gradient is deliberately perturbed.")
        parser.add_argument("--max-entries", dest="max_entries", type=int, help="Entries sampled per tensor.")

    def run(self, cfg, workers, **options):
        report = run_gradcheck(
            cfg,
            options["tolerance"],
            h=options["step"],
            report_path=options["report"],
            corrupt=options["corrupt"],
            max_entries=options["max_entries"],
        )
        self.stdout.write(
            self.style.SUCCESS(
                f"gradcheck passed: max rel error {report.max_rel_error:.3e} ({report.worst_name}) "
                f"over {len(report.rows)} tensors"
            )
        )
