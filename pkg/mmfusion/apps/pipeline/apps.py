from django.apps import AppConfig


class PipelineAppConfig(AppConfig):
    name = "mmfusion.apps.pipeline"
    verbose_name = "Pipeline"
