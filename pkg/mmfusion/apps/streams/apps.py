from django.apps import AppConfig


class StreamsConfig(AppConfig):
    name = "mmfusion.apps.streams"
    verbose_name = "Single-modal streams"
