from django.apps import AppConfig


class DataioConfig(AppConfig):
    name = "mmfusion.apps.dataio"
    verbose_name = "Data I/O"
