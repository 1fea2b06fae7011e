from django.apps import AppConfig


class VlpmAppConfig(AppConfig):
    name = "mmfusion.apps.vlpm"
    verbose_name = "Voxel local perception"
