from django.apps import AppConfig


class VoxelizerConfig(AppConfig):
    name = "mmfusion.apps.voxelizer"
    verbose_name = "Voxelizer"
