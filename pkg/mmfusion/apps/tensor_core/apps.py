from django.apps import AppConfig


class TensorCoreConfig(AppConfig):
    name = "mmfusion.apps.tensor_core"
    verbose_name = "Tensor core"
