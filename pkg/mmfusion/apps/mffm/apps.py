from django.apps import AppConfig


class MffmAppConfig(AppConfig):
    name = "mmfusion.apps.mffm"
    verbose_name = "Multi-modal feature fusion"
