from django.apps import AppConfig


class DetectHeadConfig(AppConfig):
    name = "mmfusion.apps.detect_head"
    verbose_name = "Detection head"
