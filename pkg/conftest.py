import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "mmfusion.settings.base")
django.setup()
