import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()  # Load .env file if present

BASE_DIR = Path(__file__).resolve().parents[2]
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "dev-insecure-key")
DEBUG = os.getenv("DJANGO_DEBUG", "false").lower() in {"1", "true", "yes"}

INSTALLED_APPS = [
    "mmfusion.apps.tensor_core.apps.TensorCoreConfig",
    "mmfusion.apps.dataio.apps.DataioConfig",
    "mmfusion.apps.voxelizer.apps.VoxelizerConfig",
    "mmfusion.apps.vlpm.apps.VlpmAppConfig",
    "mmfusion.apps.streams.apps.StreamsConfig",
    "mmfusion.apps.mffm.apps.MffmAppConfig",
    "mmfusion.apps.detect_head.apps.DetectHeadConfig",
    "mmfusion.apps.pipeline.apps.PipelineAppConfig",
]

# Nothing is persisted in a database; artifacts are files.
DATABASES = {}

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

# ==============================================================================
# Pipeline defaults (overridden by --config JSON, then by command-line flags)
# ==============================================================================

MMFUSION_PRECISION = os.getenv("MMFUSION_PRECISION", "f32")
MMFUSION_SEED = int(os.getenv("MMFUSION_SEED", "0"))
MMFUSION_WORKERS = int(os.getenv("MMFUSION_WORKERS", "1"))
# Voxels per VLPM work unit. Chunk boundaries never depend on the worker count.
MMFUSION_VLPM_CHUNK = int(os.getenv("MMFUSION_VLPM_CHUNK", "4096"))
MMFUSION_LOG = os.getenv("MMFUSION_LOG", "INFO").upper()

# Celery configuration
CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", "redis://redis:6379/0")
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", CELERY_BROKER_URL)
CELERY_TASK_DEFAULT_QUEUE = os.getenv("CELERY_TASK_DEFAULT_QUEUE", "training")
CELERY_TASK_ACKS_LATE = True
CELERY_TASK_ALWAYS_EAGER = os.getenv("CELERY_TASK_ALWAYS_EAGER", "false").lower() in {
    "1",
    "true",
    "yes",
}
CELERY_TASK_TIME_LIMIT = int(os.getenv("CELERY_TASK_TIME_LIMIT", "1800"))

CELERY_BROKER_CONNECTION_RETRY_ON_STARTUP = True

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        },
        "simple": {"format": "%(levelname)s %(message)s"},
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        }
    },
    "root": {"handlers": ["console"], "level": "WARNING"},
    "loggers": {
        "django": {"handlers": ["console"], "level": "WARNING", "propagate": False},
        "mmfusion": {
            "handlers": ["console"],
            "level": MMFUSION_LOG,
            "propagate": False,
        },
        "celery": {"handlers": ["console"], "level": "INFO", "propagate": False},
    },
}
