# controlsite/settings.py
from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

# Load env in correct priority:
# 1) .env.local (development)
# 2) .env (shared defaults)
load_dotenv(BASE_DIR / ".env.local")
load_dotenv(BASE_DIR / ".env")  # won't override existing vars by default

def env_bool(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip() in ("1", "true", "True", "yes", "YES")

def env_int(name: str, default: int = 0) -> int:
    raw = os.getenv(name, "").strip()
    return int(raw) if raw else default

def env_list(name: str):
    raw = os.getenv(name, "")
    return [x.strip() for x in raw.split(",") if x.strip()]

SECRET_KEY = os.getenv("CDK_SECRET_KEY", "unsafe-dev-secret")
DEBUG = env_bool("CDK_DEBUG", "0")

ALLOWED_HOSTS = env_list("CDK_ALLOWED_HOSTS")

# -------------------------------------------------
# Apps
# -------------------------------------------------
INSTALLED_APPS = [
    "controldino.apps.ControlDinoConfig",
]

# No database: every command works on files.
DATABASES = {}

# -------------------------------------------------
# i18n
# -------------------------------------------------
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

# -------------------------------------------------
# Compute
# -------------------------------------------------
# Caps torch intra-op threads (0 keeps torch's own default).
CDK_THREADS = env_int("CDK_THREADS", 0)

# Default dataset root for `train` when the run config has no data.root
CDK_DATA_ROOT = os.getenv("CDK_DATA_ROOT", "")

# -------------------------------------------------
# Logging
# -------------------------------------------------
CDK_LOG_LEVEL = os.getenv("CDK_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "loggers": {
        "controldino": {
            "handlers": ["console"],
            "level": CDK_LOG_LEVEL,
            "propagate": False,
        },
    },
}
