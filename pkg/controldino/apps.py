import logging

from django.apps import AppConfig
from django.conf import settings

logger = logging.getLogger(__name__)


class ControlDinoConfig(AppConfig):
    name = 'controldino'
    verbose_name = "Control-DINO"

    def ready(self):
        import torch

        threads = getattr(settings, "CDK_THREADS", 0)
        if threads > 0:
            torch.set_num_threads(threads)
            logger.debug("torch intra-op threads capped at %d", threads)
