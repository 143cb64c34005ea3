# controldino/management/base.py
import logging

from django.core.management.base import BaseCommand, CommandError

from ..config import RunConfig, read_config_file
from ..errors import ControlDinoError, NumericError

logger = logging.getLogger(__name__)

EXIT_CONTRACT = 2
EXIT_NUMERIC = 3


class ControlDinoCommand(BaseCommand):
    """Base for the pipeline commands.

    Library errors become CommandError with exit code 2, or 3 for numeric
    failures. Options listed in `flag_keys` override run-config keys.
    """

    # option dest → dotted config key
    flag_keys = {}

    def add_config_argument(self, parser):
        parser.add_argument("--config", help="flat key=value run configuration file")

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except NumericError as e:
            raise CommandError(str(e), returncode=EXIT_NUMERIC) from e
        except ControlDinoError as e:
            raise CommandError(str(e), returncode=EXIT_CONTRACT) from e

    def run_config(self, options, base: RunConfig | None = None) -> RunConfig:
        run = base or RunConfig()
        if options.get("config"):
            run = run.override(read_config_file(options["config"]))
        overrides = {key: options[dest] for dest, key in self.flag_keys.items() if options.get(dest) is not None}
        if overrides:
            logger.debug("command-line overrides: %s", overrides)
            run = run.override(overrides)
        return run
