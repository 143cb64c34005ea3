#!/usr/bin/env python
"""Control-DINO command-line utility (train, infer, rollout, render-features, ...)."""
import os
import sys

# CLI verbs are spelled with hyphens; Django command modules use underscores.
HYPHENATED_COMMANDS = {
    "render-features": "render_features",
    "pca-analyze": "pca_analyze",
    "encode-features": "encode_features",
}


def main():
    """Run a control-dino command."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'controlsite.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    argv = list(sys.argv)
    if len(argv) > 1:
        argv[1] = HYPHENATED_COMMANDS.get(argv[1], argv[1])
    execute_from_command_line(argv)


if __name__ == '__main__':
    main()
