#!/usr/bin/env python
"""
Command-line entry point of degenerate_lab.

Besides the stock Django commands it exposes the experiment commands of the
elliptic app: list_experiments, run_experiment and sweep_experiment.
"""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'degenerate_lab.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError('Django is not importable; install the project dependencies '
                          '(uv pip install -r pyproject.toml) in the active environment') from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
