import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from traceback_with_variables import format_exc

from elliptic.exceptions import BudgetExceededError, ConfigError
from elliptic.experiments import sweep

logger = logging.getLogger(__name__)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


class Command(BaseCommand):
    help = 'Run an experiment once per value of a dotted config parameter and aggregate the checks in sweep.csv'

    def add_arguments(self, parser):
        parser.add_argument('config', help='Path to a config file or the name of a catalog experiment')
        parser.add_argument('--param', required=True, help='Dotted path, e.g. parameters.epsilon or grid.h_min')
        parser.add_argument('--values', nargs='*', default=[], help='JSON literals; bare words are taken as strings')
        parser.add_argument('--output', type=Path, default=None)
        parser.add_argument('--workers', type=int, default=None)

    def handle(self, *args, **options):
        values = [parse_value(v) for v in options['values']]
        try:
            result = sweep(options['config'], options['param'], values, options['output'], options['workers'])
        except (ConfigError, BudgetExceededError) as e:
            logger.error(format_exc(e))
            raise CommandError(str(e), returncode=e.exit_code)

        for value, bundle in zip(result.values, result.bundles):
            self.stdout.write(f'{result.parameter}={value}: {"pass" if bundle.passed else "FAIL"}')
        if result.exit_code:
            raise CommandError(f'Some sweep points failed, see {result.table}', returncode=result.exit_code)
        self.stdout.write(self.style.SUCCESS(f'Sweep table written to {result.table}'))
