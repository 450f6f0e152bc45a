import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from traceback_with_variables import format_exc

from elliptic.exceptions import BudgetExceededError, ConfigError
from elliptic.experiments import run
from elliptic.models import ExperimentRun

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Run one experiment config and write report.json; exit 0 when every mandatory check passes'

    def add_arguments(self, parser):
        parser.add_argument('config', help='Path to a config file or the name of a catalog experiment')
        parser.add_argument('--output', type=Path, default=None, help='Output directory (default: runs/<id>)')
        parser.add_argument('--workers', type=int, default=None, help='Worker cap (default: DEGENLAB_WORKERS)')
        parser.add_argument('--store', action='store_true', help='Persist the report in the database')

    def handle(self, *args, **options):
        try:
            bundle = run(options['config'], options['output'], options['workers'])
        except (ConfigError, BudgetExceededError) as e:
            logger.error(format_exc(e))
            raise CommandError(str(e), returncode=e.exit_code)

        for record in bundle.checks:
            outcome = 'pass' if record.passed else ('error' if record.message else 'FAIL')
            value = '-' if record.value is None else f'{record.value:.6g}'
            self.stdout.write(f'{record.name:<28} {outcome:<6} value={value} tolerance={record.tolerance}')

        if options['store']:
            experiment_run = ExperimentRun.from_bundle(bundle)
            self.stdout.write(f'Stored as run #{experiment_run.pk}')

        report = Path(bundle.output_dir) / 'report.json'
        if not bundle.passed:
            raise CommandError(f'{bundle.experiment_id}: mandatory checks failed, see {report}',
                               returncode=bundle.exit_code)
        self.stdout.write(self.style.SUCCESS(f'{bundle.experiment_id}: all mandatory checks passed ({report})'))
