from pathlib import Path

from django.core.management.base import BaseCommand

from elliptic.experiments import list_experiments


class Command(BaseCommand):
    help = 'List the experiment catalog'

    def add_arguments(self, parser):
        parser.add_argument('--directory', type=Path, default=None, help='Catalog directory (default: DEGENLAB_EXPERIMENTS_DIR)')

    def handle(self, *args, **options):
        for entry in list_experiments(options['directory']):
            self.stdout.write(f'{entry.id:<26} {entry.anchor:<40} {entry.description}')
