import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient

from elliptic.config import parse_config
from elliptic.enums import RunStatus
from elliptic.experiments import run_experiment
from elliptic.models import CheckResult, ExperimentRun

BETA_CONFIG = {
    'id': 'beta_small',
    'description': 'small beta packing',
    'anchor': 'beta packing',
    'seed': 3,
    'boundary': {'kind': 'lipschitz_graph', 'n': 3, 'd': 1,
                 'profiles': [{'name': 'sine', 'params': {'amplitude': 0.05, 'frequency': 1.0}}]},
    'budget': {'max_nodes': 10000, 'max_quadrature_nodes': 10000},
    'checks': [
        {'name': 'beta_carleson', 'tolerance': 1.0, 'params': {'levels': 2, 'per_axis': 9}},
        {'name': 'beta_carleson', 'tolerance': 0.0, 'mandatory': False, 'params': {'levels': 2, 'per_axis': 9}},
    ],
    'parameters': {'levels': 2},
}


class CatalogDirectoryMixin(object):
    """
        A throwaway catalog holding one cheap experiment, with outputs in the same temporary tree
    """

    def setUp(self):
        super().setUp()
        self.directory = tempfile.TemporaryDirectory()
        root = Path(self.directory.name)
        self.catalog = root / 'catalog'
        self.catalog.mkdir()
        (self.catalog / 'beta_small.json').write_text(json.dumps(BETA_CONFIG), encoding='utf-8')
        self.output_root = root / 'runs'
        self.settings_override = override_settings(DEGENLAB_EXPERIMENTS_DIR=self.catalog,
                                                   DEGENLAB_OUTPUT_ROOT=self.output_root, DEGENLAB_WORKERS=1)
        self.settings_override.enable()

    def tearDown(self):
        self.settings_override.disable()
        self.directory.cleanup()
        super().tearDown()


class ExperimentRunModelTests(CatalogDirectoryMixin, TestCase):
    def test_from_bundle(self):
        bundle = run_experiment(parse_config(BETA_CONFIG))
        experiment_run = ExperimentRun.from_bundle(bundle)
        self.assertTrue(experiment_run.passed)
        self.assertEqual(experiment_run.exit_code, 0)
        self.assertEqual(experiment_run.config_hash, bundle.config_hash)
        self.assertEqual(list(experiment_run.checks.values_list('status', flat=True)),
                         [RunStatus.PASSED, RunStatus.FAILED])
        self.assertEqual(str(experiment_run), 'beta_small (pass)')
        self.assertTrue(Path(bundle.output_dir).is_relative_to(self.output_root))


class ExperimentCatalogApiTests(CatalogDirectoryMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.client = APIClient()

    def test_list(self):
        response = self.client.get(reverse('experiments-list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual([entry['id'] for entry in response.json()], ['beta_small'])

    def test_retrieve(self):
        response = self.client.get(reverse('experiments-detail', args=['beta_small']))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.json()['checks'], ['beta_carleson', 'beta_carleson'])

    def test_retrieve_unknown(self):
        response = self.client.get(reverse('experiments-detail', args=['missing']))
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

    def test_run_stores_report(self):
        response = self.client.post(reverse('experiments-run', args=['beta_small']), {'workers': 1}, format='json')
        self.assertEqual(response.status_code, status.HTTP_201_CREATED)
        body = response.json()
        self.assertTrue(body['passed'])
        self.assertEqual(body['check_count'], 2)
        self.assertEqual(ExperimentRun.objects.count(), 1)

    def test_run_rejects_bad_workers(self):
        response = self.client.post(reverse('experiments-run', args=['beta_small']), {'workers': 0}, format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)

    def test_run_with_invalid_check_parameters(self):
        broken = dict(BETA_CONFIG, id='broken', boundary={'kind': 'affine_plane', 'n': 3, 'd': 1},
                      checks=[{'name': 'ar_regularity'}])
        (self.catalog / 'broken.json').write_text(json.dumps(broken), encoding='utf-8')
        response = self.client.post(reverse('experiments-run', args=['broken']), {}, format='json')
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn('error', response.json())
        self.assertEqual(ExperimentRun.objects.count(), 0)


class ExperimentRunApiTests(CatalogDirectoryMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.client = APIClient()
        self.experiment_run = ExperimentRun.from_bundle(run_experiment(parse_config(BETA_CONFIG)))

    def test_list_is_paginated(self):
        response = self.client.get(reverse('runs-list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        body = response.json()
        self.assertEqual(body['count'], 1)
        self.assertEqual(body['total_pages'], 1)
        self.assertEqual(body['results'][0]['experiment_id'], 'beta_small')

    def test_filter_by_outcome(self):
        response = self.client.get(reverse('runs-list'), {'passed': 'false'})
        self.assertEqual(response.json()['count'], 0)
        response = self.client.get(reverse('runs-list'), {'experiment': 'beta_small'})
        self.assertEqual(response.json()['count'], 1)

    def test_checks_action(self):
        response = self.client.get(reverse('runs-checks', args=[self.experiment_run.pk]))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual([c['position'] for c in response.json()['results']], [0, 1])

    def test_checks_filtered_by_status(self):
        response = self.client.get(reverse('runs-checks', args=[self.experiment_run.pk]), {'status': 'failed'})
        results = response.json()['results']
        self.assertEqual(len(results), 1)
        self.assertFalse(results[0]['mandatory'])

    def test_checks_invalid_status(self):
        response = self.client.get(reverse('runs-checks', args=[self.experiment_run.pk]), {'status': 'unknown'})
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)

    def test_delete_cascades(self):
        response = self.client.delete(reverse('runs-detail', args=[self.experiment_run.pk]))
        self.assertEqual(response.status_code, status.HTTP_204_NO_CONTENT)
        self.assertEqual(CheckResult.objects.count(), 0)

    def test_runs_are_read_only(self):
        response = self.client.post(reverse('runs-list'), {}, format='json')
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)


class ManagementCommandTests(CatalogDirectoryMixin, TestCase):
    def test_list_experiments(self):
        out = StringIO()
        call_command('list_experiments', stdout=out)
        self.assertIn('beta_small', out.getvalue())

    def test_run_experiment_with_store(self):
        out = StringIO()
        call_command('run_experiment', 'beta_small', '--store', '--output', str(self.output_root / 'cli'), stdout=out)
        self.assertIn('all mandatory checks passed', out.getvalue())
        self.assertTrue((self.output_root / 'cli' / 'report.json').exists())
        self.assertEqual(ExperimentRun.objects.count(), 1)

    def test_run_experiment_missing_config(self):
        with self.assertRaises(CommandError) as context:
            call_command('run_experiment', 'does_not_exist', stdout=StringIO())
        self.assertEqual(context.exception.returncode, 2)

    def test_run_experiment_failure_exit_code(self):
        failing = dict(BETA_CONFIG, id='failing', checks=[
            {'name': 'beta_carleson', 'tolerance': 0.0, 'params': {'levels': 2, 'per_axis': 9}}])
        (self.catalog / 'failing.json').write_text(json.dumps(failing), encoding='utf-8')
        with self.assertRaises(CommandError) as context:
            call_command('run_experiment', 'failing', stdout=StringIO())
        self.assertEqual(context.exception.returncode, 1)

    def test_sweep_experiment(self):
        out = StringIO()
        call_command('sweep_experiment', 'beta_small', '--param', 'checks.0.params.levels', '--values', '1', '2',
                     '--output', str(self.output_root / 'sweep'), stdout=out)
        self.assertIn('checks.0.params.levels=1: pass', out.getvalue())
        self.assertTrue((self.output_root / 'sweep' / 'sweep.csv').exists())

    def test_sweep_without_values(self):
        with self.assertRaises(CommandError) as context:
            call_command('sweep_experiment', 'beta_small', '--param', 'parameters.levels', stdout=StringIO())
        self.assertEqual(context.exception.returncode, 2)
