import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase, override_settings

from elliptic.config import GridConfig, parse_config
from elliptic.exceptions import BudgetExceededError, ConfigError
from elliptic.experiments import (CHECKS, list_experiments, oracle_resolutions, resolve_config_path, run,
                                  run_experiment, sweep, validate_checks)

SINE_BOUNDARY = {'kind': 'lipschitz_graph', 'n': 3, 'd': 1,
                 'profiles': [{'name': 'sine', 'params': {'amplitude': 0.05, 'frequency': 1.0}}]}


def beta_config(**overrides):
    raw = {
        'id': 'beta_small',
        'description': 'small beta packing',
        'anchor': 'beta packing',
        'seed': 3,
        'boundary': SINE_BOUNDARY,
        'budget': {'max_nodes': 10000, 'max_quadrature_nodes': 10000},
        'checks': [{'name': 'beta_carleson', 'tolerance': 1.0, 'params': {'levels': 2, 'per_axis': 9}}],
        'parameters': {'levels': 2},
    }
    raw.update(overrides)
    return raw


class CatalogTests(SimpleTestCase):
    def test_catalog_lists_every_experiment(self):
        entries = {entry.id: entry for entry in list_experiments()}
        self.assertIn('magic_residual', entries)
        self.assertIn('measure_comparability', entries)
        self.assertIn('determinism', entries)
        self.assertEqual(entries['magic_residual'].checks, ['magic_residual_battery'])

    def test_catalog_checks_are_registered(self):
        for entry in list_experiments():
            self.assertTrue(set(entry.checks) <= set(CHECKS), entry.id)

    def test_broken_entries_are_skipped(self):
        with tempfile.TemporaryDirectory() as directory:
            Path(directory, 'broken.json').write_text('{', encoding='utf-8')
            Path(directory, 'good.json').write_text(json.dumps(beta_config()), encoding='utf-8')
            self.assertEqual([entry.id for entry in list_experiments(Path(directory))], ['beta_small'])

    def test_resolve_catalog_name(self):
        path = resolve_config_path('beta_carleson')
        self.assertEqual(path, Path(settings.DEGENLAB_EXPERIMENTS_DIR) / 'beta_carleson.json')

    def test_unknown_check(self):
        config = parse_config(beta_config(checks=[{'name': 'riemann_hypothesis'}]))
        with self.assertRaises(ConfigError):
            validate_checks(config)


class RunTests(SimpleTestCase):
    def test_bundle_and_report_file(self):
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(beta_config()), Path(directory), workers=1)
            report = json.loads((Path(directory) / 'report.json').read_text(encoding='utf-8'))
            files = sorted(p.name for p in Path(directory).glob('*.csv'))
        self.assertTrue(bundle.passed)
        self.assertEqual(bundle.exit_code, 0)
        self.assertEqual(report['config_hash'], parse_config(beta_config()).config_hash())
        expected = ['00_beta_carleson_cubes.csv', '00_beta_carleson_quotients.csv']
        self.assertEqual(report['checks'][0]['files'], expected)
        self.assertEqual(files, expected)
        self.assertIn('numpy', bundle.environment)

    def test_failed_mandatory_check(self):
        raw = beta_config(checks=[
            {'name': 'beta_carleson', 'tolerance': 0.0, 'params': {'levels': 2, 'per_axis': 9}}])
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(raw), Path(directory))
        self.assertFalse(bundle.passed)
        self.assertEqual(bundle.exit_code, 1)

    def test_optional_failure_keeps_run_passing(self):
        raw = beta_config(checks=[
            {'name': 'beta_carleson', 'tolerance': 0.0, 'mandatory': False, 'params': {'levels': 2, 'per_axis': 9}},
            {'name': 'beta_carleson', 'tolerance': 1.0, 'params': {'levels': 2, 'per_axis': 9}}])
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(raw), Path(directory))
        self.assertTrue(bundle.passed)
        self.assertEqual([c.passed for c in bundle.checks], [False, True])

    def test_config_errors_abort_the_run(self):
        raw = beta_config(boundary={'kind': 'affine_plane', 'n': 3, 'd': 1}, checks=[{'name': 'ar_regularity'}])
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(ConfigError):
                run_experiment(parse_config(raw), Path(directory))

    def test_missing_config_file(self):
        with self.assertRaises(ConfigError):
            run('/nonexistent/experiment.json')

    def test_determinism_check(self):
        raw = beta_config(checks=[
            {'name': 'beta_carleson', 'mandatory': False, 'params': {'levels': 2, 'per_axis': 9}},
            {'name': 'determinism'}])
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(raw), Path(directory))
        record = bundle.checks[1]
        self.assertTrue(record.passed)
        self.assertEqual(record.value, 0.0)
        self.assertEqual(record.details['files'], 2)

    @override_settings(DEGENLAB_MAX_NODES=5)
    def test_settings_cap_budgets(self):
        raw = beta_config(grid={'half_width': [1.0, 1.0, 1.0], 'h_max': 0.5, 'h_min': 0.25},
                          boundary={'kind': 'affine_plane', 'n': 3, 'd': 1},
                          checks=[{'name': 'max_principle', 'params': {'cases': 1}}])
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(BudgetExceededError) as context:
                run_experiment(parse_config(raw), Path(directory))
        self.assertEqual(context.exception.exit_code, 3)


class SweepTests(SimpleTestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)
        self.config_path = self.root / 'beta.json'
        self.config_path.write_text(json.dumps(beta_config()), encoding='utf-8')

    def tearDown(self):
        self.directory.cleanup()

    def test_sweep_table(self):
        result = sweep(str(self.config_path), 'checks.0.params.levels', [1, 2], self.root / 'out', workers=2)
        self.assertEqual(len(result.bundles), 2)
        self.assertEqual(result.exit_code, 0)
        lines = Path(result.table).read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'parameter,value,check,measured,tolerance,passed')
        self.assertEqual(len(lines), 3)
        self.assertTrue((self.root / 'out' / 'checks.0.params.levels=1' / 'report.json').exists())

    def test_sweep_needs_values(self):
        with self.assertRaises(ConfigError):
            sweep(str(self.config_path), 'parameters.levels', [])

    def test_sweep_unknown_parameter(self):
        with self.assertRaises(ConfigError):
            sweep(str(self.config_path), 'parameters.epsilon', [0.1])


class OracleAgreementTests(SimpleTestCase):
    def test_h_max_follows_h_min(self):
        grid = GridConfig(half_width=[1.0, 1.0, 1.0], h_max=0.25, h_min=1 / 32)
        self.assertEqual(oracle_resolutions(grid), [(1 / 16, 0.5), (1 / 32, 0.25)])
        self.assertEqual(oracle_resolutions(grid, [0.125, 1 / 16]), [(0.125, 1.0), (1 / 16, 0.5)])

    def test_explicit_h_max_values(self):
        grid = GridConfig(half_width=[1.0, 1.0, 1.0], h_max=0.25, h_min=1 / 32)
        self.assertEqual(oracle_resolutions(grid, [1 / 16, 1 / 32], [0.5, 0.125]), [(1 / 16, 0.5), (1 / 32, 0.125)])
        with self.assertRaises(ConfigError):
            oracle_resolutions(grid, [1 / 16, 1 / 32], [0.5])
        with self.assertRaises(ConfigError):
            oracle_resolutions(grid, [1 / 16], [1 / 32])

    def test_error_drops_when_the_whole_grid_is_refined(self):
        raw = beta_config(
            boundary={'kind': 'affine_plane', 'n': 3, 'd': 1},
            grid={'half_width': [0.75, 1.0, 1.0], 'h_max': 0.125, 'h_min': 1 / 32, 'grading_ratio': 1.5,
                  'band_factor': 0.5},
            budget={'max_nodes': 100000, 'max_quadrature_nodes': 10000},
            checks=[{'name': 'oracle_agreement', 'mandatory': False,
                     'params': {'cases': 3, 'h_min_values': [1 / 16, 1 / 32], 'eval_min_delta': 0.25}}])
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(raw), Path(directory))
            header = (Path(directory) / '00_oracle_agreement_errors.csv').read_text(encoding='utf-8').splitlines()[0]
        details = bundle.checks[0].details
        self.assertEqual(header, 'case,data,h_min,h_max,error')
        self.assertEqual(details['h_max'], [0.25, 0.125])
        self.assertGreaterEqual(details['error_ratio'], 1.5)
        self.assertLess(bundle.checks[0].value, 0.05)


class ComparabilityDriftTests(SimpleTestCase):
    def comparability_config(self, **extra):
        return beta_config(
            boundary={'kind': 'affine_plane', 'n': 4, 'd': 1},
            quadrature={'level': 5, 'window': {'lower': [-4.0], 'upper': [4.0]}},
            operator={'kind': 'l_alpha', 'alpha': 1.0},
            budget={'max_nodes': 100000, 'max_quadrature_nodes': 100000},
            checks=[{'name': 'measure_comparability', 'mandatory': False,
                     'params': {'pole': [0.0, 1.0, 0.0, 0.0], 'sets': 4, 'reach': 1.5}}],
            **extra)

    def test_flat_run_reports_sigma_drift_only(self):
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(self.comparability_config()), Path(directory))
        details = bundle.checks[0].details
        self.assertGreaterEqual(details['sigma_drift'], 1.0)
        self.assertNotIn('omega_drift', details)

    def test_grid_block_adds_solved_omega_drift(self):
        raw = self.comparability_config(
            grid={'half_width': [1.5, 1.5, 1.5, 1.5], 'h_max': 0.5, 'h_min': 0.25, 'band_factor': 0.5})
        with tempfile.TemporaryDirectory() as directory:
            bundle = run_experiment(parse_config(raw), Path(directory))
        details = bundle.checks[0].details
        self.assertEqual(bundle.checks[0].message, '')
        self.assertGreaterEqual(details['omega_drift'], 1.0)
        self.assertEqual(sorted(k for k in details['constants'] if k.startswith('solver')),
                         ['solver_h0.25', 'solver_h0.5'])
