from django.db import models

from elliptic.enums import RunStatus


class ExperimentRun(models.Model):
    experiment_id: models.CharField = models.CharField(max_length=200, db_index=True)
    description: models.TextField = models.TextField(blank=True)
    anchor: models.CharField = models.CharField(max_length=255, blank=True,
                                                help_text='Estimate the experiment reproduces')
    config_hash: models.CharField = models.CharField(max_length=64, help_text='sha256 of the canonical config')
    seed: models.BigIntegerField = models.BigIntegerField()
    passed: models.BooleanField = models.BooleanField(default=False)
    exit_code: models.IntegerField = models.IntegerField(default=0)
    output_dir: models.CharField = models.CharField(max_length=500)
    environment: models.JSONField = models.JSONField(default=dict, help_text='Interpreter and library versions')
    report: models.JSONField = models.JSONField(default=dict, help_text='Full content of report.json')
    created_at: models.DateTimeField = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f'{self.experiment_id} ({"pass" if self.passed else "fail"})'

    @classmethod
    def from_bundle(cls, bundle) -> 'ExperimentRun':
        """
            Persist a ReportBundle with one CheckResult per check
        """
        run = cls.objects.create(
            experiment_id=bundle.experiment_id,
            description=bundle.description,
            anchor=bundle.anchor,
            config_hash=bundle.config_hash,
            seed=bundle.seed,
            passed=bundle.passed,
            exit_code=bundle.exit_code,
            output_dir=bundle.output_dir,
            environment=bundle.environment,
            report=bundle.model_dump(mode='json'),
        )
        CheckResult.objects.bulk_create([
            CheckResult(
                run=run,
                position=position,
                name=record.name,
                status=RunStatus.ERROR if record.message else (RunStatus.PASSED if record.passed else RunStatus.FAILED),
                value=record.value,
                tolerance=record.tolerance,
                mandatory=record.mandatory,
                wall_clock=record.wall_clock,
                message=record.message,
                details=record.details,
                files=record.files,
            )
            for position, record in enumerate(bundle.checks)
        ])
        return run

    class Meta:
        verbose_name = 'Experiment run'
        verbose_name_plural = 'Experiment runs'


class CheckResult(models.Model):
    run: models.ForeignKey = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='checks')
    position: models.IntegerField = models.IntegerField(help_text='Index of the check in the config')
    name: models.CharField = models.CharField(max_length=100)
    status: models.CharField = models.CharField(max_length=20, choices=RunStatus.choices())
    value: models.FloatField = models.FloatField(blank=True, null=True)
    tolerance: models.FloatField = models.FloatField(blank=True, null=True)
    mandatory: models.BooleanField = models.BooleanField(default=True)
    wall_clock: models.FloatField = models.FloatField(help_text='Seconds')
    message: models.TextField = models.TextField(blank=True)
    details: models.JSONField = models.JSONField(default=dict)
    files: models.JSONField = models.JSONField(default=list, help_text='CSV files written by the check')

    def __str__(self):
        return f'{self.name}: {self.status}'

    class Meta:
        ordering = ['position']
        verbose_name = 'Check result'
        verbose_name_plural = 'Check results'
