import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment_id', models.CharField(db_index=True, max_length=200)),
                ('description', models.TextField(blank=True)),
                ('anchor', models.CharField(blank=True, help_text='Estimate the experiment reproduces', max_length=255)),
                ('config_hash', models.CharField(help_text='sha256 of the canonical config', max_length=64)),
                ('seed', models.BigIntegerField()),
                ('passed', models.BooleanField(default=False)),
                ('exit_code', models.IntegerField(default=0)),
                ('output_dir', models.CharField(max_length=500)),
                ('environment', models.JSONField(default=dict, help_text='Interpreter and library versions')),
                ('report', models.JSONField(default=dict, help_text='Full content of report.json')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Experiment run',
                'verbose_name_plural': 'Experiment runs',
            },
        ),
        migrations.CreateModel(
            name='CheckResult',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('position', models.IntegerField(help_text='Index of the check in the config')),
                ('name', models.CharField(max_length=100)),
                ('status', models.CharField(choices=[('passed', 'passed'), ('failed', 'failed'), ('error', 'error')],
                                            max_length=20)),
                ('value', models.FloatField(blank=True, null=True)),
                ('tolerance', models.FloatField(blank=True, null=True)),
                ('mandatory', models.BooleanField(default=True)),
                ('wall_clock', models.FloatField(help_text='Seconds')),
                ('message', models.TextField(blank=True)),
                ('details', models.JSONField(default=dict)),
                ('files', models.JSONField(default=list, help_text='CSV files written by the check')),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='checks',
                                          to='elliptic.experimentrun')),
            ],
            options={
                'verbose_name': 'Check result',
                'verbose_name_plural': 'Check results',
                'ordering': ['position'],
            },
        ),
    ]
