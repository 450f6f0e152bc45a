from rest_framework import serializers

from elliptic.models import CheckResult
from elliptic.models import ExperimentRun


class CheckResultSerializer(serializers.ModelSerializer):
    class Meta:
        model = CheckResult
        fields = (
            'id',
            'position',
            'name',
            'status',
            'value',
            'tolerance',
            'mandatory',
            'wall_clock',
            'message',
            'details',
            'files',
        )
        read_only_fields = fields


class ExperimentRunSerializer(serializers.ModelSerializer):
    check_count = serializers.SerializerMethodField()

    class Meta:
        model = ExperimentRun
        fields = (
            'id',
            'experiment_id',
            'description',
            'anchor',
            'config_hash',
            'seed',
            'passed',
            'exit_code',
            'output_dir',
            'environment',
            'check_count',
            'created_at',
        )
        read_only_fields = fields

    def get_check_count(self, obj: ExperimentRun) -> int:
        return obj.checks.count()


class CatalogEntrySerializer(serializers.Serializer):
    id = serializers.CharField()
    description = serializers.CharField(allow_blank=True)
    anchor = serializers.CharField(allow_blank=True)
    path = serializers.CharField()
    checks = serializers.ListField(child=serializers.CharField())


class RunRequestSerializer(serializers.Serializer):
    workers = serializers.IntegerField(required=False, min_value=1,
                                       help_text='Worker cap for this run; settings.DEGENLAB_WORKERS by default')
