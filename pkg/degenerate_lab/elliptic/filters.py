import django_filters

from elliptic.enums import RunStatus
from elliptic.models import CheckResult
from elliptic.models import ExperimentRun


class ExperimentRunFilter(django_filters.FilterSet):
    experiment = django_filters.CharFilter(field_name='experiment_id', lookup_expr='exact')
    passed = django_filters.BooleanFilter(field_name='passed')

    class Meta:
        model = ExperimentRun
        fields = ['experiment', 'passed']


class CheckResultFilter(django_filters.FilterSet):
    status = django_filters.ChoiceFilter(field_name='status', choices=RunStatus.choices())
    name = django_filters.CharFilter(field_name='name', lookup_expr='exact')

    class Meta:
        model = CheckResult
        fields = ['status', 'name']
