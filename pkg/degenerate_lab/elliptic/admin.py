from django.contrib import admin

from elliptic.models import CheckResult
from elliptic.models import ExperimentRun


class CheckResultInline(admin.TabularInline):
    model = CheckResult
    extra = 0
    fields = ('position', 'name', 'status', 'value', 'tolerance', 'mandatory', 'wall_clock')
    readonly_fields = fields


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('experiment_id', 'anchor', 'passed', 'exit_code', 'seed', 'created_at')
    list_filter = ('passed', 'experiment_id')
    search_fields = ('experiment_id', 'description', 'anchor', 'config_hash')
    inlines = [CheckResultInline]


@admin.register(CheckResult)
class CheckResultAdmin(admin.ModelAdmin):
    list_display = ('run', 'name', 'status', 'value', 'tolerance')
    list_filter = ('status', 'name')
