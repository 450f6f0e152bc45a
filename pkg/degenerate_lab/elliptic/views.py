import logging

from rest_framework import mixins, status, viewsets
from rest_framework.decorators import action
from rest_framework.exceptions import NotFound, ValidationError
from rest_framework.response import Response

from drf_spectacular.utils import OpenApiParameter, OpenApiTypes, extend_schema

from traceback_with_variables import format_exc

from elliptic.exceptions import ConfigError
from elliptic.experiments import list_experiments
from elliptic.experiments import run as run_experiment_config
from elliptic.filters import CheckResultFilter
from elliptic.filters import ExperimentRunFilter
from elliptic.models import ExperimentRun
from elliptic.serializers import CatalogEntrySerializer
from elliptic.serializers import CheckResultSerializer
from elliptic.serializers import ExperimentRunSerializer
from elliptic.serializers import RunRequestSerializer

logger = logging.getLogger(__name__)


class LoggingViewSetMixin(object):
    """
        Centralizes exception logging for every ViewSet of the app.
    """

    def handle_exception(self, exc):
        logger.error(format_exc(exc))
        return super().handle_exception(exc)


class ExperimentRunViewSet(LoggingViewSetMixin, mixins.DestroyModelMixin, viewsets.ReadOnlyModelViewSet):
    queryset = ExperimentRun.objects.all().order_by('-created_at')
    serializer_class = ExperimentRunSerializer
    filterset_class = ExperimentRunFilter
    http_method_names = ['get', 'delete']

    @extend_schema(
        parameters=[
            OpenApiParameter(
                name='status',
                location=OpenApiParameter.QUERY,
                required=False,
                type=OpenApiTypes.STR,
                description='Only checks with this outcome: passed, failed or error.',
            ),
            OpenApiParameter(
                name='name',
                location=OpenApiParameter.QUERY,
                required=False,
                type=OpenApiTypes.STR,
                description='Only checks registered under this name.',
            ),
        ],
        responses=CheckResultSerializer(many=True),
    )
    @action(detail=True, methods=['get'], url_path='checks')
    def checks(self, request, pk=None):
        experiment_run = self.get_object()
        filterset = CheckResultFilter(data=request.query_params, queryset=experiment_run.checks.all())

        if not filterset.is_valid():
            raise ValidationError(filterset.errors)

        queryset = filterset.qs

        page = self.paginate_queryset(queryset)
        serializer = CheckResultSerializer(page if page is not None else queryset, many=True)

        if page is not None:
            return self.get_paginated_response(serializer.data)

        return Response(serializer.data, status=status.HTTP_200_OK)


class ExperimentCatalogViewSet(LoggingViewSetMixin, viewsets.ViewSet):
    """
        Experiment configs shipped in DEGENLAB_EXPERIMENTS_DIR; POST run executes one and stores the report.
    """
    serializer_class = CatalogEntrySerializer
    lookup_value_regex = '[^/]+'

    @extend_schema(responses=CatalogEntrySerializer(many=True))
    def list(self, request):
        entries = [entry.model_dump() for entry in list_experiments()]
        return Response(CatalogEntrySerializer(entries, many=True).data, status=status.HTTP_200_OK)

    @extend_schema(responses=CatalogEntrySerializer)
    def retrieve(self, request, pk=None):
        for entry in list_experiments():
            if entry.id == pk:
                return Response(CatalogEntrySerializer(entry.model_dump()).data, status=status.HTTP_200_OK)
        raise NotFound(f'No experiment {pk!r} in the catalog')

    @extend_schema(request=RunRequestSerializer, responses=ExperimentRunSerializer)
    @action(detail=True, methods=['post'], url_path='run')
    def run(self, request, pk=None):
        serializer = RunRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)

        entry = next((e for e in list_experiments() if e.id == pk), None)
        if entry is None:
            raise NotFound(f'No experiment {pk!r} in the catalog')

        try:
            bundle = run_experiment_config(entry.path, workers=serializer.validated_data.get('workers'))
        except ConfigError as e:
            logger.error(format_exc(e))
            return Response({'error': str(e)}, status=status.HTTP_400_BAD_REQUEST)

        experiment_run = ExperimentRun.from_bundle(bundle)
        return Response(ExperimentRunSerializer(experiment_run).data, status=status.HTTP_201_CREATED)
