from rest_framework.routers import DefaultRouter

from elliptic.views import ExperimentCatalogViewSet
from elliptic.views import ExperimentRunViewSet

router = DefaultRouter()
router.register(r'runs', ExperimentRunViewSet, basename='runs')
router.register(r'experiments', ExperimentCatalogViewSet, basename='experiments')

urlpatterns = router.urls
