"""
ASGI entry point of the degenerate_lab project.
"""

import os

from django.core.asgi import get_asgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'degenerate_lab.settings')

application = get_asgi_application()
