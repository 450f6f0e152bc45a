"""
WSGI entry point of the degenerate_lab project.

Only the read-only experiment API is served; numerical runs go through the
management commands.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'degenerate_lab.settings')

application = get_wsgi_application()
