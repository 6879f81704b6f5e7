"""
URL configuration for the dinolab project: admin plus the read-only run API.
"""
from django.contrib import admin
from django.urls import path

from core.views.run_views import run_detail, run_list, run_metrics

urlpatterns = [
    path('admin/', admin.site.urls),

    # Run records
    path('api/runs/', run_list, name='run_list'),
    path('api/runs/<int:id>/', run_detail, name='run_detail'),
    path('api/runs/<int:id>/metrics/', run_metrics, name='run_metrics'),
]
