"""
URL configuration for the testbed API
"""
from django.urls import path
from . import views

urlpatterns = [
    path('health/', views.health_check, name='health_check'),
    path('runs/', views.list_runs, name='list_runs'),
    path('runs/<int:run_id>/', views.run_detail, name='run_detail'),
    path('snapshots/<int:snapshot_id>/', views.snapshot_detail, name='snapshot_detail'),
]
