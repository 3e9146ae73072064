from django.urls import path
from . import views

app_name = 'streaming_lidar_segmentation'

urlpatterns = [
    path('', views.results_history, name='history'),
    path('benchmarks/<int:pk>/', views.benchmark_detail, name='benchmark_detail'),
    path('evaluations/<int:pk>/', views.evaluation_detail, name='evaluation_detail'),
    path('scenes/', views.scene_catalogue, name='scenes'),
    path('api/clear-history/', views.clear_history, name='clear_history'),
]
