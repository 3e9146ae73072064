from django.apps import AppConfig


class StreamingLidarSegmentationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'streaming_lidar_segmentation'
    verbose_name = 'Streaming LiDAR segmentation'
