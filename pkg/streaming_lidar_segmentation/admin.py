from django.contrib import admin
from .models import BenchmarkRun, EvaluationRun


@admin.register(BenchmarkRun)
class BenchmarkRunAdmin(admin.ModelAdmin):
    list_display = ['input_location_short', 'input_kind', 'repetitions', 'scans', 'buffer_p99_us',
                    'scan_total_mean_us', 'deterministic', 'created_at']
    list_filter = ['input_kind', 'deterministic', 'created_at']
    search_fields = ['input_location']
    readonly_fields = ['created_at', 'meets_realtime_budget']

    fieldsets = (
        ('Input', {
            'fields': ('input_kind', 'input_location', 'repetitions', 'params')
        }),
        ('Latency (us)', {
            'fields': ('buffers', 'scans', 'buffer_mean_us', 'buffer_p99_us', 'scan_ground_mean_us',
                       'scan_cluster_mean_us', 'scan_total_mean_us', 'completion_lag_p99_us',
                       'meets_realtime_budget', 'deterministic')
        }),
        ('Details', {
            'fields': ('summary', 'created_at'),
            'classes': ('collapse',)
        })
    )

    def input_location_short(self, obj):
        return obj.input_location[:50] + ('...' if len(obj.input_location) > 50 else '')
    input_location_short.short_description = 'Input'


@admin.register(EvaluationRun)
class EvaluationRunAdmin(admin.ModelAdmin):
    list_display = ['corpus_short', 'scenes', 'precision', 'recall', 'osr', 'usr', 'passed', 'created_at']
    list_filter = ['passed', 'created_at']
    search_fields = ['corpus']
    readonly_fields = ['created_at']

    fieldsets = (
        ('Corpus', {
            'fields': ('corpus', 'scenes', 'params', 'overlap_threshold', 'range_gate')
        }),
        ('Metrics', {
            'fields': ('precision', 'recall', 'tpr', 'fnr', 'osr', 'usr')
        }),
        ('Gates', {
            'fields': ('gates', 'failures', 'passed')
        }),
        ('Details', {
            'fields': ('table', 'created_at'),
            'classes': ('collapse',)
        })
    )

    def corpus_short(self, obj):
        return obj.corpus[:40] + ('...' if len(obj.corpus) > 40 else '')
    corpus_short.short_description = 'Corpus'
