from django.db import models

from .pipeline import REALTIME_BUFFER_BUDGET_US


class BenchmarkRun(models.Model):
    """Latency statistics of one `bench` invocation"""

    INPUTS = [
        ('pcap', 'pcap capture'),
        ('raw', 'Raw packet records'),
        ('scene', 'Simulated scene'),
    ]

    input_kind = models.CharField(max_length=10, choices=INPUTS)
    input_location = models.TextField()
    params = models.JSONField(default=dict, help_text="Segmentation parameters used")
    repetitions = models.IntegerField(default=1)

    buffers = models.IntegerField(default=0, help_text="Buffers processed over all repetitions")
    scans = models.IntegerField(default=0)

    # microseconds of CPU time
    buffer_mean_us = models.FloatField(null=True, blank=True)
    buffer_p99_us = models.FloatField(null=True, blank=True)
    scan_ground_mean_us = models.FloatField(null=True, blank=True)
    scan_cluster_mean_us = models.FloatField(null=True, blank=True)
    scan_total_mean_us = models.FloatField(null=True, blank=True)
    completion_lag_p99_us = models.FloatField(null=True, blank=True)
    deterministic = models.BooleanField(default=True)

    summary = models.JSONField(default=list, help_text="mean/p50/p99/max rows per measured quantity")

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"Benchmark {self.input_location[:50]} x{self.repetitions}"

    @property
    def meets_realtime_budget(self):
        if self.buffer_p99_us is None:
            return None
        return self.buffer_p99_us < REALTIME_BUFFER_BUDGET_US

    @classmethod
    def from_report(cls, report, config):
        """Unsaved row for a LatencyReport produced under a RunConfig"""
        scans = report.scans
        summary = report.summary()

        def mean(column):
            return None if scans.empty else float(scans[column].mean())

        return cls(
            input_kind=config.input_kind,
            input_location=config.input_location,
            params=config.params.to_dict(),
            repetitions=report.repetitions,
            buffers=len(report.buffers),
            scans=len(scans),
            buffer_mean_us=None if report.is_empty else float(report.buffers['total_cpu_us'].mean()),
            buffer_p99_us=report.buffer_p99(),
            scan_ground_mean_us=mean('ground_cpu_us'),
            scan_cluster_mean_us=mean('cluster_cpu_us'),
            scan_total_mean_us=mean('total_cpu_us'),
            completion_lag_p99_us=None if scans.empty else float(scans['completion_lag_us'].quantile(0.99)),
            deterministic=report.deterministic,
            summary=summary.to_dict('records'),
        )


class EvaluationRun(models.Model):
    """Accuracy metrics of one `eval` invocation over a scene corpus"""

    corpus = models.TextField(help_text="Scene files or directories evaluated")
    scenes = models.IntegerField(default=0)
    params = models.JSONField(default=dict)
    overlap_threshold = models.FloatField(default=0.5)
    range_gate = models.FloatField(null=True, blank=True)

    # None when the corpus holds no truth object
    precision = models.FloatField(null=True, blank=True)
    recall = models.FloatField(null=True, blank=True)
    tpr = models.FloatField(null=True, blank=True)
    fnr = models.FloatField(null=True, blank=True)
    osr = models.FloatField(null=True, blank=True)
    usr = models.FloatField(null=True, blank=True)

    table = models.JSONField(default=list, help_text="Per-scene outcome and metric rows")
    gates = models.JSONField(default=dict)
    failures = models.JSONField(default=list)
    passed = models.BooleanField(default=True)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"Evaluation of {self.scenes} scenes - {'passed' if self.passed else 'failed'}"

    @classmethod
    def from_report(cls, report, corpus, params, gates, rows):
        failures = report.check_gates(gates)
        return cls(
            corpus=corpus,
            scenes=len(report.scans),
            params=params.to_dict(),
            overlap_threshold=report.overlap_threshold,
            range_gate=report.range_gate,
            table=rows,
            gates=gates,
            failures=failures,
            passed=not failures,
            **report.metrics.as_dict(),
        )
