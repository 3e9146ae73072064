# Generated by Django 4.2.7 on 2026-10-18 08:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='BenchmarkRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('input_kind', models.CharField(choices=[('pcap', 'pcap capture'), ('raw', 'Raw packet records'), ('scene', 'Simulated scene')], max_length=10)),
                ('input_location', models.TextField()),
                ('params', models.JSONField(default=dict, help_text='Segmentation parameters used')),
                ('repetitions', models.IntegerField(default=1)),
                ('buffers', models.IntegerField(default=0, help_text='Buffers processed over all repetitions')),
                ('scans', models.IntegerField(default=0)),
                ('buffer_mean_us', models.FloatField(blank=True, null=True)),
                ('buffer_p99_us', models.FloatField(blank=True, null=True)),
                ('scan_ground_mean_us', models.FloatField(blank=True, null=True)),
                ('scan_cluster_mean_us', models.FloatField(blank=True, null=True)),
                ('scan_total_mean_us', models.FloatField(blank=True, null=True)),
                ('completion_lag_p99_us', models.FloatField(blank=True, null=True)),
                ('deterministic', models.BooleanField(default=True)),
                ('summary', models.JSONField(default=list, help_text='mean/p50/p99/max rows per measured quantity')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EvaluationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('corpus', models.TextField(help_text='Scene files or directories evaluated')),
                ('scenes', models.IntegerField(default=0)),
                ('params', models.JSONField(default=dict)),
                ('overlap_threshold', models.FloatField(default=0.5)),
                ('range_gate', models.FloatField(blank=True, null=True)),
                ('precision', models.FloatField(blank=True, null=True)),
                ('recall', models.FloatField(blank=True, null=True)),
                ('tpr', models.FloatField(blank=True, null=True)),
                ('fnr', models.FloatField(blank=True, null=True)),
                ('osr', models.FloatField(blank=True, null=True)),
                ('usr', models.FloatField(blank=True, null=True)),
                ('table', models.JSONField(default=list, help_text='Per-scene outcome and metric rows')),
                ('gates', models.JSONField(default=dict)),
                ('failures', models.JSONField(default=list)),
                ('passed', models.BooleanField(default=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
