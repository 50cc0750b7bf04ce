import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment', models.CharField(choices=[('A', 'A: physical control only'), ('B', 'B: online learning, twin follows snapshots'), ('C', 'C: twin-corrected control')], max_length=1)),
                ('seed', models.IntegerField()),
                ('chassis', models.CharField(default='omni4', max_length=20)),
                ('tick_count', models.IntegerField(default=0)),
                ('max_error_px', models.FloatField(default=0.0)),
                ('mean_error_px', models.FloatField(default=0.0)),
                ('waypoints_reached', models.IntegerField(default=0)),
                ('total_waypoints', models.IntegerField(default=0)),
                ('repeat_max_errors_px', models.JSONField(default=list)),
                ('improvement_ratio', models.FloatField(blank=True, null=True)),
                ('output_dir', models.CharField(blank=True, default='', max_length=500)),
                ('log_path', models.CharField(blank=True, default='', max_length=500)),
                ('report_path', models.CharField(blank=True, default='', max_length=500)),
                ('config_text', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at', '-id'],
            },
        ),
        migrations.CreateModel(
            name='ModelSnapshotRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('version', models.IntegerField()),
                ('train_loss', models.FloatField(blank=True, null=True)),
                ('converged', models.BooleanField(default=False)),
                ('velocity_scale', models.FloatField(default=1000.0)),
                ('coefficients', models.JSONField(default=dict)),
                ('checksum', models.IntegerField(default=0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='snapshots', to='testbed.experimentrun')),
            ],
            options={
                'ordering': ['run', 'version'],
                'unique_together': {('run', 'version')},
            },
        ),
    ]
