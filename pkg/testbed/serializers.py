"""
Serializers for stored testbed runs
"""
from rest_framework import serializers
from .models import ExperimentRun, ModelSnapshotRecord


class ModelSnapshotSerializer(serializers.ModelSerializer):
    """Full snapshot including coefficients"""

    class Meta:
        model = ModelSnapshotRecord
        fields = [
            'id', 'run', 'version', 'train_loss', 'converged', 'velocity_scale',
            'coefficients', 'checksum', 'created_at'
        ]


class ModelSnapshotSummarySerializer(serializers.ModelSerializer):

    class Meta:
        model = ModelSnapshotRecord
        fields = ['id', 'version', 'train_loss', 'converged', 'checksum']


class ExperimentRunSerializer(serializers.ModelSerializer):
    """Run summary for listings"""
    completed = serializers.ReadOnlyField()

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'experiment', 'seed', 'chassis', 'tick_count', 'max_error_px',
            'mean_error_px', 'waypoints_reached', 'total_waypoints', 'completed',
            'repeat_max_errors_px', 'improvement_ratio', 'created_at'
        ]


class ExperimentRunDetailSerializer(ExperimentRunSerializer):
    snapshots = ModelSnapshotSummarySerializer(many=True, read_only=True)

    class Meta(ExperimentRunSerializer.Meta):
        fields = ExperimentRunSerializer.Meta.fields + [
            'output_dir', 'log_path', 'report_path', 'config_text', 'snapshots'
        ]
