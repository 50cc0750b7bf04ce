"""
Django admin configuration for testbed runs
"""
from django.contrib import admin
from .models import ExperimentRun, ModelSnapshotRecord


class ModelSnapshotInline(admin.TabularInline):
    model = ModelSnapshotRecord
    extra = 0
    fields = ['version', 'train_loss', 'converged', 'checksum']
    readonly_fields = fields


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['id', 'experiment', 'seed', 'max_error_px', 'mean_error_px', 'waypoints_reached', 'improvement_ratio', 'created_at']
    list_filter = ['experiment', 'chassis', 'created_at']
    search_fields = ['output_dir', 'log_path']
    readonly_fields = ['created_at']
    inlines = [ModelSnapshotInline]


@admin.register(ModelSnapshotRecord)
class ModelSnapshotRecordAdmin(admin.ModelAdmin):
    list_display = ['run', 'version', 'train_loss', 'converged', 'checksum', 'created_at']
    list_filter = ['converged']
    readonly_fields = ['created_at']
