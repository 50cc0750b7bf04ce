"""
Stored experiment summaries and the model snapshots they used
"""
from django.db import models


class ExperimentRun(models.Model):
    """One experiment run launched from the command line"""
    EXPERIMENT_CHOICES = [
        ('A', 'A: physical control only'),
        ('B', 'B: online learning, twin follows snapshots'),
        ('C', 'C: twin-corrected control'),
    ]

    experiment = models.CharField(max_length=1, choices=EXPERIMENT_CHOICES)
    seed = models.IntegerField()
    chassis = models.CharField(max_length=20, default='omni4')
    tick_count = models.IntegerField(default=0)
    max_error_px = models.FloatField(default=0.0)
    mean_error_px = models.FloatField(default=0.0)
    waypoints_reached = models.IntegerField(default=0)
    total_waypoints = models.IntegerField(default=0)
    repeat_max_errors_px = models.JSONField(default=list)
    # max_error(A) / max_error(this run); only known when an A run with the same seed exists
    improvement_ratio = models.FloatField(null=True, blank=True)
    output_dir = models.CharField(max_length=500, blank=True, default='')
    log_path = models.CharField(max_length=500, blank=True, default='')
    report_path = models.CharField(max_length=500, blank=True, default='')
    config_text = models.TextField(blank=True, default='')
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', '-id']

    def __str__(self):
        return f"Experiment {self.experiment} seed={self.seed} ({self.max_error_px:.1f} px)"

    @property
    def completed(self):
        return self.total_waypoints > 0 and self.waypoints_reached >= self.total_waypoints

    def baseline(self):
        """Most recent Experiment A run with the same seed"""
        return (ExperimentRun.objects
                .filter(experiment='A', seed=self.seed)
                .exclude(pk=self.pk)
                .order_by('-created_at', '-id')
                .first())

    def update_improvement_ratio(self):
        baseline = self.baseline()
        if self.experiment == 'A' or baseline is None or self.max_error_px <= 0:
            return None
        self.improvement_ratio = baseline.max_error_px / self.max_error_px
        self.save(update_fields=['improvement_ratio'])
        return self.improvement_ratio


class ModelSnapshotRecord(models.Model):
    """A residual-model snapshot as published on the bus"""
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='snapshots')
    version = models.IntegerField()
    train_loss = models.FloatField(null=True, blank=True)
    converged = models.BooleanField(default=False)
    velocity_scale = models.FloatField(default=1000.0)
    coefficients = models.JSONField(default=dict)
    checksum = models.IntegerField(default=0)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run', 'version']
        unique_together = ['run', 'version']

    def __str__(self):
        state = 'converged' if self.converged else 'training'
        return f"Snapshot v{self.version} of run {self.run_id} ({state})"


def store_report(report, config_text: str = '', chassis: str = 'omni4') -> ExperimentRun:
    """Persist an ExperimentReport summary and every snapshot version it used"""
    run = ExperimentRun.objects.create(
        experiment=report.experiment,
        seed=report.seed,
        chassis=chassis,
        tick_count=report.tick_count,
        max_error_px=report.max_error,
        mean_error_px=report.mean_error,
        waypoints_reached=report.waypoints_reached,
        total_waypoints=report.total_waypoints,
        repeat_max_errors_px=[r.max_error for r in report.repeats],
        output_dir=report.outputs.get('dir', ''),
        log_path=report.outputs.get('log', ''),
        report_path=report.outputs.get('report', ''),
        config_text=config_text,
    )
    if report.model is not None:
        data = report.model.to_dict()
        ModelSnapshotRecord.objects.create(
            run=run,
            version=report.model.version,
            train_loss=data['train_loss'],
            converged=report.model.converged,
            velocity_scale=report.model.velocity_scale,
            coefficients={k: v for k, v in data.items() if k in ('weights', 'hidden_in', 'hidden_out')},
            checksum=data['checksum'],
        )
    run.update_improvement_ratio()
    return run
