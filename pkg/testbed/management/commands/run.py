from django.core.management.base import BaseCommand, CommandError

from testbed.exceptions import TestbedError
from testbed.models import store_report
from testbed.services.config import load_config
from testbed.services.harness import default_output_dir, run_experiment


class Command(BaseCommand):
    help = 'Run Experiment A, B or C in the simulated testbed'

    def add_arguments(self, parser):
        parser.add_argument('--experiment', choices=['A', 'B', 'C'], type=str.upper)
        parser.add_argument('--config', dest='config_path', help='KEY=value experiment config file')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--out', help='Output directory for the bus log, model and report')
        parser.add_argument('--repeats', type=int, help='Corrected passes for Experiment C')
        mode = parser.add_mutually_exclusive_group()
        mode.add_argument('--lockstep', dest='lockstep', action='store_true', default=None)
        mode.add_argument('--free-run', dest='lockstep', action='store_false')
        parser.add_argument('--no-store', action='store_true', help='Do not record the run in the database')

    def handle(self, *args, **options):
        try:
            config = load_config(
                options['config_path'],
                experiment=options['experiment'],
                seed=options['seed'],
                lockstep=options['lockstep'],
                repeats=options['repeats'],
            )
            out_dir = options['out'] or default_output_dir(config)
            self.stdout.write(f'Running experiment {config.experiment} (seed {config.seed}) into {out_dir}...')
            report = run_experiment(config, out_dir)
        except TestbedError as e:
            raise CommandError(f'{type(e).__name__}: {e}')

        summary = report.summary()
        self.stdout.write(
            f"ticks={summary['ticks']} max_error={summary['max_error_px']} px "
            f"mean_error={summary['mean_error_px']} px "
            f"waypoints={summary['waypoints_reached']}/{summary['total_waypoints']}"
        )
        for i, error in enumerate(summary['repeat_max_errors_px'], 2):
            self.stdout.write(f'repeat {i}: max_error={error} px')

        if not options['no_store']:
            run = store_report(report, config.to_env(), config.chassis.value)
            if run.improvement_ratio is not None:
                self.stdout.write(f'improvement over A (seed {run.seed}): {run.improvement_ratio:.2f}x')
            self.stdout.write(self.style.SUCCESS(f'Stored run {run.id}; outputs in {out_dir}'))
        else:
            self.stdout.write(self.style.SUCCESS(f'Outputs in {out_dir}'))
