from django.core.management.base import BaseCommand, CommandError

from testbed.exceptions import TestbedError
from testbed.services.calibration import DEFAULT_GRID, calibrate
from testbed.services.config import load_config


class Command(BaseCommand):
    help = 'Search the lateral drift so Experiment A lands in the reference error band'

    def add_arguments(self, parser):
        parser.add_argument('--config', dest='config_path', help='Base KEY=value config')
        parser.add_argument('--seeds', type=int, default=3, help='Number of seeds per grid point')
        parser.add_argument('--grid', help='Comma-separated SLIP_LAT values')
        parser.add_argument('--out', help='Write the calibrated config here')

    def handle(self, *args, **options):
        try:
            base = load_config(options['config_path'], experiment='A')
            grid = DEFAULT_GRID
            if options['grid']:
                grid = tuple(float(v) for v in options['grid'].split(','))
            seeds = range(1, options['seeds'] + 1)
            self.stdout.write(f'Calibrating over {len(grid)} values x {len(seeds)} seeds...')
            result = calibrate(base, seeds, grid)
        except ValueError as e:
            raise CommandError(str(e))
        except TestbedError as e:
            raise CommandError(f'{type(e).__name__}: {e}')

        for slip_lat, error in result.table:
            self.stdout.write(f'  SLIP_LAT={slip_lat:.3f}  max_error={error:.1f} px')
        self.stdout.write(f'Chosen SLIP_LAT={result.slip_lat:.3f} ({result.mean_max_error:.1f} px)')

        if options['out']:
            try:
                with open(options['out'], 'w') as handle:
                    handle.write(result.config.to_env())
            except OSError as e:
                raise CommandError(f'Cannot write {options["out"]}: {e}')
            self.stdout.write(self.style.SUCCESS(f'Wrote calibrated config to {options["out"]}'))
