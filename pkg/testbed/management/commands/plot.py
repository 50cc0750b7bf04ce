import os

from django.core.management.base import BaseCommand, CommandError

from testbed.exceptions import TestbedError
from testbed.services.harness import emit_report, read_report_json


class Command(BaseCommand):
    help = 'Convert a stored report.json to CSV or gnuplot data'

    def add_arguments(self, parser):
        parser.add_argument('--report', required=True, help='report.json written by run')
        parser.add_argument('--format', choices=['csv', 'plotdata'], default='csv')
        parser.add_argument('--out', help='Destination file (default: next to the report)')

    def handle(self, *args, **options):
        fmt = options['format']
        suffix = '.csv' if fmt == 'csv' else '.dat'
        out = options['out'] or os.path.splitext(options['report'])[0] + suffix
        try:
            report = read_report_json(options['report'])
            path = emit_report(report, out, fmt)
        except TestbedError as e:
            raise CommandError(f'{type(e).__name__}: {e}')
        self.stdout.write(self.style.SUCCESS(f'Wrote {report.tick_count} rows to {path}'))
