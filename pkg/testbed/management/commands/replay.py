from collections import Counter

from django.core.management.base import BaseCommand, CommandError

from testbed.exceptions import TestbedError
from testbed.services.bus import SEQ_MODULUS, Topics, read_log


class Command(BaseCommand):
    help = 'Decode a persisted bus log, validate checksums and per-producer order'

    def add_arguments(self, parser):
        parser.add_argument('--log', required=True, help='Path to a bus log written by run')

    def handle(self, *args, **options):
        try:
            rows = read_log(options['log'])
        except TestbedError as e:
            raise CommandError(f'{type(e).__name__}: {e}')

        counts = Counter()
        last_seq = {}
        out_of_order = 0
        final_state = None
        for timestamp, topic, frame in rows:
            counts[topic] += 1
            key = (topic, frame.robot_id)
            expected = (last_seq.get(key, 0) + 1) % SEQ_MODULUS
            if key in last_seq and frame.seq != expected:
                out_of_order += 1
            last_seq[key] = frame.seq
            if topic == Topics.PLANT_STATE:
                final_state = (timestamp, frame.values)

        self.stdout.write(f"{len(rows)} frames in {options['log']}")
        for topic in sorted(counts):
            self.stdout.write(f'  {topic}: {counts[topic]}')
        if final_state is not None:
            t, (x, y, theta, *_) = final_state
            self.stdout.write(f'final plant pose at {t} ms: ({x:.1f}, {y:.1f}) px, {theta:.1f} deg')

        if out_of_order:
            raise CommandError(f'{out_of_order} frames break per-producer sequence order')
        self.stdout.write(self.style.SUCCESS('All checksums and sequence numbers valid'))
