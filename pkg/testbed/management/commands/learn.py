import math

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from testbed.exceptions import TestbedError, RankDeficient
from testbed.services.bus import MessageBus, Topics, read_log
from testbed.services.harness import save_model
from testbed.services.learning import (
    LearningServer, ModelParams, TrainConfig, fit_least_squares, sgd_epoch,
)


class Command(BaseCommand):
    help = 'Fit the residual model offline from a persisted bus log'

    def add_arguments(self, parser):
        parser.add_argument('--log', required=True, help='Bus log written by run')
        parser.add_argument('--out', required=True, help='Snapshot JSON to write')
        parser.add_argument('--epochs', type=int, default=500, help='SGD epochs when least squares is not possible')
        parser.add_argument('--robot', type=int, default=1)

    def handle(self, *args, **options):
        try:
            rows = read_log(options['log'])
            bus = MessageBus(capacity=max(len(rows), 1))
            for _, topic, frame in rows:
                if topic in (Topics.PLANT_STATE, Topics.PLANT_COMMAND):
                    bus.publish(topic, frame)
            learner = LearningServer(bus, TrainConfig(replay_capacity=max(len(rows), 1)), robot_id=options['robot'])
            learner.ingest()
            buffer = learner.buffer
            if not len(buffer):
                raise CommandError('Log holds no plant.state/plant.command transitions')
            self.stdout.write(f'{len(buffer)} transitions from {options["log"]}')

            try:
                model = fit_least_squares(buffer)
                self.stdout.write(f'Least-squares fit: MSE {model.train_loss:.3f} (mm/s)^2')
            except RankDeficient as e:
                self.stdout.write(self.style.WARNING(f'{e}; falling back to SGD'))
                rng = np.random.Generator(np.random.PCG64(0))
                model = ModelParams()
                for _ in range(options['epochs']):
                    model = sgd_epoch(model, buffer, learner.config, rng)
                self.stdout.write(f'SGD fit: MSE {model.train_loss:.3f} (mm/s)^2')

            model = model.with_changes(version=1, converged=math.isfinite(model.train_loss))
            path = save_model(model, options['out'])
        except TestbedError as e:
            raise CommandError(f'{type(e).__name__}: {e}')
        self.stdout.write(self.style.SUCCESS(f'Wrote snapshot to {path}'))
