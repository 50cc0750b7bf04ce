import os
import tempfile
from unittest import mock

from django.test import SimpleTestCase

from testbed.exceptions import ConfigInvalid
from testbed.services.config import (
    DEFAULT_WAYPOINTS, ExperimentConfig, format_waypoints, load_config, parse_waypoints,
)
from testbed.services.core import ChassisKind


class WaypointFormatTests(SimpleTestCase):

    def test_parse(self):
        self.assertEqual(parse_waypoints('500:500, 500:900,'), ((500.0, 500.0), (500.0, 900.0)))

    def test_format(self):
        self.assertEqual(format_waypoints(DEFAULT_WAYPOINTS), '500:500,500:900,1300:900,500:900,500:500')

    def test_rejects_bad_pairs(self):
        with self.assertRaises(ValueError):
            parse_waypoints('500-500')


class LoadConfigTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text):
        path = os.path.join(self.tmp.name, 'experiment.env')
        with open(path, 'w') as handle:
            handle.write(text)
        return path

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config, ExperimentConfig())
        self.assertEqual(config.waypoints, DEFAULT_WAYPOINTS)
        self.assertEqual(config.tick_budget, 12000)
        self.assertEqual(config.plant.slip_lat, 0.35)

    def test_reads_a_key_value_file(self):
        path = self._write(
            "EXPERIMENT=c\nSEED=11\nWAYPOINTS=100:100,200:100\nSLIP_LAT=0.4\n"
            "CHASSIS=DIFF2\nLOCKSTEP=false\nLEARNING_RATE=0.1\nMAX_SPEED=250\n"
        )
        config = load_config(path)
        self.assertEqual(config.experiment, 'C')
        self.assertEqual(config.seed, 11)
        self.assertEqual(config.waypoints, ((100.0, 100.0), (200.0, 100.0)))
        self.assertEqual(config.plant.slip_lat, 0.4)
        self.assertEqual(config.chassis, ChassisKind.DIFF2)
        self.assertFalse(config.lockstep)
        self.assertEqual(config.train.learning_rate, 0.1)
        self.assertEqual(config.limits.max_speed, 250.0)
        self.assertEqual(config.plant.slip_long, ExperimentConfig().plant.slip_long)

    def test_keyword_overrides_win(self):
        path = self._write("EXPERIMENT=B\nSEED=11\n")
        config = load_config(path, experiment='A', seed=3, repeats=None)
        self.assertEqual((config.experiment, config.seed, config.repeats), ('A', 3, 1))

    def test_environment_wins_over_the_file(self):
        path = self._write("SEED=11\n")
        with mock.patch.dict(os.environ, {'SEED': '99'}):
            self.assertEqual(load_config(path).seed, 99)

    def test_written_config_reads_back(self):
        config = ExperimentConfig(experiment='B', seed=5, tick_budget=300, repeats=2, lockstep=False,
                                  model_path='/tmp/model.json')
        config = config.with_changes(plant=config.plant.with_changes(slip_lat=0.41))
        self.assertEqual(load_config(self._write(config.to_env())), config)

    def test_invalid_values(self):
        cases = (
            "EXPERIMENT=D\n", "SEED=abc\n", "CHASSIS=tank\n", "WAYPOINTS=1-2\n",
            "SLIP_LONG=1.5\n", "LOCKSTEP=maybe\n", "REPEATS=0\n", "EPSILON_P=0\n",
            "BATCH_SIZE=0\n",
        )
        for text in cases:
            with self.subTest(text=text.strip()):
                with self.assertRaises(ConfigInvalid):
                    load_config(self._write(text))

    def test_missing_file(self):
        with self.assertRaises(ConfigInvalid):
            load_config(os.path.join(self.tmp.name, 'absent.env'))


class ExperimentConfigTests(SimpleTestCase):

    def test_validation(self):
        with self.assertRaises(ConfigInvalid):
            ExperimentConfig(waypoints=())
        with self.assertRaises(ConfigInvalid):
            ExperimentConfig(tick_budget=0)

    def test_geometry_follows_chassis(self):
        self.assertEqual(ExperimentConfig(chassis=ChassisKind.WD4).geometry.kind, ChassisKind.WD4)
