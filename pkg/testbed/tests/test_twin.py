import numpy as np
from django.test import SimpleTestCase

from testbed.exceptions import StaleObservation
from testbed.services.bus import MessageBus, Topics
from testbed.services.control import RobotController, WaypointPlan
from testbed.services.core import ChassisGeometry, PixelPose, Pose2D, Twist2D, WheelSpeeds
from testbed.services.kinematics import inverse_kinematics, world_to_body
from testbed.services.learning import (
    FEATURE_DIM, LearningServer, ModelParams, ReplayBuffer, Transition, fit_least_squares,
)
from testbed.services.plant import (
    CameraObservation, PlantParams, PlantSimulator, PlantState, make_rng, plant_step,
)
from testbed.services.twin import TwinState, VirtualRobot, state_values, twin_rollout, twin_step, twin_sync


def bias_model(vx_bias_mm_s, version=1):
    weights = np.zeros((3, FEATURE_DIM))
    weights[0, FEATURE_DIM - 1] = vx_bias_mm_s / 1000.0
    return ModelParams(weights=weights, version=version, converged=True)


class TwinStepTests(SimpleTestCase):

    def test_zero_residual_matches_the_lag_free_ideal_plant(self):
        params = PlantParams.ideal(motor_tau=1e-6)
        rng = make_rng(0)
        commands = [inverse_kinematics(Twist2D(150.0, -60.0, 0.4), ChassisGeometry())] * 30
        commands += [inverse_kinematics(Twist2D(-80.0, 20.0, -0.7), ChassisGeometry())] * 30
        plant, twin = PlantState(), TwinState()
        for wheels in commands:
            plant = plant_step(plant, wheels, params, 8, rng)
            twin = twin_step(twin, wheels, None, 8)
            self.assertAlmostEqual(twin.pose.x, plant.pose.x, places=9)
            self.assertAlmostEqual(twin.pose.y, plant.pose.y, places=9)
            self.assertAlmostEqual(twin.pose.theta, plant.pose.theta, places=12)
        self.assertEqual(twin.t, plant.t)

    def test_constant_command_is_a_straight_line(self):
        trajectory = twin_rollout(TwinState(), [Twist2D(100.0, 50.0, 0.0)] * 125, None)
        self.assertEqual(len(trajectory), 126)
        final = trajectory[-1].pose
        self.assertAlmostEqual(final.x, 100.0, places=9)
        self.assertAlmostEqual(final.y, 50.0, places=9)
        self.assertEqual(trajectory[-1].t, 1000)

    def test_residual_is_added_to_the_command(self):
        state = twin_step(TwinState(), Twist2D(100.0, 0.0, 0.0), bias_model(10.0, version=3), 8)
        self.assertAlmostEqual(state.twist.vx, 110.0)
        self.assertEqual(state.model_version, 3)

    def test_rollout_is_deterministic(self):
        commands = [Twist2D(100.0, 0.0, 0.3)] * 20 + [Twist2D(0.0, 80.0, -0.2)] * 20
        a = twin_rollout(TwinState(), commands, bias_model(5.0))
        b = twin_rollout(TwinState(), commands, bias_model(5.0))
        self.assertEqual(a, b)

    def test_bad_arguments(self):
        with self.assertRaises(ValueError):
            twin_rollout(TwinState(), [], None)
        with self.assertRaises(ValueError):
            twin_step(TwinState(), Twist2D(), None, 0)


class TwinSyncTests(SimpleTestCase):

    def test_resets_pose_and_keeps_twist(self):
        state = TwinState(Pose2D(0.0, 0.0, 0.0), Twist2D(10.0, 0.0, 0.0), 16, 2)
        synced = twin_sync(state, CameraObservation(1, PixelPose(100, 200, 0.5), 24))
        self.assertEqual(synced.pose, Pose2D(250.0, 500.0, 0.5))
        self.assertEqual(synced.twist, state.twist)
        self.assertEqual((synced.t, synced.model_version), (24, 2))

    def test_rejects_stale_observations(self):
        with self.assertRaises(StaleObservation):
            twin_sync(TwinState(t=16), CameraObservation(1, PixelPose(0, 0), 8))

    def test_state_payload(self):
        values = state_values(Pose2D(250.0, 500.0, np.pi / 2), Twist2D(1.0, 2.0, np.pi))
        np.testing.assert_allclose(values, (100.0, 200.0, 90.0, 1.0, 2.0, 180.0))


class RolloutAccuracyTests(SimpleTestCase):
    """A least-squares model of the noisy default plant tracks it without drifting apart"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.simulator = PlantSimulator(PlantParams(), seed=4)
        rng = np.random.Generator(np.random.PCG64(4))
        buffer = ReplayBuffer()
        before = Twist2D()
        command = Twist2D()
        for k in range(3000):
            if k % 25 == 0:
                command = Twist2D(*rng.uniform(-200.0, 200.0, 2), rng.uniform(-0.5, 0.5))
            heading = cls.simulator.state.pose.theta
            cls.simulator.step(inverse_kinematics(command, cls.simulator.geometry))
            after = world_to_body(cls.simulator.state.twist, heading)
            buffer.add(Transition(before, command, after))
            before = after
        cls.model = fit_least_squares(buffer)
        cls.rng = rng

    def test_error_grows_sub_linearly_with_horizon(self):
        horizons = (1, 10, 50)
        totals = dict.fromkeys(horizons, 0.0)
        trials = 20
        for _ in range(trials):
            command = Twist2D(*self.rng.uniform(-200.0, 200.0, 2), self.rng.uniform(-0.5, 0.5))
            wheels = inverse_kinematics(command, self.simulator.geometry)
            plant = self.simulator.state
            twin = TwinState(plant.pose, plant.twist, plant.t)
            for step in range(1, max(horizons) + 1):
                plant = self.simulator.step(wheels)
                twin = twin_step(twin, command, self.model, 8)
                if step in totals:
                    totals[step] += np.hypot(plant.pose.x - twin.pose.x, plant.pose.y - twin.pose.y)
        per_tick = [totals[h] / trials / h for h in horizons]
        self.assertLess(per_tick[1], per_tick[0])
        self.assertLess(per_tick[2], per_tick[1])


class VirtualRobotTests(SimpleTestCase):

    def _robot(self, bus, **kwargs):
        start = Pose2D(1250.0, 1250.0, 0.0)
        controller = RobotController(WaypointPlan(((500.0, 500.0), (600.0, 500.0))))
        return VirtualRobot(bus, controller, initial_pose=start, **kwargs)

    def test_commands_arrive_after_the_link_latency(self):
        bus = MessageBus(capacity=64)
        robot = self._robot(bus)
        for now in (8, 16, 24, 32):
            state = robot.step(now)
            self.assertEqual((state.pose.x, state.pose.y), (1250.0, 1250.0))
        state = robot.step(40)
        self.assertGreater(state.pose.x, 1250.0)
        frames, _ = bus.consume_all(Topics.TWIN_STATE)
        self.assertEqual([f.timestamp for f in frames], [8, 16, 24, 32, 40])

    def test_follows_published_snapshots(self):
        bus = MessageBus(capacity=64)
        robot = self._robot(bus)
        LearningServer(bus).publish_snapshot(bias_model(2.0, version=0).with_changes(train_loss=1.0))
        robot.refresh_model()
        self.assertEqual(robot.model.version, 1)
        self.assertIs(robot.controller.model, robot.model)

    def test_fixed_model_ignores_snapshots(self):
        bus = MessageBus(capacity=64)
        fixed = bias_model(1.0, version=9)
        robot = self._robot(bus, model=fixed, follow_snapshots=False)
        LearningServer(bus).publish_snapshot(bias_model(2.0).with_changes(train_loss=1.0))
        robot.refresh_model()
        self.assertIs(robot.model, fixed)

    def test_sync_moves_the_controller_estimate(self):
        robot = self._robot(MessageBus(capacity=64))
        robot.sync(CameraObservation(1, PixelPose(510, 500, 0.0), 8))
        self.assertEqual(robot.controller.estimate.position_px, (510.0, 500.0))

    def test_wheel_commands_are_accepted(self):
        state = twin_step(TwinState(), WheelSpeeds((2.0, 2.0, 2.0, 2.0)), None, 8)
        self.assertAlmostEqual(state.twist.vx, 100.0)
