import math

import numpy as np
from django.test import SimpleTestCase

from testbed.exceptions import ModelUnavailable, PlanExhausted
from testbed.services.control import (
    EstimateHistory, EstimatedState, MotionLimits, PidGains, PidState, RobotController,
    VelocityEstimator, WaypointPlan, advance_waypoint, allocate_dynamic, fuse_estimate,
    motor_pid, nonholonomic_velocity, setpoint_velocity, twin_correct, waypoint_setpoint,
)
from testbed.services.core import ChassisGeometry, ChassisKind, PixelPose, Pose2D, Twist2D, WheelSpeeds
from testbed.services.kinematics import inverse_kinematics, world_to_body
from testbed.services.learning import FEATURE_DIM, ModelParams
from testbed.services.plant import CameraObservation, PlantParams, PlantSimulator, SensorFrame


def slip_model(slip=0.2, converged=True):
    """Residual model of a plant that reaches (1 - slip) of every command"""
    weights = np.zeros((3, FEATURE_DIM))
    weights[0, 3] = weights[1, 4] = weights[2, 5] = -slip
    return ModelParams(weights=weights, converged=converged, version=1)


def still_sensors(t=8, gyro=0.0, mag_theta=0.0):
    return SensorFrame((0.0, 0.0, 9806.65), gyro, mag_theta, WheelSpeeds(), t)


class WaypointTests(SimpleTestCase):

    def test_setpoint_moves_a_fraction_toward_the_target(self):
        plan = WaypointPlan(((100.0, 50.0),))
        self.assertEqual(waypoint_setpoint((0.0, 0.0), plan), (20.0, 10.0))

    def test_advance_uses_the_infinity_norm(self):
        plan = WaypointPlan(((100.0, 100.0), (200.0, 100.0)))
        self.assertEqual(advance_waypoint((75.0, 75.0), plan).index, 1)
        self.assertEqual(advance_waypoint((69.0, 100.0), plan).index, 0)

    def test_exhausted_plan(self):
        plan = WaypointPlan(((0.0, 0.0),), index=1)
        self.assertTrue(plan.complete)
        self.assertIs(advance_waypoint((0.0, 0.0), plan), plan)
        with self.assertRaises(PlanExhausted):
            plan.target

    def test_validation(self):
        with self.assertRaises(ValueError):
            WaypointPlan(((0.0, 0.0),), epsilon_p=0.0)
        with self.assertRaises(ValueError):
            WaypointPlan(((0.0, 0.0),), threshold=0.0)


class SetpointVelocityTests(SimpleTestCase):

    def test_reaches_the_setpoint_over_the_horizon(self):
        velocity = setpoint_velocity((0.0, 0.0), (20.0, 0.0), EstimatedState(),
                                     Twist2D(100.0, 0.0, 0.0), MotionLimits())
        self.assertAlmostEqual(velocity.vx, 100.0)
        self.assertEqual(velocity.vy, 0.0)

    def test_speed_is_saturated(self):
        velocity = setpoint_velocity((0.0, 0.0), (200.0, 200.0), EstimatedState(),
                                     Twist2D(), MotionLimits(accel_limit=0.0))
        self.assertAlmostEqual(velocity.speed, 300.0)

    def test_slew_limit(self):
        velocity = setpoint_velocity((0.0, 0.0), (20.0, 0.0), EstimatedState(), Twist2D(), MotionLimits())
        self.assertAlmostEqual(velocity.vx, 32.0)

    def test_heading_hold(self):
        velocity = setpoint_velocity((0.0, 0.0), (0.0, 0.0), EstimatedState(theta=0.1),
                                     Twist2D(), MotionLimits())
        self.assertAlmostEqual(velocity.omega, -0.2)

    def test_allocation_goes_through_the_estimated_heading(self):
        wheels = allocate_dynamic(Twist2D(0.0, 100.0, 0.0), EstimatedState(theta=math.pi / 2), ChassisGeometry())
        np.testing.assert_allclose(wheels.r, [2.0, 2.0, 2.0, 2.0], atol=1e-12)


class PidTests(SimpleTestCase):

    def test_first_step_has_no_derivative_kick(self):
        output, state = motor_pid(10.0, 0.0, PidGains(kp=0.5, ki=0.0, kd=1.0, output_limit=100.0))
        self.assertAlmostEqual(output, 5.0)
        self.assertEqual(state.prev_error, 10.0)

    def test_integral_and_output_are_clamped(self):
        gains = PidGains(kp=0.0, ki=1.0, integral_limit=0.5, output_limit=0.3)
        state = PidState()
        for _ in range(1000):
            output, state = motor_pid(100.0, 0.0, gains, state)
        self.assertEqual(state.integral, 0.5)
        self.assertEqual(output, 0.3)

    def test_drive_loop_settles_on_a_lagged_motor(self):
        gains = PidGains()
        decay = math.exp(-8.0 / 40.0)
        setpoint, speed, state = 10.0, 0.0, PidState()
        for _ in range(50):
            trim, state = motor_pid(setpoint, speed, gains, state)
            drive = max(-20.0, min(20.0, setpoint + trim))
            speed = decay * speed + (1.0 - decay) * drive
        self.assertLess(abs(speed - setpoint), 0.02 * setpoint)

    def test_negative_gains(self):
        with self.assertRaises(ValueError):
            PidGains(kp=-1.0)


class FusionTests(SimpleTestCase):

    def test_dead_reckons_from_encoders(self):
        sensors = SensorFrame((0.0, 0.0, 0.0), 0.0, 0.0, WheelSpeeds((2.0, 2.0, 2.0, 2.0)), 8)
        estimate = fuse_estimate(EstimatedState(), sensors, None, 8)
        self.assertAlmostEqual(estimate.x, 0.8)
        self.assertAlmostEqual(estimate.vx, 100.0)
        self.assertEqual(estimate.t, 8)

    def test_camera_pulls_the_estimate(self):
        camera = CameraObservation(1, PixelPose(10, 0, 0.0), 8)
        estimate = fuse_estimate(EstimatedState(), still_sensors(), camera, 8)
        self.assertAlmostEqual(estimate.x, 12.5)

    def test_delayed_sample_is_compared_at_its_capture_time(self):
        history = EstimateHistory()
        history.record(EstimatedState(t=8))
        prev = EstimatedState(x=50.0, t=16)
        history.record(prev)
        camera = CameraObservation(1, PixelPose(10, 0, 0.0), 8)
        estimate = fuse_estimate(prev, still_sensors(t=24), camera, 8, history=history)
        self.assertAlmostEqual(estimate.x, 62.5)

    def test_heading_blends_gyro_and_magnetometer(self):
        estimate = fuse_estimate(EstimatedState(), still_sensors(mag_theta=0.5), None, 8)
        self.assertAlmostEqual(estimate.theta, 0.01)

    def test_camera_fusion_beats_dead_reckoning(self):
        simulator = PlantSimulator(PlantParams(), initial_pose=Pose2D(1000.0, 1000.0, 0.0), seed=4)
        wheels = inverse_kinematics(Twist2D(200.0, 0.0, 0.3), simulator.geometry)
        fused = dead_reckoned = EstimatedState(x=1000.0, y=1000.0)
        fused_sq = reckoned_sq = 0.0
        for _ in range(1000):
            simulator.step(wheels)
            sensors = simulator.sense()
            fused = fuse_estimate(fused, sensors, simulator.observe(), 8)
            dead_reckoned = fuse_estimate(dead_reckoned, sensors, None, 8)
            truth = simulator.state.pose
            fused_sq += (fused.x - truth.x) ** 2 + (fused.y - truth.y) ** 2
            reckoned_sq += (dead_reckoned.x - truth.x) ** 2 + (dead_reckoned.y - truth.y) ** 2
        self.assertLess(math.sqrt(fused_sq / 1000), math.sqrt(reckoned_sq / 1000))

    def test_history_lookup(self):
        history = EstimateHistory()
        for t in (8, 16, 24):
            history.record(EstimatedState(x=float(t), t=t))
        self.assertEqual(history.at(20).x, 16.0)
        self.assertIsNone(history.at(4))

    def test_camera_velocity(self):
        estimator = VelocityEstimator()
        self.assertIsNone(estimator.update(CameraObservation(1, PixelPose(0, 0), 8)))
        vx, vy = estimator.update(CameraObservation(1, PixelPose(2, -2), 16))
        self.assertAlmostEqual(vx, 625.0)
        self.assertAlmostEqual(vy, -625.0)


class TwinCorrectTests(SimpleTestCase):

    def test_requires_a_converged_model(self):
        with self.assertRaises(ModelUnavailable):
            twin_correct(Twist2D(100.0, 0.0, 0.0), EstimatedState(), None)
        with self.assertRaises(ModelUnavailable):
            twin_correct(Twist2D(100.0, 0.0, 0.0), EstimatedState(), slip_model(converged=False))

    def test_compensates_slip(self):
        corrected = twin_correct(Twist2D(200.0, 100.0, 0.5), EstimatedState(), slip_model())
        self.assertAlmostEqual(corrected.vx, 250.0, delta=250.0 * 1e-6)
        self.assertAlmostEqual(corrected.vy, 125.0, delta=125.0 * 1e-6)
        self.assertAlmostEqual(corrected.omega, 0.625, delta=0.625 * 1e-6)

    def test_works_in_the_body_frame(self):
        corrected = twin_correct(Twist2D(0.0, 200.0, 0.0), EstimatedState(theta=math.pi / 2), slip_model())
        self.assertAlmostEqual(corrected.vx, 0.0, delta=1e-3)
        self.assertAlmostEqual(corrected.vy, 250.0, delta=250.0 * 1e-6)

    def test_exact_model_leaves_the_command_alone(self):
        nominal = Twist2D(120.0, -40.0, 0.1)
        self.assertEqual(twin_correct(nominal, EstimatedState(), ModelParams(converged=True)), nominal)

    def test_never_worse_than_nominal(self):
        rng = np.random.Generator(np.random.PCG64(2))
        model = ModelParams.initial(hidden_units=5, seed=1).with_changes(
            weights=rng.normal(0.0, 0.3, (3, FEATURE_DIM)),
            hidden_out=rng.normal(0.0, 1.0, (3, 5)),
            converged=True,
        )
        est = EstimatedState(theta=0.3)
        for _ in range(20):
            nominal = Twist2D(*rng.uniform(-300.0, 300.0, 2), rng.uniform(-1.0, 1.0))
            desired = world_to_body(nominal, est.theta)
            corrected = world_to_body(twin_correct(nominal, est, model), est.theta)

            def error(u):
                predicted = u + model.predict_residual(desired, u)
                return ((predicted.vx - desired.vx) ** 2 + (predicted.vy - desired.vy) ** 2
                        + (1000.0 * (predicted.omega - desired.omega)) ** 2)

            self.assertLessEqual(error(corrected), error(desired) * (1 + 1e-9) + 1e-9)


class NonholonomicTests(SimpleTestCase):

    def test_differential_turns_toward_a_sideways_target(self):
        velocity = nonholonomic_velocity(Twist2D(0.0, 100.0, 0.0), EstimatedState(),
                                         ChassisGeometry(kind=ChassisKind.DIFF2), 2.0)
        self.assertAlmostEqual(velocity.vx, 0.0)
        self.assertAlmostEqual(velocity.omega, math.pi)

    def test_steered_chassis_cannot_turn_standing_still(self):
        velocity = nonholonomic_velocity(Twist2D(0.0, 100.0, 0.0), EstimatedState(),
                                         ChassisGeometry(kind=ChassisKind.FWD), 2.0)
        self.assertEqual(velocity, Twist2D())

    def test_steering_curvature_is_limited(self):
        geometry = ChassisGeometry(kind=ChassisKind.RWD)
        velocity = nonholonomic_velocity(Twist2D(100.0, 100.0, 0.0), EstimatedState(), geometry, 2.0)
        self.assertAlmostEqual(velocity.omega, 100.0 * math.tan(geometry.max_steering) / geometry.wheelbase)


class RobotControllerTests(SimpleTestCase):

    def _controller(self, **kwargs):
        plan = WaypointPlan(((500.0, 500.0), (600.0, 500.0)))
        return RobotController(plan, initial=EstimatedState.from_pose(Pose2D(1250.0, 1250.0, 0.0)), **kwargs)

    def test_heads_for_the_next_waypoint(self):
        controller = self._controller()
        wheels, twist = controller.step()
        self.assertEqual(controller.plan.index, 1)
        self.assertGreater(twist.vx, 0.0)
        self.assertAlmostEqual(twist.vy, 0.0, places=9)
        self.assertEqual(controller.setpoint_px, (520.0, 500.0))

    def test_completed_plan_stops(self):
        controller = self._controller()
        controller.plan = WaypointPlan(controller.plan.targets, index=2)
        wheels, twist = controller.step()
        self.assertEqual(wheels, WheelSpeeds())
        self.assertEqual(twist, Twist2D())

    def test_correction_falls_back_without_a_model(self):
        controller = self._controller(correct=True)
        nominal, final = controller.velocity_command()
        self.assertEqual(nominal, final)
        self.assertEqual(controller.corrections, 0)

    def test_correction_with_a_model(self):
        controller = self._controller(correct=True)
        controller.model = slip_model()
        nominal, final = controller.velocity_command()
        self.assertAlmostEqual(final.vx, nominal.vx / 0.8, delta=1e-3)
        self.assertEqual(controller.corrections, 1)

    def test_pid_records_command_layers(self):
        controller = self._controller(pid_gains=PidGains())
        controller.step(WheelSpeeds())
        self.assertEqual(len(controller.layers.q_m), 4)
        self.assertEqual(controller.layers.q_c, controller.layers.q_d)

    def test_two_wheel_chassis_layers(self):
        plan = WaypointPlan(((500.0, 500.0), (600.0, 500.0)))
        controller = RobotController(plan, ChassisGeometry(kind=ChassisKind.DIFF2), pid_gains=PidGains(),
                                     initial=EstimatedState.from_pose(Pose2D(1250.0, 1250.0, 0.0)))
        controller.step(WheelSpeeds())
        self.assertEqual(len(controller.layers.q_d), 2)
