"""
Robot-side control: state estimation, the waypoint P-controller, dynamic
allocation to wheels, per-motor PID, and the twin-feedback command corrector.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    MM_PER_PX, TICK_MS, ChassisGeometry, PixelPose, Pose2D, Timestamp, Twist2D,
    WheelSpeeds, wrap_angle,
)
from .kinematics import body_to_world, forward_kinematics, inverse_kinematics, world_to_body
from .plant import CameraObservation, SensorFrame
from ..exceptions import ModelUnavailable, PlanExhausted

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatedState:
    x: float = 0.0          # mm
    y: float = 0.0
    vx: float = 0.0         # mm/s, world frame
    vy: float = 0.0
    theta: float = 0.0      # rad
    omega: float = 0.0      # rad/s
    t: Timestamp = 0

    def __post_init__(self):
        object.__setattr__(self, 'theta', wrap_angle(self.theta))

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.theta)

    @property
    def twist(self) -> Twist2D:
        return Twist2D(self.vx, self.vy, self.omega)

    @property
    def position_px(self) -> Tuple[float, float]:
        return (self.x / MM_PER_PX, self.y / MM_PER_PX)

    @classmethod
    def from_pose(cls, pose: Pose2D, twist: Twist2D = Twist2D(), t: Timestamp = 0) -> 'EstimatedState':
        return cls(pose.x, pose.y, twist.vx, twist.vy, pose.theta, twist.omega, t)


@dataclass(frozen=True)
class CommandLayers:
    """
    q_c: wheel speeds implied by the nominal setpoint velocity (fusion layer)
    q_d: wheel setpoints actually allocated (dynamic layer)
    q_m: measured wheel speeds fed back to the motor PID
    """
    q_c: Tuple[float, ...]
    q_d: Tuple[float, ...]
    q_m: Tuple[float, ...]

    @classmethod
    def for_motors(cls, motor_count: int, q_c: WheelSpeeds, q_d: WheelSpeeds,
                   q_m: WheelSpeeds) -> 'CommandLayers':
        return cls(q_c.r[:motor_count], q_d.r[:motor_count], q_m.r[:motor_count])


@dataclass(frozen=True)
class WaypointPlan:
    targets: Tuple[Tuple[float, float], ...]
    threshold: float = 30.0      # px, infinity norm
    epsilon_p: float = 0.2
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'targets', tuple(tuple(map(float, t)) for t in self.targets))
        if not 0.0 < self.epsilon_p <= 1.0:
            raise ValueError("epsilon_p must lie in (0, 1]")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    @property
    def complete(self) -> bool:
        return self.index >= len(self.targets)

    @property
    def target(self) -> Tuple[float, float]:
        if self.complete:
            raise PlanExhausted(f"All {len(self.targets)} waypoints consumed")
        return self.targets[self.index]


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.5
    ki: float = 0.2
    kd: float = 0.0
    integral_limit: float = 5.0
    output_limit: float = 20.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: Optional[float] = None


@dataclass(frozen=True)
class FusionGains:
    camera_gain: float = 0.5         # alpha, position and heading correction per camera sample
    heading_blend: float = 0.98      # weight on gyro integration against the magnetic sensor
    velocity_gain: float = 0.02      # weight of camera-derived velocity against encoders


@dataclass(frozen=True)
class MotionLimits:
    setpoint_horizon_ms: float = 500.0
    max_speed: float = 300.0         # mm/s
    accel_limit: float = 4000.0      # mm/s^2, 0 disables slew limiting
    heading_gain: float = 2.0        # 1/s
    heading_ref: float = 0.0


class EstimateHistory:
    """Recent estimates by timestamp, for back-dating delayed camera samples"""

    def __init__(self, maxlen: int = 64):
        self._items: Deque[EstimatedState] = deque(maxlen=maxlen)

    def record(self, estimate: EstimatedState):
        self._items.append(estimate)

    def at(self, t: Timestamp) -> Optional[EstimatedState]:
        for estimate in reversed(self._items):
            if estimate.t <= t:
                return estimate
        return None


class VelocityEstimator:
    """World velocity from two adjacent camera samples and their interval"""

    def __init__(self):
        self._last: Optional[CameraObservation] = None

    def update(self, observation: CameraObservation) -> Optional[Tuple[float, float]]:
        last, self._last = self._last, observation
        if last is None or observation.t <= last.t:
            return None
        dt_s = (observation.t - last.t) / 1000.0
        return (
            (observation.pixel_pose.u - last.pixel_pose.u) * MM_PER_PX / dt_s,
            (observation.pixel_pose.v - last.pixel_pose.v) * MM_PER_PX / dt_s,
        )


def fuse_estimate(prev: EstimatedState, sensors: SensorFrame, camera: Optional[CameraObservation],
                  dt: int, geometry: ChassisGeometry = ChassisGeometry(),
                  gains: FusionGains = FusionGains(), history: Optional[EstimateHistory] = None,
                  camera_velocity: Optional[Tuple[float, float]] = None) -> EstimatedState:
    """
    Dead-reckon from encoders, blend gyro with the magnetic heading, then pull
    toward the camera sample. A delayed sample is compared against the
    estimate recorded at its capture time and the innovation is applied now.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dt_s = dt / 1000.0

    world = body_to_world(forward_kinematics(sensors.encoders, geometry), prev.theta)
    x = prev.x + world.vx * dt_s
    y = prev.y + world.vy * dt_s

    theta = prev.theta + sensors.gyro * dt_s
    theta = theta + (1.0 - gains.heading_blend) * wrap_angle(sensors.mag_theta - theta)

    vx, vy = world.vx, world.vy
    if camera_velocity is not None:
        vx += gains.velocity_gain * (camera_velocity[0] - vx)
        vy += gains.velocity_gain * (camera_velocity[1] - vy)

    if camera is not None:
        observed = camera.pixel_pose.to_pose()
        reference = history.at(camera.t) if history is not None else None
        ref_x, ref_y, ref_theta = (x, y, theta) if reference is None else (
            reference.x, reference.y, reference.theta)
        alpha = gains.camera_gain
        x += alpha * (observed.x - ref_x)
        y += alpha * (observed.y - ref_y)
        theta += alpha * wrap_angle(observed.theta - ref_theta)

    return EstimatedState(x, y, vx, vy, theta, sensors.gyro, sensors.t)


def waypoint_setpoint(x: Sequence[float], plan: WaypointPlan) -> Tuple[float, float]:
    """Next position setpoint x + eps*(target - x), per axis"""
    target = plan.target
    eps = plan.epsilon_p
    return (x[0] + eps * (target[0] - x[0]), x[1] + eps * (target[1] - x[1]))


def advance_waypoint(x: Sequence[float], plan: WaypointPlan) -> WaypointPlan:
    if plan.complete:
        return plan
    target = plan.target
    if max(abs(x[0] - target[0]), abs(x[1] - target[1])) <= plan.threshold:
        logger.info(f"Waypoint {plan.index} ({target[0]:.0f}, {target[1]:.0f}) reached")
        return replace(plan, index=plan.index + 1)
    return plan


def setpoint_velocity(position_px: Sequence[float], setpoint_px: Sequence[float],
                      est: EstimatedState, previous: Twist2D, limits: MotionLimits,
                      dt: int = TICK_MS) -> Twist2D:
    """World-frame velocity reaching the setpoint over the horizon, saturated and slew-limited"""
    horizon_s = limits.setpoint_horizon_ms / 1000.0
    vx = (setpoint_px[0] - position_px[0]) * MM_PER_PX / horizon_s
    vy = (setpoint_px[1] - position_px[1]) * MM_PER_PX / horizon_s

    speed = math.hypot(vx, vy)
    if speed > limits.max_speed:
        vx, vy = vx * limits.max_speed / speed, vy * limits.max_speed / speed

    max_change = limits.accel_limit * dt / 1000.0
    dvx, dvy = vx - previous.vx, vy - previous.vy
    change = math.hypot(dvx, dvy)
    if limits.accel_limit > 0 and change > max_change:
        vx = previous.vx + dvx * max_change / change
        vy = previous.vy + dvy * max_change / change

    omega = limits.heading_gain * wrap_angle(limits.heading_ref - est.theta)
    return Twist2D(vx, vy, omega)


def allocate_dynamic(velocity: Twist2D, est: EstimatedState, geometry: ChassisGeometry) -> WheelSpeeds:
    """World-frame velocity to wheel setpoints through the estimated heading"""
    return inverse_kinematics(world_to_body(velocity, est.theta), geometry)


def motor_pid(setpoint: float, measured: float, gains: PidGains,
              state: PidState = PidState(), dt: int = TICK_MS) -> Tuple[float, PidState]:
    """Discrete PID with a clamped integral; the output is saturated to the drive range"""
    dt_s = dt / 1000.0
    error = setpoint - measured
    integral = state.integral + error * dt_s
    integral = max(-gains.integral_limit, min(gains.integral_limit, integral))
    derivative = 0.0 if state.prev_error is None else (error - state.prev_error) / dt_s
    output = gains.kp * error + gains.ki * integral + gains.kd * derivative
    output = max(-gains.output_limit, min(gains.output_limit, output))
    return output, PidState(integral, error)


def _residual_error(predicted: Twist2D, desired: Twist2D, scale: float) -> float:
    return ((predicted.vx - desired.vx) ** 2 + (predicted.vy - desired.vy) ** 2
            + (scale * (predicted.omega - desired.omega)) ** 2)


def _command_jacobian(predict, u: Twist2D) -> np.ndarray:
    steps = (1e-3, 1e-3, 1e-6)
    base = np.array(u.as_tuple())
    jacobian = np.zeros((3, 3))
    for j, h in enumerate(steps):
        delta = np.zeros(3)
        delta[j] = h
        hi = np.array(predict(Twist2D(*(base + delta))).as_tuple())
        lo = np.array(predict(Twist2D(*(base - delta))).as_tuple())
        jacobian[:, j] = (hi - lo) / (2.0 * h)
    return jacobian


def twin_correct(nominal: Twist2D, est: EstimatedState, model, gamma: float = 0.5,
                 max_iterations: int = 20) -> Twist2D:
    """
    Invert the learned one-step model for the command that makes the robot
    settle at the nominal velocity.

    The prediction is evaluated at the desired twist (steady state), and the
    command is refined with damped Newton steps through the command Jacobian.
    Returns the nominal velocity when no iterate improves on it.
    """
    if model is None or not model.converged:
        raise ModelUnavailable("No converged model snapshot to invert")

    desired = world_to_body(nominal, est.theta)
    scale = model.velocity_scale

    def predict(u: Twist2D) -> Twist2D:
        return u + model.predict_residual(desired, u)

    nominal_error = _residual_error(predict(desired), desired, scale)
    best, best_error = desired, nominal_error
    u = desired
    # the linear family is affine in the command, so its Jacobian is constant
    jacobian = None if model.hidden else _command_jacobian(predict, u)
    for _ in range(max_iterations):
        gap = np.array((desired - predict(u)).as_tuple())
        try:
            step = np.linalg.solve(_command_jacobian(predict, u) if jacobian is None else jacobian, gap)
        except np.linalg.LinAlgError:
            break
        candidate = np.array(u.as_tuple()) + gamma * step
        if not np.all(np.isfinite(candidate)):
            break
        u = Twist2D(*candidate)
        error = _residual_error(predict(u), desired, scale)
        if error < best_error:
            best, best_error = u, error
        if error == 0.0:
            break

    if best_error >= nominal_error:
        if nominal_error > 0.0:
            logger.warning("Model inversion found no better command; using nominal")
        return nominal
    return body_to_world(best, est.theta)


def nonholonomic_velocity(velocity: Twist2D, est: EstimatedState, geometry: ChassisGeometry,
                          heading_gain: float) -> Twist2D:
    """
    Reshape a world velocity for chassis without lateral motion: drive along the
    heading and steer toward the requested direction.
    """
    body = world_to_body(velocity, est.theta)
    if velocity.speed == 0.0:
        return Twist2D()
    forward = body.vx
    omega = heading_gain * wrap_angle(math.atan2(velocity.vy, velocity.vx) - est.theta)
    if forward < 0:
        forward = 0.0
    if geometry.kind.has_steering:
        if forward == 0.0:
            omega = 0.0
        else:
            limit = forward * math.tan(geometry.max_steering) / geometry.wheelbase
            omega = max(-limit, min(limit, omega))
    return body_to_world(Twist2D(forward, 0.0, omega), est.theta)


class RobotController:
    """
    Per-robot controller: waypoint plan, velocity shaping, optional model
    correction and the wheel-level drive loop.
    """

    def __init__(self, plan: WaypointPlan, geometry: ChassisGeometry = ChassisGeometry(),
                 limits: MotionLimits = MotionLimits(), pid_gains: Optional[PidGains] = None,
                 fusion: FusionGains = FusionGains(), initial: EstimatedState = EstimatedState(),
                 correct: bool = False):
        self.plan = plan
        self.geometry = geometry
        self.limits = limits
        self.pid_gains = pid_gains
        self.fusion = fusion
        self.estimate = initial
        self.correct = correct
        self.model = None
        self.history = EstimateHistory()
        self.velocity_estimator = VelocityEstimator()
        self.pid_states: List[PidState] = [PidState()] * 4
        self.last_velocity = Twist2D()
        self.setpoint_px: Tuple[float, float] = initial.position_px
        self.layers: Optional[CommandLayers] = None
        self.corrections = 0
        self.history.record(initial)

    @property
    def complete(self) -> bool:
        return self.plan.complete

    def update_estimate(self, sensors: SensorFrame, camera: Optional[CameraObservation],
                        dt: int = TICK_MS) -> EstimatedState:
        camera_velocity = self.velocity_estimator.update(camera) if camera is not None else None
        self.estimate = fuse_estimate(self.estimate, sensors, camera, dt, self.geometry,
                                      self.fusion, self.history, camera_velocity)
        self.history.record(self.estimate)
        return self.estimate

    def set_estimate(self, estimate: EstimatedState):
        """Exact state feed, used by the virtual robot"""
        self.estimate = estimate
        self.history.record(estimate)

    def corrected_velocity(self, nominal: Twist2D) -> Twist2D:
        if not self.correct:
            return nominal
        try:
            velocity = twin_correct(nominal, self.estimate, self.model)
        except ModelUnavailable:
            return nominal
        self.corrections += 1
        return velocity

    def velocity_command(self, dt: int = TICK_MS) -> Tuple[Twist2D, Twist2D]:
        """(nominal, final) world velocities for this tick"""
        position = self.estimate.position_px
        self.plan = advance_waypoint(position, self.plan)
        if self.plan.complete:
            self.last_velocity = Twist2D()
            return Twist2D(), Twist2D()

        self.setpoint_px = waypoint_setpoint(position, self.plan)
        nominal = setpoint_velocity(position, self.setpoint_px, self.estimate,
                                    self.last_velocity, self.limits, dt)
        self.last_velocity = nominal
        if not self.geometry.kind.holonomic:
            nominal = nonholonomic_velocity(nominal, self.estimate, self.geometry,
                                            self.limits.heading_gain)
        velocity = self.corrected_velocity(nominal)
        if not self.geometry.kind.holonomic:
            body = world_to_body(velocity, self.estimate.theta)
            velocity = body_to_world(Twist2D(body.vx, 0.0, body.omega), self.estimate.theta)
        return nominal, velocity

    def drive(self, q_d: WheelSpeeds, measured: Optional[WheelSpeeds], dt: int = TICK_MS) -> WheelSpeeds:
        """Feed-forward wheel setpoints plus a PID trim on the measured speeds"""
        if self.pid_gains is None or measured is None:
            return q_d
        drive = []
        for i, (setpoint, speed) in enumerate(zip(q_d.r, measured.r)):
            trim, self.pid_states[i] = motor_pid(setpoint, speed, self.pid_gains, self.pid_states[i], dt)
            limit = self.pid_gains.output_limit
            drive.append(max(-limit, min(limit, setpoint + trim)))
        return WheelSpeeds(tuple(drive), q_d.steering)

    def step(self, measured: Optional[WheelSpeeds] = None, dt: int = TICK_MS) -> Tuple[WheelSpeeds, Twist2D]:
        """Wheel command and the body-frame twist it requests"""
        nominal, velocity = self.velocity_command(dt)
        q_c = allocate_dynamic(nominal, self.estimate, self.geometry)
        q_d = allocate_dynamic(velocity, self.estimate, self.geometry)
        if measured is not None:
            self.layers = CommandLayers.for_motors(self.geometry.kind.motor_count, q_c, q_d, measured)
        command = self.drive(q_d, measured, dt)
        return command, forward_kinematics(command, self.geometry)
