"""
The simulated physical testbed.

Ground-truth robot dynamics with actuator lag and saturation, longitudinal
slip, lateral drift, viscous and Coulomb friction, stiction and process noise;
onboard sensor emulation (IMU, magnetic sensor, encoders); overhead camera
detections at the 8 ms camera tick; and FIFO latency queues for the wireless
command path and the localization path.

All noise comes from a numpy Generator backed by PCG64, seeded per run, so a
(seed, params, command stream) triple always replays bit-identically.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Deque, List, Optional, Tuple

import numpy as np
from django.conf import settings

from .core import (
    GRAVITY_MM_S2, MM_PER_PX, TICK_MS,
    ChassisGeometry, PixelPose, Pose2D, Timestamp, Twist2D, WheelSpeeds,
)
from .kinematics import body_to_world, forward_kinematics
from ..exceptions import NonFiniteState

logger = logging.getLogger(__name__)


def make_rng(seed: int, stream: str = '') -> np.random.Generator:
    """PCG64 generator; `stream` derives an independent sub-stream from the same seed"""
    entropy = [int(seed) & 0xFFFFFFFF] + [ord(ch) for ch in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class PlantParams:
    """
    Hidden plant parameters.

    Defaults are the calibrated values that put Experiment A's maximum
    trajectory error in the 91-120 px band (see services.calibration).
    """
    motor_gain: float = 1.0
    motor_tau: float = 40.0             # ms
    wheel_speed_max: float = 20.0       # rad/s
    slip_long: float = 0.15
    slip_lat: float = 0.35              # mm/s of lateral drift per mm/s of vx
    coulomb_friction: float = 20.0      # mm/s^2
    viscous_friction: float = 0.5       # 1/s
    process_noise_sigma: float = 2.0    # mm/s
    stiction_speed: float = 5.0         # mm/s
    accel_noise_sigma: float = 50.0     # mm/s^2
    gyro_noise_sigma: float = 0.01      # rad/s
    mag_noise_sigma: float = 0.01       # rad
    encoder_noise_sigma: float = 0.05   # rad/s
    pixel_noise_sigma: float = 0.5      # px
    camera_theta_sigma: float = 0.005   # rad

    def __post_init__(self):
        if self.motor_tau <= 0:
            raise ValueError("motor_tau must be positive")
        if not 0.0 <= self.slip_long < 1.0:
            raise ValueError("slip_long must lie in [0, 1)")
        sigmas = (
            self.process_noise_sigma, self.accel_noise_sigma, self.gyro_noise_sigma,
            self.mag_noise_sigma, self.encoder_noise_sigma, self.pixel_noise_sigma,
            self.camera_theta_sigma,
        )
        if any(s < 0 for s in sigmas):
            raise ValueError("noise sigmas must be non-negative")
        if self.wheel_speed_max <= 0:
            raise ValueError("wheel_speed_max must be positive")

    @classmethod
    def ideal(cls, **overrides) -> 'PlantParams':
        """Disturbance-free, noise-free plant"""
        quiet = dict(
            slip_long=0.0, slip_lat=0.0, coulomb_friction=0.0, viscous_friction=0.0,
            process_noise_sigma=0.0, stiction_speed=0.0, accel_noise_sigma=0.0,
            gyro_noise_sigma=0.0, mag_noise_sigma=0.0, encoder_noise_sigma=0.0,
            pixel_noise_sigma=0.0, camera_theta_sigma=0.0,
        )
        quiet.update(overrides)
        return cls(**quiet)

    def with_changes(self, **changes) -> 'PlantParams':
        return replace(self, **changes)


@dataclass(frozen=True)
class PlantState:
    pose: Pose2D = field(default_factory=Pose2D)
    twist: Twist2D = field(default_factory=Twist2D)   # world frame
    wheel_actual: WheelSpeeds = field(default_factory=WheelSpeeds)
    t: Timestamp = 0


@dataclass(frozen=True)
class SensorFrame:
    accel: Tuple[float, float, float]   # mm/s^2
    gyro: float                         # rad/s
    mag_theta: float                    # rad
    encoders: WheelSpeeds
    t: Timestamp


@dataclass(frozen=True)
class CameraObservation:
    robot_id: int
    pixel_pose: PixelPose
    t: Timestamp


def _noise(rng: np.random.Generator, sigma: float) -> float:
    return float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0


def _coulomb(v: float, drop: float) -> float:
    if v > drop:
        return v - drop
    if v < -drop:
        return v + drop
    return 0.0


def plant_step(state: PlantState, wheel_cmd: WheelSpeeds, params: PlantParams, dt: int,
               rng: np.random.Generator, geometry: ChassisGeometry = ChassisGeometry()) -> PlantState:
    """Advance the ground-truth robot by dt milliseconds"""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not wheel_cmd.is_finite():
        raise NonFiniteState(f"Non-finite wheel command: {wheel_cmd}")
    dt_s = dt / 1000.0

    # actuator lag toward the saturated target
    target = WheelSpeeds(
        tuple(params.motor_gain * r for r in wheel_cmd.r), wheel_cmd.steering
    ).clamped(params.wheel_speed_max)
    decay = math.exp(-dt / params.motor_tau)
    wheel_actual = WheelSpeeds(
        tuple(decay * w + (1.0 - decay) * c for w, c in zip(state.wheel_actual.r, target.r)),
        target.steering,
    )

    ideal = forward_kinematics(wheel_actual, geometry)
    commanded = forward_kinematics(target, geometry)

    vx = ideal.vx * (1.0 - params.slip_long)
    vy = ideal.vy + params.slip_lat * ideal.vx
    omega = ideal.omega

    keep = max(0.0, 1.0 - params.viscous_friction * dt_s)
    drop = params.coulomb_friction * dt_s
    vx = _coulomb(vx * keep, drop)
    vy = _coulomb(vy * keep, drop)

    # rim speed of a pure rotation counts toward breakaway
    moving = math.hypot(vx, vy) + geometry.half_width * abs(omega)
    breakaway = commanded.speed + geometry.half_width * abs(commanded.omega)
    if moving < params.stiction_speed and breakaway < params.stiction_speed:
        vx = vy = omega = 0.0

    vx += _noise(rng, params.process_noise_sigma)
    vy += _noise(rng, params.process_noise_sigma)

    if not all(math.isfinite(v) for v in (vx, vy, omega)):
        raise NonFiniteState(f"Plant twist overflowed at t={state.t}: ({vx}, {vy}, {omega})")

    world = body_to_world(Twist2D(vx, vy, omega), state.pose.theta)
    x = state.pose.x + world.vx * dt_s
    y = state.pose.y + world.vy * dt_s
    theta = state.pose.theta + world.omega * dt_s
    if not all(math.isfinite(v) for v in (x, y, theta)):
        raise NonFiniteState(f"Plant pose overflowed at t={state.t}")

    return PlantState(Pose2D(x, y, theta), world, wheel_actual, state.t + dt)


def sense(state: PlantState, prev_twist: Twist2D, params: PlantParams, dt: int,
          rng: np.random.Generator) -> SensorFrame:
    """IMU, magnetic sensor and encoder readings for the current state"""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dt_s = dt / 1000.0
    sigma = params.accel_noise_sigma
    accel = (
        (state.twist.vx - prev_twist.vx) / dt_s + _noise(rng, sigma),
        (state.twist.vy - prev_twist.vy) / dt_s + _noise(rng, sigma),
        GRAVITY_MM_S2 + _noise(rng, sigma),
    )
    gyro = state.twist.omega + _noise(rng, params.gyro_noise_sigma)
    mag_theta = Pose2D(0.0, 0.0, state.pose.theta + _noise(rng, params.mag_noise_sigma)).theta
    encoders = WheelSpeeds(
        tuple(r + _noise(rng, params.encoder_noise_sigma) for r in state.wheel_actual.r),
        state.wheel_actual.steering,
    )
    return SensorFrame(accel, gyro, mag_theta, encoders, state.t)


def _quantize(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def observe_camera(state: PlantState, params: PlantParams, rng: np.random.Generator,
                   robot_id: int = 1) -> Optional[CameraObservation]:
    """Overhead camera detection, emitted only on camera ticks"""
    if state.t % TICK_MS != 0:
        return None
    u = _quantize(state.pose.x / MM_PER_PX + _noise(rng, params.pixel_noise_sigma))
    v = _quantize(state.pose.y / MM_PER_PX + _noise(rng, params.pixel_noise_sigma))
    theta = Pose2D(0.0, 0.0, state.pose.theta + _noise(rng, params.camera_theta_sigma)).theta
    return CameraObservation(robot_id, PixelPose(u, v, theta), state.t)


class DelayQueue:
    """FIFO transport delay: a payload becomes visible `latency` ms after its push"""

    def __init__(self, latency: int):
        if latency < 0:
            raise ValueError("latency must be non-negative")
        self.latency = latency
        self.entries: Deque[Tuple[Timestamp, Any]] = deque()
        self._last_now: Optional[Timestamp] = None

    def _check_clock(self, now: Timestamp):
        if self._last_now is not None and now < self._last_now:
            raise ValueError(f"Queue clock went backwards: {now} < {self._last_now}")
        self._last_now = now

    def push(self, payload: Any, now: Timestamp):
        self._check_clock(now)
        self.entries.append((now + self.latency, payload))

    def pop(self, now: Timestamp) -> List[Any]:
        self._check_clock(now)
        ready = []
        while self.entries and self.entries[0][0] <= now:
            ready.append(self.entries.popleft()[1])
        return ready

    def __len__(self):
        return len(self.entries)


def command_queue() -> DelayQueue:
    return DelayQueue(getattr(settings, 'TESTBED_COMMAND_LATENCY_MS', 25))


def observation_queue() -> DelayQueue:
    return DelayQueue(getattr(settings, 'TESTBED_OBSERVATION_LATENCY_MS', 7))


def latency_push(queue: DelayQueue, payload: Any, now: Timestamp):
    queue.push(payload, now)


def latency_pop(queue: DelayQueue, now: Timestamp) -> List[Any]:
    return queue.pop(now)


class PlantSimulator:
    """Stateful wrapper stepping one physical robot with its own noise stream"""

    def __init__(self, params: PlantParams, geometry: ChassisGeometry = ChassisGeometry(),
                 initial_pose: Pose2D = Pose2D(), seed: int = 0, robot_id: int = 1,
                 stream: str = 'plant'):
        self.params = params
        self.geometry = geometry
        self.robot_id = robot_id
        self.rng = make_rng(seed, stream)
        self.state = PlantState(pose=initial_pose, t=0)
        self.prev_twist = Twist2D()

    def step(self, wheel_cmd: WheelSpeeds, dt: int = TICK_MS) -> PlantState:
        self.prev_twist = self.state.twist
        self.state = plant_step(self.state, wheel_cmd, self.params, dt, self.rng, self.geometry)
        return self.state

    def sense(self, dt: int = TICK_MS) -> SensorFrame:
        return sense(self.state, self.prev_twist, self.params, dt, self.rng)

    def observe(self) -> Optional[CameraObservation]:
        return observe_camera(self.state, self.params, self.rng, self.robot_id)
