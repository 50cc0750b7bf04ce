"""
Shared domain types for the testbed.

World frame: origin at the arena corner, x right, y up, angles counterclockwise.
Lengths are millimeters, time is integer milliseconds, and one camera pixel
is 2.5 mm, so pixel (u, v) sits at (2.5*u, 2.5*v) mm.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

MM_PER_PX = 2.5
TICK_MS = 8
GRAVITY_MM_S2 = 9806.65
TWO_PI = 2.0 * math.pi

# Integer milliseconds since experiment start
Timestamp = int


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]"""
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def to_mm(pixels: float) -> float:
    return pixels * MM_PER_PX


def to_px(millimeters: float) -> int:
    """Millimeters to pixels, rounding half away from zero"""
    scaled = abs(millimeters) / MM_PER_PX
    return int(math.copysign(math.floor(scaled + 0.5), millimeters))


def px_mm_convert(value: float, direction: str):
    """
    Convert between pixels and millimeters.

    Args:
        value: finite input in the source unit
        direction: 'to_mm' or 'to_px'
    """
    if direction == 'to_mm':
        return to_mm(value)
    if direction == 'to_px':
        return to_px(value)
    raise ValueError(f"Unknown conversion direction: {direction}")


class ChassisKind(Enum):
    """Drive methods of the heterogeneous chassis family"""
    OMNI4 = 'omni4'
    DIFF2 = 'diff2'
    FWD = 'fwd'
    RWD = 'rwd'
    WD4 = 'wd4'
    DIFF2X2 = 'diff2x2'

    @property
    def has_steering(self) -> bool:
        return self in (ChassisKind.FWD, ChassisKind.RWD, ChassisKind.WD4)

    @property
    def holonomic(self) -> bool:
        return self is ChassisKind.OMNI4

    @property
    def motor_count(self) -> int:
        return {
            ChassisKind.OMNI4: 4,
            ChassisKind.DIFF2: 2,
            ChassisKind.FWD: 2,
            ChassisKind.RWD: 2,
            ChassisKind.WD4: 4,
            ChassisKind.DIFF2X2: 4,
        }[self]


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'theta', wrap_angle(self.theta))

    def to_pixels(self) -> 'PixelPose':
        return PixelPose(to_px(self.x), to_px(self.y), self.theta)


@dataclass(frozen=True)
class Twist2D:
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.vx, self.vy, self.omega)):
            raise ValueError(f"Twist components must be finite: {self}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.vx, self.vy, self.omega)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def __add__(self, other: 'Twist2D') -> 'Twist2D':
        return Twist2D(self.vx + other.vx, self.vy + other.vy, self.omega + other.omega)

    def __sub__(self, other: 'Twist2D') -> 'Twist2D':
        return Twist2D(self.vx - other.vx, self.vy - other.vy, self.omega - other.omega)

    def scaled(self, factor: float) -> 'Twist2D':
        return Twist2D(self.vx * factor, self.vy * factor, self.omega * factor)


@dataclass(frozen=True)
class WheelSpeeds:
    """Per-wheel speeds in rad/s; two-wheel chassis leave wheels 3 and 4 at zero"""
    r: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    steering: float = 0.0

    def __post_init__(self):
        values = tuple(float(v) for v in self.r)
        if len(values) == 2:
            values = values + (0.0, 0.0)
        if len(values) != 4:
            raise ValueError(f"WheelSpeeds needs 4 entries, got {len(values)}")
        object.__setattr__(self, 'r', values)

    def clamped(self, limit: float) -> 'WheelSpeeds':
        return WheelSpeeds(tuple(max(-limit, min(limit, v)) for v in self.r), self.steering)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.r) and math.isfinite(self.steering)


@dataclass(frozen=True)
class PixelPose:
    u: int
    v: int
    theta: float = 0.0

    def to_pose(self) -> Pose2D:
        return Pose2D(to_mm(self.u), to_mm(self.v), self.theta)

    @property
    def position(self) -> Tuple[int, int]:
        return (self.u, self.v)


@dataclass(frozen=True)
class ChassisGeometry:
    """Chassis dimensions in millimeters; defaults follow the 350 x 350 mm omni robot"""
    kind: ChassisKind = ChassisKind.OMNI4
    wheel_radius: float = 50.0
    half_length: float = 175.0
    half_width: float = 175.0
    wheelbase: float = 350.0
    max_steering: float = field(default=math.radians(30.0))

    def __post_init__(self):
        lengths = (self.wheel_radius, self.half_length, self.half_width, self.wheelbase)
        if any(length <= 0 for length in lengths):
            raise ValueError(f"Chassis lengths must be positive: {self}")
