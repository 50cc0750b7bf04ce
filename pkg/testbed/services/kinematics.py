"""
Forward and inverse kinematics for the heterogeneous chassis family.

Omni4 uses the X-configuration (mecanum-equivalent) Jacobian with wheel
sign patterns a=(1,1,1,1), b=(-1,1,1,-1), c=(-1,-1,1,1) for wheels 1..4.
The wheel numbering and mount angles are a convention of this package, not
measured from a physical robot. Diff2x2 drives wheel pairs (1,3) and (2,4)
like a Diff2. Steered kinds use a kinematic bicycle model about the rear axle.
"""
import math
from functools import lru_cache

import numpy as np

from .core import ChassisGeometry, ChassisKind, Twist2D, WheelSpeeds
from ..exceptions import NonholonomicViolation

LATERAL_TOLERANCE = 1e-9

OMNI_A = (1.0, 1.0, 1.0, 1.0)
OMNI_B = (-1.0, 1.0, 1.0, -1.0)
OMNI_C = (-1.0, -1.0, 1.0, 1.0)


@lru_cache(maxsize=32)
def _omni_matrices(geometry: ChassisGeometry):
    lever = geometry.half_length + geometry.half_width
    jacobian = np.array(
        [[a, b, lever * c] for a, b, c in zip(OMNI_A, OMNI_B, OMNI_C)]
    ) / geometry.wheel_radius
    return jacobian, np.linalg.pinv(jacobian)


@lru_cache(maxsize=32)
def _differential_matrices(geometry: ChassisGeometry):
    # columns: (vx, omega)
    rows = [[1.0, -geometry.half_width], [1.0, geometry.half_width]]
    if geometry.kind is ChassisKind.DIFF2X2:
        rows = rows + rows
    jacobian = np.array(rows) / geometry.wheel_radius
    return jacobian, np.linalg.pinv(jacobian)


def wheel_jacobian(geometry: ChassisGeometry) -> np.ndarray:
    """Map from the chassis' free twist coordinates to the driven wheel vector"""
    if geometry.kind is ChassisKind.OMNI4:
        return _omni_matrices(geometry)[0]
    if geometry.kind in (ChassisKind.DIFF2, ChassisKind.DIFF2X2):
        return _differential_matrices(geometry)[0]
    raise ValueError(f"{geometry.kind.value} has a steering-dependent Jacobian")


def _require_planar(twist: Twist2D, geometry: ChassisGeometry):
    if abs(twist.vy) > LATERAL_TOLERANCE:
        raise NonholonomicViolation(
            f"{geometry.kind.value} chassis cannot translate laterally (vy={twist.vy})"
        )


def _steered_wheel_factors(geometry: ChassisGeometry, steering: float):
    """Wheel speed per unit of vx, for each of the 4 wheel slots"""
    front = 1.0 / (geometry.wheel_radius * math.cos(steering))
    rear = 1.0 / geometry.wheel_radius
    if geometry.kind is ChassisKind.FWD:
        return (front, front, 0.0, 0.0)
    if geometry.kind is ChassisKind.RWD:
        return (rear, rear, 0.0, 0.0)
    return (front, front, rear, rear)


def _steered_inverse(twist: Twist2D, geometry: ChassisGeometry) -> WheelSpeeds:
    if twist.vx == 0.0:
        if twist.omega != 0.0:
            raise NonholonomicViolation(
                f"{geometry.kind.value} chassis cannot turn in place (omega={twist.omega})"
            )
        return WheelSpeeds()

    steering = math.atan(geometry.wheelbase * twist.omega / twist.vx)
    if abs(steering) > geometry.max_steering + 1e-12:
        raise NonholonomicViolation(
            f"Curvature needs steering {math.degrees(steering):.1f} deg, "
            f"limit is {math.degrees(geometry.max_steering):.1f} deg"
        )
    factors = _steered_wheel_factors(geometry, steering)
    return WheelSpeeds(tuple(f * twist.vx for f in factors), steering)


def _steered_forward(wheels: WheelSpeeds, geometry: ChassisGeometry) -> Twist2D:
    factors = np.array(_steered_wheel_factors(geometry, wheels.steering))
    r = np.array(wheels.r)
    vx = float(factors @ r / (factors @ factors))
    omega = vx * math.tan(wheels.steering) / geometry.wheelbase
    return Twist2D(vx, 0.0, omega)


def inverse_kinematics(twist: Twist2D, geometry: ChassisGeometry) -> WheelSpeeds:
    """Body-frame twist to wheel speeds (plus steering angle for steered kinds)"""
    kind = geometry.kind
    if kind is ChassisKind.OMNI4:
        jacobian, _ = _omni_matrices(geometry)
        return WheelSpeeds(tuple(jacobian @ np.array(twist.as_tuple())))

    _require_planar(twist, geometry)
    if kind.has_steering:
        return _steered_inverse(twist, geometry)

    jacobian, _ = _differential_matrices(geometry)
    r = jacobian @ np.array([twist.vx, twist.omega])
    if kind is ChassisKind.DIFF2X2:
        # slots follow the pairing (1,3) left and (2,4) right
        return WheelSpeeds((r[0], r[1], r[2], r[3]))
    return WheelSpeeds((r[0], r[1]))


def forward_kinematics(wheels: WheelSpeeds, geometry: ChassisGeometry) -> Twist2D:
    """Least-squares body twist for a wheel vector; exact for consistent wheels"""
    kind = geometry.kind
    if kind is ChassisKind.OMNI4:
        _, pseudo_inverse = _omni_matrices(geometry)
        vx, vy, omega = pseudo_inverse @ np.array(wheels.r)
        return Twist2D(float(vx), float(vy), float(omega))

    if kind.has_steering:
        return _steered_forward(wheels, geometry)

    _, pseudo_inverse = _differential_matrices(geometry)
    driven = wheels.r if kind is ChassisKind.DIFF2X2 else wheels.r[:2]
    vx, omega = pseudo_inverse @ np.array(driven)
    return Twist2D(float(vx), 0.0, float(omega))


def body_to_world(twist: Twist2D, theta: float) -> Twist2D:
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    return Twist2D(
        cos_t * twist.vx - sin_t * twist.vy,
        sin_t * twist.vx + cos_t * twist.vy,
        twist.omega,
    )


def world_to_body(twist: Twist2D, theta: float) -> Twist2D:
    return body_to_world(twist, -theta)
