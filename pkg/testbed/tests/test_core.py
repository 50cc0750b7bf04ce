import math

from django.test import SimpleTestCase

from testbed.services.core import (
    ChassisGeometry, ChassisKind, PixelPose, Pose2D, Twist2D, WheelSpeeds,
    px_mm_convert, to_mm, to_px, wrap_angle,
)


class AngleTests(SimpleTestCase):

    def test_wrap_keeps_values_in_range(self):
        for theta in (0.0, 1.0, -1.0, 3.0, -3.0, 7.5, -7.5, 100.0):
            wrapped = wrap_angle(theta)
            self.assertGreater(wrapped, -math.pi)
            self.assertLessEqual(wrapped, math.pi)
            self.assertAlmostEqual(math.sin(wrapped), math.sin(theta), places=9)
            self.assertAlmostEqual(math.cos(wrapped), math.cos(theta), places=9)

    def test_minus_pi_maps_to_pi(self):
        self.assertEqual(wrap_angle(-math.pi), math.pi)
        self.assertEqual(wrap_angle(math.pi), math.pi)

    def test_wrap_is_idempotent(self):
        for theta in (3 * math.pi, -3 * math.pi, 0.5, -2.9, 12.0, math.pi):
            once = wrap_angle(theta)
            self.assertEqual(wrap_angle(once), once)
        self.assertAlmostEqual(wrap_angle(3 * math.pi), math.pi, places=12)

    def test_pose_normalizes_heading(self):
        pose = Pose2D(1.0, 2.0, 2 * math.pi + 0.5)
        self.assertAlmostEqual(pose.theta, 0.5, places=12)


class UnitConversionTests(SimpleTestCase):

    def test_pixels_to_millimeters(self):
        self.assertEqual(to_mm(500), 1250.0)
        self.assertEqual(px_mm_convert(900, 'to_mm'), 2250.0)

    def test_millimeters_to_pixels_rounds_half_away_from_zero(self):
        self.assertEqual(to_px(1250.0), 500)
        self.assertEqual(to_px(1.25), 1)
        self.assertEqual(to_px(-1.25), -1)
        self.assertEqual(to_px(1.24), 0)
        self.assertEqual(px_mm_convert(3.75, 'to_px'), 2)

    def test_whole_pixels_survive_a_trip_through_millimeters(self):
        for pixels in range(-2000, 2001):
            self.assertEqual(to_px(to_mm(pixels)), pixels)

    def test_unknown_direction(self):
        with self.assertRaises(ValueError):
            px_mm_convert(1.0, 'sideways')

    def test_pixel_pose_roundtrip(self):
        pose = PixelPose(500, 900, 0.25).to_pose()
        self.assertEqual((pose.x, pose.y), (1250.0, 2250.0))
        self.assertEqual(pose.to_pixels(), PixelPose(500, 900, 0.25))


class TwistTests(SimpleTestCase):

    def test_arithmetic(self):
        a = Twist2D(1.0, 2.0, 0.5)
        b = Twist2D(0.5, -1.0, 0.25)
        self.assertEqual(a + b, Twist2D(1.5, 1.0, 0.75))
        self.assertEqual(a - b, Twist2D(0.5, 3.0, 0.25))
        self.assertEqual(a.scaled(2.0), Twist2D(2.0, 4.0, 1.0))
        self.assertAlmostEqual(Twist2D(3.0, 4.0).speed, 5.0)

    def test_rejects_non_finite(self):
        with self.assertRaises(ValueError):
            Twist2D(float('nan'), 0.0, 0.0)
        with self.assertRaises(ValueError):
            Twist2D(0.0, float('inf'), 0.0)


class WheelSpeedsTests(SimpleTestCase):

    def test_two_wheel_vectors_are_padded(self):
        self.assertEqual(WheelSpeeds((1.0, 2.0)).r, (1.0, 2.0, 0.0, 0.0))

    def test_wrong_length(self):
        with self.assertRaises(ValueError):
            WheelSpeeds((1.0, 2.0, 3.0))

    def test_clamp(self):
        clamped = WheelSpeeds((30.0, -30.0, 5.0, 0.0)).clamped(20.0)
        self.assertEqual(clamped.r, (20.0, -20.0, 5.0, 0.0))

    def test_finite_check(self):
        self.assertTrue(WheelSpeeds((1.0, 2.0, 3.0, 4.0)).is_finite())
        self.assertFalse(WheelSpeeds((1.0, float('nan'), 3.0, 4.0)).is_finite())


class ChassisTests(SimpleTestCase):

    def test_motor_counts(self):
        counts = {kind: kind.motor_count for kind in ChassisKind}
        self.assertEqual(counts, {
            ChassisKind.OMNI4: 4, ChassisKind.DIFF2: 2, ChassisKind.FWD: 2,
            ChassisKind.RWD: 2, ChassisKind.WD4: 4, ChassisKind.DIFF2X2: 4,
        })

    def test_only_omni_is_holonomic(self):
        self.assertEqual([k for k in ChassisKind if k.holonomic], [ChassisKind.OMNI4])
        self.assertEqual({k for k in ChassisKind if k.has_steering},
                         {ChassisKind.FWD, ChassisKind.RWD, ChassisKind.WD4})

    def test_geometry_requires_positive_lengths(self):
        with self.assertRaises(ValueError):
            ChassisGeometry(wheel_radius=0.0)
