import numpy as np
from django.test import SimpleTestCase

from ..config import SegParams
from ..exceptions import DegenerateBlock
from ..geometry import GroundLabel, SphericalPoint
from ..ground import (
    LineSegment, coarse_labels, coarse_segment_column, fine_labels, fine_segment, fit_line_segments,
    is_change_point, segment_buffer,
)
from ..packet import BeamCalibration
from ..synth import GroundPlane, SceneObject, SceneSpec, SensorSpec, raycast_scan

G, C, CF, U = GroundLabel.GROUND, GroundLabel.CHANGE, GroundLabel.CHANGE_FOLLOW, GroundLabel.UNCERTAIN

# bottom to top: two ground returns, a wall at 10 m, then a far return above it
WALL_COLUMN = [(4.0, -1.8), (5.0, -1.8), (10.0, -1.6), (10.0, -1.0), (10.0, -0.4), (10.0, 0.2), (30.0, 5.0)]


def crease_points():
    rho = np.arange(1.0, 12.001, 0.25)
    z = np.where(rho <= 4.0, -2.0, -2.0 + np.tan(np.radians(5.0)) * (rho - 4.0))
    return rho, z


class CoarseTests(SimpleTestCase):

    def test_wall_column(self):
        rho, z = np.array(WALL_COLUMN).T
        labels = coarse_labels(rho, z, np.ones(len(rho), dtype=bool), SegParams())
        self.assertEqual([GroundLabel(int(v)) for v in labels], [G, G, C, C, C, CF, U])

    def test_invalid_points_are_skipped(self):
        rho, z = np.array(WALL_COLUMN).T
        rho = np.insert(rho, 1, 0.0)
        z = np.insert(z, 1, 0.0)
        valid = rho > 0
        labels = coarse_labels(rho, z, valid, SegParams())
        self.assertEqual(labels[1], GroundLabel.INVALID)
        self.assertEqual([GroundLabel(int(v)) for v in labels[valid]], [G, G, C, C, C, CF, U])

    def test_last_point_is_not_a_change_point(self):
        labels = coarse_labels(np.array([5.0, 5.0]), np.array([-1.8, 0.0]), np.ones(2, dtype=bool), SegParams())
        self.assertEqual(list(labels), [C, CF])

    def test_empty_column(self):
        labels = coarse_labels(np.zeros(32), np.zeros(32), np.zeros(32, dtype=bool), SegParams())
        self.assertTrue(np.all(labels == GroundLabel.INVALID))

    def test_vertical_pair_is_a_change(self):
        params = SegParams()
        p = SphericalPoint(rho=5.0, phi=-10.0, theta=0.0, row=6, col=0)
        above = SphericalPoint(rho=p.rho_xy / np.cos(np.radians(-5.0)), phi=-5.0, theta=0.0, row=11, col=0)
        self.assertTrue(is_change_point(p, above, params))
        flat = SphericalPoint(rho=1.8 / np.sin(np.radians(5.0)), phi=-5.0, theta=0.0, row=11, col=0)
        low = SphericalPoint(rho=1.8 / np.sin(np.radians(10.0)), phi=-10.0, theta=0.0, row=6, col=0)
        self.assertFalse(is_change_point(low, flat, params))

    def test_column_of_points(self):
        column = [SphericalPoint(rho=np.hypot(r, z), phi=np.degrees(np.arctan2(z, r)), theta=0.0, row=i, col=0)
                  for i, (r, z) in enumerate(WALL_COLUMN)]
        self.assertEqual(coarse_segment_column(column, SegParams()), [G, G, C, C, C, CF, U])
        self.assertEqual(column[5].label, CF)


class LineFitTests(SimpleTestCase):

    def test_crease_splits_into_two_segments(self):
        params = SegParams(t_p2line=0.01, virtual_point_z=-2.0)
        rho, z = crease_points()
        segments = fit_line_segments(rho, z, params)
        self.assertEqual(len(segments), 2)
        flat, slope = segments
        self.assertAlmostEqual(flat.a, 0.0, places=6)
        self.assertAlmostEqual(flat.b, -2.0, places=6)
        self.assertAlmostEqual(flat.rho_end, 4.0)
        self.assertAlmostEqual(slope.a, np.tan(np.radians(5.0)), places=6)
        self.assertAlmostEqual(slope.b, -2.35, places=2)
        self.assertEqual(flat.inlier_count + slope.inlier_count, len(rho))

    def test_points_are_visited_in_range_order(self):
        params = SegParams(t_p2line=0.01, virtual_point_z=-2.0)
        rho, z = crease_points()
        order = np.random.default_rng(5).permutation(len(rho))
        shuffled = fit_line_segments(rho[order], z[order], params)
        self.assertEqual(shuffled, fit_line_segments(rho, z, params))

    def test_implausible_segments_are_dropped(self):
        rho = np.linspace(2.0, 10.0, 20)
        self.assertEqual(fit_line_segments(rho, 0.5 * rho - 1.8, SegParams()), [])
        self.assertEqual(fit_line_segments(rho, np.full(20, 1.0), SegParams()), [])

    def test_degenerate_block(self):
        with self.assertRaises(DegenerateBlock) as ctx:
            fit_line_segments(np.array([3.0]), np.array([-1.8]), SegParams(), block=7)
        self.assertEqual(ctx.exception.block, 7)

    def test_segment_helpers(self):
        segment = LineSegment(a=0.1, b=-2.0, rho_start=1.0, rho_end=5.0, inlier_count=10)
        self.assertAlmostEqual(segment.z_at(2.0), -1.8)
        self.assertAlmostEqual(segment.vertical_distance(2.0, -1.5), 0.3)
        self.assertTrue(segment.contains(5.0))
        self.assertFalse(segment.contains(5.1))
        low = LineSegment(a=0.1, b=-2.6, rho_start=1.0, rho_end=5.0, inlier_count=10)
        self.assertFalse(low.is_plausible(SegParams()))
        self.assertTrue(low.is_plausible(SegParams(virtual_point_z=-2.5)))
        steep = LineSegment(a=0.3, b=-1.8, rho_start=1.0, rho_end=5.0, inlier_count=10)
        self.assertFalse(steep.is_plausible(SegParams()))


class FineTests(SimpleTestCase):

    def test_change_points_become_obstacles(self):
        segment = LineSegment(a=0.0, b=-1.8, rho_start=0.0, rho_end=20.0, inlier_count=5)
        labels = np.array([G, C, CF, U, GroundLabel.INVALID], dtype=np.int8)
        rho = np.array([4.0, 10.0, 10.0, 15.0, 0.0])
        z = np.array([-1.8, -1.8, 0.2, -1.75, 0.0])
        result = fine_labels(labels, rho, z, [segment], SegParams())
        self.assertEqual(list(result), [G, GroundLabel.OBSTACLE, GroundLabel.OBSTACLE, G, GroundLabel.INVALID])

    def test_nearest_segment_outside_every_span(self):
        near = LineSegment(a=0.0, b=-1.8, rho_start=2.0, rho_end=5.0, inlier_count=5)
        far = LineSegment(a=0.0, b=-1.0, rho_start=20.0, rho_end=30.0, inlier_count=5)
        labels = np.array([U, U], dtype=np.int8)
        result = fine_labels(labels, np.array([6.0, 18.0]), np.array([-1.8, -1.8]), [near, far], SegParams())
        self.assertEqual(list(result), [G, GroundLabel.OBSTACLE])

    def test_without_segments_only_ground_stays(self):
        labels = np.array([[G, U], [CF, GroundLabel.INVALID]], dtype=np.int8)
        result = fine_labels(labels, np.ones((2, 2)), np.ones((2, 2)), [], SegParams())
        np.testing.assert_array_equal(result, [[G, GroundLabel.OBSTACLE], [GroundLabel.OBSTACLE, GroundLabel.INVALID]])

    def test_points_in_place(self):
        segment = LineSegment(a=0.0, b=-1.8, rho_start=0.0, rho_end=20.0, inlier_count=5)
        points = [SphericalPoint(rho=1.8 / np.sin(np.radians(10.0)), phi=-10.0, theta=0.0, row=6, col=0),
                  SphericalPoint(rho=10.0, phi=0.0, theta=0.0, row=16, col=0)]
        points[0].label, points[1].label = U, C
        self.assertEqual(fine_segment(points, [segment], SegParams()), [G, GroundLabel.OBSTACLE])


def flat_scene(noise_sigma=0.0, seed=0, objects=()):
    return SceneSpec(name='flat', objects=objects, noise_sigma=noise_sigma, seed=seed, sensor=SensorSpec())


class BufferSegmentationTests(SimpleTestCase):

    def test_noiseless_flat_ground_is_all_ground(self):
        scan = raycast_scan(flat_scene())
        result = segment_buffer(scan.to_buffer(), SegParams())
        valid = scan.rho > 0
        self.assertEqual(result.ground_count, int(valid.sum()))
        self.assertEqual(result.obstacle_count, 0)

    def test_noisy_flat_ground(self):
        scan = raycast_scan(flat_scene(noise_sigma=0.02, seed=9))
        result = segment_buffer(scan.to_buffer(), SegParams())
        valid = int((scan.rho > 0).sum())
        self.assertGreaterEqual(result.ground_count / valid, 0.99)

    def test_panels_are_obstacles(self):
        # at least two beams reach every panel at these ranges and heights
        placements = ((0.0, 8.0, 1.0), (90.0, 10.5, 1.3), (180.0, 12.75, 1.6), (270.0, 15.0, 2.0))
        panels = tuple(
            SceneObject(id=k + 1, kind='panel', center=(d * np.cos(np.radians(a)), d * np.sin(np.radians(a))),
                        size=(2.0, h), yaw=a)
            for k, (a, d, h) in enumerate(placements)
        )
        scan = raycast_scan(flat_scene(noise_sigma=0.02, seed=4, objects=panels))
        self.assertEqual(scan.calibration, BeamCalibration.vlp32c())
        result = segment_buffer(scan.to_buffer(), SegParams())
        on_panel = scan.truth > 0
        obstacle = result.labels == GroundLabel.OBSTACLE
        self.assertGreaterEqual(obstacle[on_panel].mean(), 0.99)

    def test_sloped_planes_are_ground(self):
        params = SegParams()
        for grade in (-0.2, -0.1, -0.05, 0.05, 0.1, 0.2):
            with self.subTest(grade=grade):
                spec = SceneSpec(name='slope', ground=(GroundPlane(grade_x=grade),), noise_sigma=0.0)
                scan = raycast_scan(spec)
                buffer = scan.to_buffer()
                result = segment_buffer(buffer, params)
                # a block fans over block_size columns, so at range rho the plane's height
                # varies across it by up to |grade| * rho * that angle
                fan = np.radians((params.block_size + 1) * scan.azimuth_step)
                reach = 0.9 * params.t_p2line / (abs(grade) * fan)
                near = buffer.valid & (buffer.cartesian[3] <= reach)
                self.assertGreater(near.sum(), 1000)
                labels = result.labels[near]
                self.assertTrue(np.all(labels == GroundLabel.GROUND),
                                f"{np.count_nonzero(labels != GroundLabel.GROUND)} points within {reach:.1f} m")

    def test_blocks_follow_global_columns(self):
        scan = raycast_scan(flat_scene())
        buffers = scan.to_buffers(buffer_packets=5)
        result = segment_buffer(buffers[1], SegParams())
        self.assertEqual(sorted(result.segments), [3, 4, 5])
        self.assertEqual(result.degenerate_blocks, 0)
