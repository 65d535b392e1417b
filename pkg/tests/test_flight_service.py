"""
最小 snap 轨迹与三维航线测试
"""

import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from scipy.integrate import quad

from app.core.exceptions import SingularSystemError
from app.models.sensing import PoseSE3
from app.services.citymap_service import make_city_map, points_in_prisms, segment_free
from app.services.flight_service import (
    SEPTIC_PEAK_SPEED,
    build_plan,
    control_step_duration,
    min_snap_segment,
    plan_frame,
    rest_to_rest,
    route_3d,
    sample_plan,
    segment_duration,
)

WALL = [(45, 0), (55, 0), (55, 100), (45, 100)]


def _snap_integral(fn, duration):
    return quad(lambda t: float(fn(t)) ** 2, 0.0, duration, limit=200)[0]


class TestMinSnapSegment:
    def test_unit_rest_to_rest_coefficients(self):
        seg = rest_to_rest([0.0], [1.0], 1.0)
        np.testing.assert_allclose(seg.coeffs[0], [0, 0, 0, 0, 35, -84, 70, -20], atol=1e-9)

    def test_time_scaling(self):
        seg = rest_to_rest([0.0], [1.0], 2.0)
        for t in (0.3, 1.0, 1.7):
            s = t / 2.0
            expected = 35 * s**4 - 84 * s**5 + 70 * s**6 - 20 * s**7
            assert seg.evaluate(t)[0] == pytest.approx(expected, abs=1e-10)
        assert seg.evaluate(1.0)[0] == pytest.approx(0.5)

    def test_boundary_residuals(self):
        rng = np.random.default_rng(2)
        start = rng.normal(size=(3, 4))
        end = rng.normal(size=(3, 4))
        seg = min_snap_segment(start, end, 2.5)
        for d in range(4):
            np.testing.assert_allclose(seg.evaluate(0.0, d), start[:, d], atol=1e-6)
            np.testing.assert_allclose(seg.evaluate(2.5, d), end[:, d], atol=1e-6)

    def test_zero_motion_has_zero_cost(self):
        seg = rest_to_rest([3.0, -1.0, 7.0], [3.0, -1.0, 7.0], 4.0)
        assert seg.snap_cost == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(seg.evaluate(np.linspace(0, 4, 9)), [[3.0, -1.0, 7.0]] * 9)

    def test_cost_matches_integral(self):
        seg = min_snap_segment([[0.0, 1.0, 0.0, 0.0]], [[5.0, 0.0, -1.0, 0.0]], 3.0)
        integral = _snap_integral(lambda t: seg.evaluate(t, 4)[0], 3.0)
        assert seg.snap_cost == pytest.approx(integral, rel=1e-6)

    @pytest.mark.parametrize("eps", [-0.05, 0.01, 0.2])
    def test_perturbation_increases_cost(self, eps):
        duration = 2.0
        seg = rest_to_rest([0.0], [4.0], duration)
        # t^4 (T - t)^4 的前三阶导数在两端都为 0，加上它不改变边界条件
        bump = Polynomial([0, 0, 0, 0, 1]) * Polynomial([duration, -1]) ** 4
        snap_bump = bump.deriv(4)
        perturbed = _snap_integral(lambda t: seg.evaluate(t, 4)[0] + eps * snap_bump(t), duration)
        assert perturbed > seg.snap_cost

    def test_singular_duration(self):
        with pytest.raises(SingularSystemError):
            rest_to_rest([0.0], [1.0], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            min_snap_segment(np.zeros((2, 4)), np.zeros((3, 4)), 1.0)


class TestSegmentDuration:
    def test_zero_length(self):
        assert segment_duration(0.0) == 0.0

    def test_peak_speed_respected(self):
        for length in (3.0, 40.0, 200.0):
            duration = segment_duration(length, 15.0, 5.0)
            seg = rest_to_rest([0.0], [length], duration)
            speeds = np.abs(seg.evaluate(np.linspace(0.0, duration, 2001), 1)[:, 0])
            assert speeds.max() <= 15.0 + 1e-9
            assert speeds.max() == pytest.approx(SEPTIC_PEAK_SPEED * length / duration, rel=1e-4)

    def test_short_hop_uses_acceleration_limit(self):
        assert segment_duration(5.0, 15.0, 5.0) == pytest.approx(2.0)


class TestRoute:
    def test_straight_line(self, open_city):
        route = route_3d(open_city, (10.0, 10.0, 10.0), (90.0, 90.0, 30.0))
        assert len(route) == 2

    def test_same_point(self, open_city):
        route = route_3d(open_city, (10.0, 10.0, 10.0), (10.0, 10.0, 10.0))
        assert len(route) == 1

    def test_detour_is_collision_free(self, block_city):
        start = np.array([20.0, 50.0, 10.0])
        goal = np.array([80.0, 50.0, 10.0])
        route = route_3d(block_city, start, goal)
        assert route is not None and len(route) >= 3
        np.testing.assert_allclose(route[0], start)
        np.testing.assert_allclose(route[-1], goal)
        for a, b in zip(route, route[1:]):
            assert segment_free(block_city, a, b)

    def test_unreachable(self):
        city = make_city_map((0, 0, 100, 100), [(WALL, 80.0)], altitude_cap=50)
        assert route_3d(city, (20.0, 50.0, 10.0), (80.0, 50.0, 10.0)) is None


class TestPlanSampling:
    def test_scan_in_place(self, open_city):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], yaw=0.4, pitch=-0.5)
        plan = build_plan(open_city, pose, pose)
        assert not plan.has_transit
        poses = sample_plan(plan, 30)
        assert len(poses) == 30
        for p in poses:
            np.testing.assert_allclose(p.position, pose.position)
        assert poses[-1].yaw == pytest.approx(0.4 + 2.0 * math.pi)
        assert poses[-1].pitch == pytest.approx(-0.5)

    def test_split_and_endpoints(self, open_city):
        start = PoseSE3(position=[10.0, 10.0, 10.0], yaw=0.0, pitch=-0.2)
        goal = PoseSE3(position=[90.0, 60.0, 30.0], yaw=3.0, pitch=-0.8)
        plan = build_plan(open_city, start, goal)
        poses = sample_plan(plan, 30)
        transit, scan = poses[:20], poses[20:]
        np.testing.assert_allclose(transit[-1].position, goal.position, atol=1e-6)
        assert transit[-1].yaw == pytest.approx(3.0)
        assert transit[-1].pitch == pytest.approx(-0.8)
        assert all(np.allclose(p.position, goal.position) for p in scan)
        assert scan[-1].yaw == pytest.approx(3.0 + 2.0 * math.pi)

    def test_yaw_takes_short_way(self, open_city):
        start = PoseSE3(position=[10.0, 10.0, 10.0], yaw=3.0)
        goal = PoseSE3(position=[90.0, 10.0, 10.0], yaw=-3.0)
        transit = sample_plan(build_plan(open_city, start, goal), 9)[:6]
        assert transit[-1].yaw == pytest.approx(3.0 + (2.0 * math.pi - 6.0))

    def test_speed_bound_between_steps(self, block_city):
        start = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=-0.3)
        goal = PoseSE3(position=[80.0, 50.0, 10.0], yaw=1.0, pitch=-0.3)
        plan = build_plan(block_city, start, goal, speed_limit=15.0)
        poses = sample_plan(plan, 30)
        dt = control_step_duration(plan, 30)
        prev = start.position
        for p in poses[:20]:
            assert np.linalg.norm(p.position - prev) <= 15.0 * dt + 1e-6
            prev = p.position

    def test_all_samples_are_free(self, block_city):
        start = PoseSE3(position=[20.0, 50.0, 10.0])
        goal = PoseSE3(position=[80.0, 50.0, 10.0])
        poses = sample_plan(build_plan(block_city, start, goal), 40)
        positions = np.array([p.position for p in poses])
        assert not points_in_prisms(block_city, positions).any()

    def test_single_step(self, open_city):
        start = PoseSE3(position=[10.0, 10.0, 10.0])
        goal = PoseSE3(position=[40.0, 10.0, 10.0])
        poses = sample_plan(build_plan(open_city, start, goal), 1)
        assert len(poses) == 1
        np.testing.assert_allclose(poses[0].position, goal.position, atol=1e-6)
        assert poses[0].yaw == pytest.approx(2.0 * math.pi)
        assert control_step_duration(build_plan(open_city, start, goal), 1) == 0.0

    def test_unreachable_goal_scans_in_place(self):
        city = make_city_map((0, 0, 100, 100), [(WALL, 80.0)], altitude_cap=50)
        start = PoseSE3(position=[20.0, 50.0, 10.0])
        plan = build_plan(city, start, PoseSE3(position=[80.0, 50.0, 10.0]))
        assert plan.metadata["unreachable"]
        assert all(np.allclose(p.position, start.position) for p in sample_plan(plan, 10))

    def test_pitch_clamped_during_scan(self, open_city):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], pitch=-math.pi / 2)
        plan = build_plan(open_city, pose, pose, scan_pitch_amplitude=math.radians(30.0))
        assert all(abs(p.pitch) <= math.pi / 2 for p in sample_plan(plan, 12))

    def test_invalid_step_count(self, open_city):
        pose = PoseSE3(position=[50.0, 50.0, 20.0])
        with pytest.raises(ValueError):
            sample_plan(build_plan(open_city, pose, pose), 0)

    def test_plan_frame(self, open_city, tmp_path):
        start = PoseSE3(position=[10.0, 10.0, 10.0])
        goal = PoseSE3(position=[40.0, 10.0, 10.0])
        plan = build_plan(open_city, start, goal)
        df = plan_frame(plan, 12, planning_step=2)
        assert list(df.columns) == ["planning_step", "t", "x", "y", "z", "yaw", "pitch"]
        assert len(df) == 12
        assert df["t"].is_monotonic_increasing
        assert df["t"].iloc[-1] == pytest.approx(plan.transit_duration + plan.scan.duration)
