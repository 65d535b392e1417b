"""
光线投射传感器测试
"""

import math

import numpy as np
import pytest

from app.models.sensing import DetectionModel, PoseSE3
from app.services.raysim_service import (
    GROUND_COLOR,
    SKY_COLOR,
    building_color,
    detect_targets,
    export_frame,
    in_frustum,
    line_of_sight,
    load_depth,
    project,
    ray_directions,
    render_rgbd,
    visible_cells_gt,
    visible_lattice_gt,
)


class TestRayDirections:
    def test_axial_component_is_one(self, camera):
        pose = PoseSE3(position=[0.0, 0.0, 10.0], yaw=0.7, pitch=-0.4)
        dirs = ray_directions(pose, camera)
        assert dirs.shape == (16, 16, 3)
        np.testing.assert_allclose(dirs @ pose.forward, 1.0)

    def test_camera_basis_is_orthonormal(self):
        pose = PoseSE3(position=[0.0, 0.0, 0.0], yaw=1.1, pitch=0.3)
        basis = np.stack([pose.forward, pose.right, pose.up])
        np.testing.assert_allclose(basis @ basis.T, np.eye(3), atol=1e-12)
        assert pose.up[2] > 0.0

    def test_pitch_out_of_range(self):
        with pytest.raises(ValueError):
            PoseSE3(position=[0.0, 0.0, 0.0], pitch=2.0)


class TestRender:
    def test_wall_depth(self, block_city, camera):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        frame = render_rgbd(block_city, pose, camera)
        np.testing.assert_allclose(frame.depth[7:9, 7:9], 20.0)
        np.testing.assert_allclose(frame.rgb[8, 8], building_color(0))

    def test_ground_depth_straight_down(self, open_city, camera):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], yaw=0.0, pitch=-math.pi / 2)
        frame = render_rgbd(open_city, pose, camera)
        np.testing.assert_allclose(frame.depth, 20.0)
        np.testing.assert_allclose(frame.rgb[3, 3], GROUND_COLOR)

    def test_roof_depth(self, block_city, camera):
        pose = PoseSE3(position=[50.0, 50.0, 40.0], yaw=0.0, pitch=-math.pi / 2)
        frame = render_rgbd(block_city, pose, camera)
        np.testing.assert_allclose(frame.depth[7:9, 7:9], 10.0)

    def test_sky_depth(self, open_city, camera):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], yaw=0.0, pitch=math.pi / 3)
        frame = render_rgbd(open_city, pose, camera)
        np.testing.assert_allclose(frame.depth, camera.d_max + 1.0)
        np.testing.assert_allclose(frame.rgb[0, 0], SKY_COLOR)

    def test_frame_metadata(self, open_city, camera):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], yaw=0.0, pitch=-0.5)
        frame = render_rgbd(open_city, pose, camera, timestamp=7)
        assert frame.shape == (16, 16)
        assert frame.timestamp == 7
        assert frame.pose == pose
        assert np.all((frame.rgb >= 0.0) & (frame.rgb <= 1.0))

    def test_export_frame(self, open_city, camera, tmp_path):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], yaw=0.0, pitch=-math.pi / 2)
        frame = render_rgbd(open_city, pose, camera, timestamp=3)
        png, raw = export_frame(frame, tmp_path)
        assert png.name == "frame_00003.png"
        assert png.exists()
        np.testing.assert_allclose(load_depth(raw, 16, 16), frame.depth, rtol=1e-6)


class TestVisibility:
    def test_line_of_sight(self, block_city):
        assert not line_of_sight(block_city, (20.0, 50.0, 10.0), (80.0, 50.0, 10.0))
        assert line_of_sight(block_city, (20.0, 50.0, 40.0), (80.0, 50.0, 40.0))

    def test_frustum_and_projection(self, camera):
        pose = PoseSE3(position=[0.0, 0.0, 10.0], yaw=0.0, pitch=0.0)
        points = np.array([[10.0, 0.0, 10.0], [-10.0, 0.0, 10.0], [10.0, 20.0, 10.0]])
        np.testing.assert_array_equal(in_frustum(pose, camera, points), [True, False, False])
        u, v = project(pose, camera, points[0])
        assert u == pytest.approx(8.0)
        assert v == pytest.approx(8.0)

    def test_occluded_cells(self, block_city, block_graph, camera):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=-0.3)
        vis = visible_cells_gt(block_city, pose, camera, block_graph)
        behind = block_graph.nearest_node((80.0, 50.0))
        in_front = block_graph.nearest_node((30.0, 50.0))
        assert vis.shape == (block_graph.num_nodes,)
        assert not vis[behind]

        lattice = visible_lattice_gt(block_city, pose, camera, block_graph)
        assert lattice.shape == (block_graph.num_cells,)
        assert not lattice[block_graph.nearest_cell((80.0, 50.0))]
        assert vis[in_front] == lattice[block_graph.node_cells[in_front]]


class TestDetection:
    def test_visible_target_detected(self, open_city, camera, rng):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        dets = detect_targets(open_city, pose, camera, [(80.0, 50.0)], rng, DetectionModel(p_detect=1.0))
        assert len(dets) == 1
        assert dets[0].target_id == 0
        assert dets[0].ground_point == (80.0, 50.0)

    def test_detection_rate(self, open_city, camera):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        # 同一个可见目标重复 10^4 次，每个目标一次独立抽样
        targets = [(80.0, 50.0)] * 10_000
        dets = detect_targets(open_city, pose, camera, targets, np.random.default_rng(72))
        assert 0.94 <= len(dets) / 10_000 <= 0.96

    def test_occluded_target_missed(self, block_city, camera, rng):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        dets = detect_targets(block_city, pose, camera, [(80.0, 50.0)], rng, DetectionModel(p_detect=1.0))
        assert dets == []

    def test_zero_probability(self, open_city, camera, rng):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        dets = detect_targets(open_city, pose, camera, [(80.0, 50.0)], rng, DetectionModel(p_detect=0.0))
        assert dets == []

    def test_one_draw_per_target(self, block_city, camera):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        targets = [(80.0, 50.0), (80.0, 10.0), (5.0, 5.0)]
        a = np.random.default_rng(5)
        b = np.random.default_rng(5)
        detect_targets(block_city, pose, camera, targets, a, target_ids=[4, 9, 11])
        b.random(3)
        assert a.random() == b.random()

    def test_custom_ids(self, open_city, camera, rng):
        pose = PoseSE3(position=[20.0, 50.0, 10.0], yaw=0.0, pitch=0.0)
        dets = detect_targets(
            open_city, pose, camera, [(80.0, 50.0), (90.0, 50.0)], rng, DetectionModel(p_detect=1.0), target_ids=[7, 3]
        )
        assert sorted(d.target_id for d in dets) == [3, 7]
