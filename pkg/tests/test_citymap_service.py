"""
地图与地面格点图测试
"""

import math
from pathlib import Path

import numpy as np
import pytest
from scipy.sparse.csgraph import dijkstra
from scipy.stats import chisquare

from app.core.config import settings
from app.core.exceptions import DomainError, MapParseError, MapValidationError, SamplingExhaustedError
from app.services.citymap_service import (
    adjacency_matrix,
    build_ground_graph,
    connected_labels,
    is_free,
    load_map,
    make_city_map,
    parse_map_text,
    path_length,
    point_in_building,
    resolve_map_path,
    sample_free_pose,
    sample_free_position,
    segment_free,
    shortest_path,
)

MAPS = Path(__file__).resolve().parents[1] / "data" / "maps"


def _map_text(*buildings: str) -> str:
    body = ",\n".join(f"    {b}" for b in buildings)
    header = "{\n" + '  "bounds": [0, 0, 100, 100],\n' + '  "altitude_cap": 50,\n'
    return header + '  "buildings": [\n' + body + "\n  ]\n}"


class TestMapParsing:
    """地图文件解析与校验"""

    def test_valid_text(self):
        text = _map_text('{"polygon": [[10, 10], [20, 10], [20, 20], [10, 20]], "height": 5}')
        city = parse_map_text(text)
        assert len(city.buildings) == 1
        assert city.altitude_cap == 50.0
        assert city.buildings[0].height == 5.0

    def test_closing_vertex_is_dropped(self):
        text = _map_text('{"polygon": [[10, 10], [20, 10], [20, 20], [10, 20], [10, 10]], "height": 5}')
        city = parse_map_text(text)
        assert city.buildings[0].vertices.shape == (4, 2)

    def test_two_vertex_polygon_reports_line(self):
        text = _map_text('{"polygon": [[10, 10], [20, 10]], "height": 5}')
        with pytest.raises(MapValidationError) as exc:
            parse_map_text(text)
        assert exc.value.line == 5
        assert exc.value.details["building"] == 0

    def test_error_line_points_at_second_building(self):
        text = _map_text(
            '{"polygon": [[10, 10], [20, 10], [20, 20], [10, 20]], "height": 5}',
            '{"polygon": [[30, 30], [40, 30]], "height": 5}',
        )
        with pytest.raises(MapValidationError) as exc:
            parse_map_text(text)
        assert exc.value.line == 6

    def test_self_intersecting_polygon(self):
        text = _map_text('{"polygon": [[10, 10], [20, 20], [20, 10], [10, 20]], "height": 5}')
        with pytest.raises(MapValidationError):
            parse_map_text(text)

    def test_polygon_outside_bounds(self):
        text = _map_text('{"polygon": [[90, 90], [110, 90], [110, 110], [90, 110]], "height": 5}')
        with pytest.raises(MapValidationError) as exc:
            parse_map_text(text)
        assert exc.value.line == 5

    def test_non_positive_height(self):
        text = _map_text('{"polygon": [[10, 10], [20, 10], [20, 20], [10, 20]], "height": 0}')
        with pytest.raises(MapValidationError):
            parse_map_text(text)

    def test_malformed_json_reports_line(self):
        text = '{\n  "bounds": [0, 0, 10, 10],\n  "altitude_cap": ,\n  "buildings": []\n}'
        with pytest.raises(MapParseError) as exc:
            parse_map_text(text)
        assert exc.value.line == 3

    def test_unknown_field_rejected(self):
        text = '{\n  "bounds": [0, 0, 10, 10],\n  "altitude_cap": 5,\n  "colour": "red"\n}'
        with pytest.raises(MapValidationError) as exc:
            parse_map_text(text)
        assert exc.value.line == 4

    def test_empty_bounds_rejected(self):
        with pytest.raises(MapValidationError):
            parse_map_text('{"bounds": [0, 0, 0, 10], "altitude_cap": 5}')

    def test_missing_file(self, tmp_path):
        with pytest.raises(MapParseError):
            load_map(tmp_path / "nope.json")

    def test_bundled_maps_load(self):
        city = load_map(MAPS / "mini_philly.json")
        assert len(city.buildings) == 16
        assert not point_in_building(city, city.center)
        court = load_map(MAPS / "mini_court.json")
        assert len(court.buildings) == 10


class TestGeometry:
    """自由空间与线段判定"""

    def test_is_free(self, block_city):
        assert not is_free(block_city, (50.0, 50.0, 10.0))
        assert is_free(block_city, (50.0, 50.0, 35.0))
        assert is_free(block_city, (10.0, 10.0, 10.0))
        assert not is_free(block_city, (10.0, 10.0, 60.0))
        assert not is_free(block_city, (150.0, 10.0, 10.0))
        assert not is_free(block_city, (10.0, 10.0, 0.0))

    def test_segment_through_building(self, block_city):
        assert not segment_free(block_city, np.array([20.0, 50.0, 10.0]), np.array([80.0, 50.0, 10.0]))
        assert segment_free(block_city, np.array([20.0, 50.0, 40.0]), np.array([80.0, 50.0, 40.0]))
        assert segment_free(block_city, np.array([20.0, 20.0, 10.0]), np.array([80.0, 20.0, 10.0]))

    def test_segment_over_roof_descending_into_wall(self, block_city):
        # 终点在棱柱内
        assert not segment_free(block_city, np.array([50.0, 50.0, 45.0]), np.array([50.0, 50.0, 20.0]))


class TestGroundGraph:
    """地面格点图"""

    def test_empty_map_node_count(self, open_graph):
        assert open_graph.shape == (11, 11)
        assert open_graph.num_nodes == 121

    def test_empty_map_edge_counts(self, open_city):
        g8 = build_ground_graph(open_city, 10.0, 8)
        g4 = build_ground_graph(open_city, 10.0, 4)
        assert sum(len(nb) for nb in g8.neighbors) // 2 == 420
        assert sum(len(nb) for nb in g4.neighbors) // 2 == 220

    def test_building_cells_removed(self, block_graph):
        assert block_graph.num_nodes == 112
        assert not block_graph.free_cells[block_graph.nearest_cell((50.0, 50.0))]
        assert block_graph.node_at(5, 5) is None
        assert block_graph.node_at(3, 5) is not None

    def test_edges_avoid_buildings(self, block_city, block_graph):
        for u, nbrs in enumerate(block_graph.neighbors):
            for v, w in nbrs:
                a = np.append(block_graph.node_xy[u], 0.0)
                b = np.append(block_graph.node_xy[v], 0.0)
                assert segment_free(block_city, a, b)
                assert w == pytest.approx(np.linalg.norm(a - b))

    def test_fully_covered_map_has_no_nodes(self):
        city = make_city_map((0, 0, 50, 50), [([(0, 0), (50, 0), (50, 50), (0, 50)], 20.0)], altitude_cap=40)
        graph = build_ground_graph(city, 10.0)
        assert graph.num_nodes == 0
        assert graph.nearest_node((25.0, 25.0)) is None
        assert connected_labels(graph).size == 0

    def test_invalid_parameters(self, open_city):
        with pytest.raises(DomainError):
            build_ground_graph(open_city, 0.0)
        with pytest.raises(DomainError):
            build_ground_graph(open_city, 10.0, connectivity=6)


class TestShortestPath:
    """最短路径"""

    def test_diagonal_cost(self, open_graph):
        result = shortest_path(open_graph, 0, 120)
        assert result.reachable
        assert result.cost == pytest.approx(100.0 * math.sqrt(2.0))
        assert result.nodes[0] == 0 and result.nodes[-1] == 120

    def test_same_node(self, open_graph):
        result = shortest_path(open_graph, 7, 7)
        assert result.nodes == (7,)
        assert result.cost == 0.0

    @pytest.mark.parametrize("heuristic", [False, True])
    def test_matches_dijkstra(self, block_graph, heuristic):
        src = block_graph.nearest_node((30.0, 50.0))
        dst = block_graph.nearest_node((70.0, 50.0))
        result = shortest_path(block_graph, src, dst, heuristic=heuristic)
        oracle = dijkstra(adjacency_matrix(block_graph), directed=False, indices=src)[dst]
        assert result.cost == pytest.approx(oracle)
        assert result.cost > 40.0
        assert path_length(block_graph, result.nodes) == pytest.approx(result.cost)
        for a, b in zip(result.nodes, result.nodes[1:]):
            assert b in {v for v, _ in block_graph.neighbors[a]}

    def test_astar_and_dijkstra_agree_on_nodes(self, block_graph):
        src = block_graph.nearest_node((0.0, 0.0))
        dst = block_graph.nearest_node((100.0, 90.0))
        assert shortest_path(block_graph, src, dst).nodes == shortest_path(block_graph, src, dst, heuristic=True).nodes

    def test_unreachable(self):
        wall = [(45, 0), (55, 0), (55, 100), (45, 100)]
        city = make_city_map((0, 0, 100, 100), [(wall, 20.0)], altitude_cap=50)
        graph = build_ground_graph(city, 10.0)
        left = graph.nearest_node((0.0, 0.0))
        right = graph.nearest_node((100.0, 0.0))
        result = shortest_path(graph, left, right)
        assert not result.reachable
        assert math.isinf(result.cost)
        assert len(set(connected_labels(graph))) == 2

    def test_bad_node(self, open_graph):
        with pytest.raises(DomainError):
            shortest_path(open_graph, 0, 500)


class TestSampling:
    """自由空间采样"""

    def test_samples_are_free(self, block_city, rng):
        for _ in range(50):
            p = sample_free_position(block_city, rng, (1.0, 40.0))
            assert is_free(block_city, p)

    def test_radius_limits_region(self, open_city, rng):
        center = np.array([20.0, 20.0])
        for _ in range(20):
            p = sample_free_position(open_city, rng, (5.0, 10.0), center=center, radius=5.0)
            assert np.all(np.abs(p[:2] - center) <= 5.0)

    def test_exhausted(self, rng):
        city = make_city_map((0, 0, 50, 50), [([(0, 0), (50, 0), (50, 50), (0, 50)], 40.0)], altitude_cap=50)
        with pytest.raises(SamplingExhaustedError):
            sample_free_position(city, rng, (1.0, 30.0), max_attempts=20)

    def test_bad_z_range(self, open_city, rng):
        with pytest.raises(DomainError):
            sample_free_position(open_city, rng, (0.0, 10.0))

    def test_pose_angles_in_range(self, block_city, rng):
        pitch_range = (math.radians(-60.0), math.radians(-10.0))
        for _ in range(30):
            pose = sample_free_pose(block_city, rng, (5.0, 40.0), pitch_range=pitch_range)
            assert is_free(block_city, pose.position)
            assert 0.0 <= pose.yaw < 2.0 * math.pi
            assert pitch_range[0] <= pose.pitch <= pitch_range[1]

    def test_pose_uniform_per_axis(self, open_city):
        rng = np.random.default_rng(72)
        pitch_range = (math.radians(-80.0), math.radians(-5.0))
        poses = [sample_free_pose(open_city, rng, (1.0, 50.0), pitch_range=pitch_range) for _ in range(10_000)]
        axes = {
            "x": ([p.position[0] for p in poses], (0.0, 100.0)),
            "y": ([p.position[1] for p in poses], (0.0, 100.0)),
            "z": ([p.position[2] for p in poses], (1.0, 50.0)),
            "yaw": ([p.yaw for p in poses], (0.0, 2.0 * math.pi)),
            "pitch": ([p.pitch for p in poses], pitch_range),
        }
        for name, (values, value_range) in axes.items():
            counts, _ = np.histogram(values, bins=20, range=value_range)
            assert counts.sum() == 10_000, name
            assert chisquare(counts).pvalue > 0.01, name


class TestMapLookup:
    """按地图名查找内置地图"""

    @pytest.mark.parametrize("name", ["mini_court", "mini_court.json"])
    def test_bare_name_uses_maps_dir(self, monkeypatch, name):
        monkeypatch.setattr(settings, "maps_dir", MAPS)
        city = load_map(name)
        assert city.name == "mini-court"

    def test_unknown_name(self, monkeypatch, tmp_path):
        monkeypatch.setattr(settings, "maps_dir", tmp_path)
        with pytest.raises(MapParseError):
            load_map("nowhere")

    def test_explicit_path_is_kept(self, monkeypatch, tmp_path):
        monkeypatch.setattr(settings, "maps_dir", MAPS)
        assert resolve_map_path(tmp_path / "mini_court.json") == tmp_path / "mini_court.json"
