"""
城市地图服务
============

提供地面真值场景的加载、自由空间查询、地面格点图构建和最短路径搜索。

设计思路:
1. 地图文件先做 JSON 解析（带行号），再做 Pydantic 结构校验，最后用 shapely 做几何校验
2. 所有棱柱碰撞判定统一走 segments_blocked（二维线段相交 + 高度判断，向量化）
3. 格点图的边要求整条连线不穿过任何建筑，避免斜穿墙角
4. 最短路径：从终点反向 Dijkstra（可选 A* 启发），再从起点贪心前进，
   在等价路径中选字典序最小的节点序列
"""

import heapq
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
import structlog
from pydantic import ValidationError as PydanticValidationError
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from shapely.geometry import Polygon, box

from ..core.config import settings
from ..core.exceptions import DomainError, MapParseError, MapValidationError, SamplingExhaustedError
from ..models.city import Building, CityMap, GroundGraph, PathResult
from ..models.sensing import PoseSE3
from ..schemas.map_file import MapFile

# 配置日志
logger = structlog.get_logger(__name__)

_PATH_TOL = 1e-9

_OFFSETS_8 = ((1, 0), (0, 1), (1, 1), (1, -1))
_OFFSETS_4 = ((1, 0), (0, 1))


def _line_of_offset(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _building_lines(text: str) -> List[int]:
    """第 k 个 "polygon" 键所在的行号，近似第 k 个建筑的位置"""
    lines = []
    start = 0
    while True:
        idx = text.find('"polygon"', start)
        if idx < 0:
            return lines
        lines.append(_line_of_offset(text, idx))
        start = idx + 1


def _key_line(text: str, key: str) -> Optional[int]:
    idx = text.find(f'"{key}"')
    return _line_of_offset(text, idx) if idx >= 0 else None


def build_city_map(spec: MapFile, line_hints: Optional[Sequence[int]] = None) -> CityMap:
    """
    由已通过结构校验的地图模式构建 CityMap，并做几何校验

    Args:
        spec: 地图文件模式
        line_hints: 每个建筑在源文件中的行号（用于报错）

    Returns:
        CityMap: 校验后的地图
    """
    region = box(*spec.bounds)
    buildings = []
    for k, b in enumerate(spec.buildings):
        line = line_hints[k] if line_hints and k < len(line_hints) else None
        poly = Polygon(b.polygon)
        if not poly.is_valid or poly.area <= 0.0:
            raise MapValidationError(
                f"Building {k} footprint is not a simple polygon", building=k, line=line
            )
        if not region.covers(poly):
            raise MapValidationError(f"Building {k} footprint leaves the map bounds", building=k, line=line)
        buildings.append(Building(polygon=poly, height=float(b.height)))

    return CityMap(
        buildings=tuple(buildings),
        bounds=tuple(float(v) for v in spec.bounds),
        altitude_cap=float(spec.altitude_cap),
        name=spec.name or "unnamed",
    )


def parse_map_text(text: str, source: str = "<string>") -> CityMap:
    """解析地图文件文本"""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise MapParseError(f"Malformed map file: {e.msg}", path=source, line=e.lineno, column=e.colno) from e

    if not isinstance(raw, dict):
        raise MapParseError("Map file must contain a JSON object", path=source, line=1)

    lines = _building_lines(text)
    try:
        spec = MapFile.model_validate(raw)
    except PydanticValidationError as e:
        err = e.errors()[0]
        loc = err.get("loc", ())
        line = None
        building = None
        if len(loc) >= 2 and loc[0] == "buildings" and isinstance(loc[1], int):
            building = loc[1]
            line = lines[building] if building < len(lines) else None
        elif loc:
            line = _key_line(text, str(loc[0]))
        where = ".".join(str(p) for p in loc)
        raise MapValidationError(f"Invalid map field '{where}': {err.get('msg')}", building=building, line=line) from e

    return build_city_map(spec, line_hints=lines)


def resolve_map_path(path: Union[str, Path]) -> Path:
    """只写地图名（如 mini_court）时到 settings.maps_dir 下查找，找不到则原样返回"""
    path = Path(path)
    if path.exists() or len(path.parts) != 1:
        return path
    for candidate in (settings.maps_dir / path, settings.maps_dir / path.with_suffix(".json")):
        if candidate.exists():
            return candidate
    return path


def load_map(path: Union[str, Path]) -> CityMap:
    """
    加载并校验地图文件

    Args:
        path: 地图文件路径，或内置地图名

    Returns:
        CityMap: 校验后的地图

    Raises:
        MapParseError: 文件不存在或不是合法 JSON
        MapValidationError: 违反几何约束
    """
    path = resolve_map_path(path)
    if not path.exists():
        raise MapParseError("Map file not found", path=str(path))
    city = parse_map_text(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("Map loaded", path=str(path), name=city.name, buildings=len(city.buildings))
    return city


def make_city_map(
    bounds: Tuple[float, float, float, float],
    buildings: Iterable[Tuple[Sequence[Tuple[float, float]], float]] = (),
    altitude_cap: float = 150.0,
    name: str = "inline",
) -> CityMap:
    """从 (多边形, 高度) 列表直接构造地图"""
    spec = MapFile(
        name=name,
        bounds=bounds,
        altitude_cap=altitude_cap,
        buildings=[{"polygon": list(poly), "height": h} for poly, h in buildings],
    )
    return build_city_map(spec)


def point_in_building(city: CityMap, p) -> bool:
    """点是否在某个建筑底面内（边界算在内）"""
    return bool(points_in_buildings(city, np.asarray(p, dtype=np.float64)[None, :2])[0])


def points_in_buildings(city: CityMap, xy: np.ndarray) -> np.ndarray:
    """批量底面包含判定，返回 (N,) 布尔数组"""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    inside = np.zeros(xy.shape[0], dtype=bool)
    for b in city.buildings:
        inside |= shapely.intersects_xy(b.polygon, xy[:, 0], xy[:, 1])
    return inside


def points_in_prisms(city: CityMap, pts: np.ndarray) -> np.ndarray:
    """三维点是否位于某个建筑棱柱内（底面内且 z < 高度）"""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    inside = np.zeros(pts.shape[0], dtype=bool)
    for b in city.buildings:
        low = pts[:, 2] < b.height
        if not low.any():
            continue
        idx = np.nonzero(low)[0]
        inside[idx] |= shapely.intersects_xy(b.polygon, pts[idx, 0], pts[idx, 1])
    return inside


def is_free(city: CityMap, point) -> bool:
    """三维点是否在自由空间（边界内、高度上限内、不在棱柱内）"""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not city.contains_xy(p[:2])[0] or p[2] <= city.ground_z or p[2] > city.altitude_cap:
        return False
    return not bool(points_in_prisms(city, p[None, :])[0])


def segments_blocked(city: CityMap, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """
    批量判定三维线段是否与任意建筑棱柱相交

    线段在某条墙边处穿过（0 < t < 1，且该处 z < 高度），或端点位于棱柱内，
    即视为被遮挡。恰好擦过屋顶平面不算遮挡。

    Args:
        starts: (M, 3) 起点
        ends: (M, 3) 终点

    Returns:
        np.ndarray: (M,) 布尔数组
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    m = starts.shape[0]
    blocked = np.zeros(m, dtype=bool)
    if m == 0 or not city.buildings:
        return blocked

    seg_lo = np.minimum(starts, ends)
    seg_hi = np.maximum(starts, ends)
    d = ends[:, :2] - starts[:, :2]

    for b in city.buildings:
        xmin, ymin, xmax, ymax = b.polygon.bounds
        cand = (
            ~blocked
            & (seg_lo[:, 2] < b.height)
            & (seg_hi[:, 0] >= xmin)
            & (seg_lo[:, 0] <= xmax)
            & (seg_hi[:, 1] >= ymin)
            & (seg_lo[:, 1] <= ymax)
        )
        if not cand.any():
            continue
        idx = np.nonzero(cand)[0]
        p0 = starts[idx]
        p1 = ends[idx]
        dd = d[idx]

        # 端点在棱柱内
        hit = np.zeros(idx.size, dtype=bool)
        for p in (p0, p1):
            low = p[:, 2] < b.height
            if low.any():
                hit[low] |= shapely.intersects_xy(b.polygon, p[low, 0], p[low, 1])

        # 与每条墙边求交 (M, V)
        a, c = b.edges
        e = c - a
        denom = dd[:, None, 0] * e[None, :, 1] - dd[:, None, 1] * e[None, :, 0]
        ap = a[None, :, :] - p0[:, None, :2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ap[..., 0] * e[None, :, 1] - ap[..., 1] * e[None, :, 0]) / denom
            s = (ap[..., 0] * dd[:, None, 1] - ap[..., 1] * dd[:, None, 0]) / denom
        z = p0[:, None, 2] + t * (p1[:, None, 2] - p0[:, None, 2])
        cross = (np.abs(denom) > 1e-12) & (t > 0.0) & (t < 1.0) & (s >= 0.0) & (s <= 1.0) & (z < b.height)
        hit |= cross.any(axis=1)

        blocked[idx] = hit
    return blocked


def segment_free(city: CityMap, start, end) -> bool:
    return not bool(segments_blocked(city, np.asarray(start)[None, :], np.asarray(end)[None, :])[0])


def build_ground_graph(city: CityMap, spacing: float = 10.0, connectivity: int = 8) -> GroundGraph:
    """
    构建地面格点图

    Args:
        city: 地图
        spacing: 格点间距（米）
        connectivity: 8 或 4 连通

    Returns:
        GroundGraph: 格点图（可能为空）
    """
    if spacing <= 0:
        raise DomainError("spacing must be positive", value=spacing)
    if connectivity not in (4, 8):
        raise DomainError("connectivity must be 4 or 8", value=connectivity)

    xmin, ymin, xmax, ymax = city.bounds
    nx = int(math.floor((xmax - xmin) / spacing + 1e-9)) + 1
    ny = int(math.floor((ymax - ymin) / spacing + 1e-9)) + 1

    proto = GroundGraph(
        spacing=float(spacing),
        origin=(float(xmin), float(ymin)),
        shape=(ny, nx),
        node_cells=np.zeros(0, dtype=np.int64),
        node_xy=np.zeros((0, 2)),
        neighbors=(),
        connectivity=connectivity,
    )
    cells_xy = proto.cell_xy()
    free = ~points_in_buildings(city, cells_xy)
    node_cells = np.nonzero(free)[0].astype(np.int64)
    node_xy = cells_xy[node_cells]
    cell_to_node = np.full(ny * nx, -1, dtype=np.int64)
    cell_to_node[node_cells] = np.arange(node_cells.size)

    # 候选边：只枚举正方向偏移，每条无向边检查一次
    pairs: List[Tuple[int, int, float]] = []
    offsets = _OFFSETS_8 if connectivity == 8 else _OFFSETS_4
    for di, dj in offsets:
        cost = spacing * math.hypot(di, dj)
        ii = node_cells % nx + di
        jj = node_cells // nx + dj
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        src = np.nonzero(ok)[0]
        dst = cell_to_node[jj[ok] * nx + ii[ok]]
        keep = dst >= 0
        src, dst = src[keep], dst[keep]
        if src.size == 0:
            continue
        a = np.column_stack([node_xy[src], np.zeros(src.size)])
        b = np.column_stack([node_xy[dst], np.zeros(dst.size)])
        clear = ~segments_blocked(city, a, b)
        pairs.extend((int(u), int(v), cost) for u, v in zip(src[clear], dst[clear]))

    adjacency: List[List[Tuple[int, float]]] = [[] for _ in range(node_cells.size)]
    for u, v, cost in pairs:
        adjacency[u].append((v, cost))
        adjacency[v].append((u, cost))

    node_index: Dict[Tuple[int, int], int] = {
        (int(c % nx), int(c // nx)): n for n, c in enumerate(node_cells)
    }
    graph = GroundGraph(
        spacing=float(spacing),
        origin=(float(xmin), float(ymin)),
        shape=(ny, nx),
        node_cells=node_cells,
        node_xy=node_xy,
        neighbors=tuple(tuple(sorted(nb)) for nb in adjacency),
        connectivity=connectivity,
        node_index=node_index,
    )
    logger.debug("Ground graph built", nodes=graph.num_nodes, edges=len(pairs), shape=graph.shape)
    return graph


def adjacency_matrix(graph: GroundGraph) -> csr_matrix:
    """图的稀疏邻接矩阵（边权为欧氏长度）"""
    rows, cols, vals = [], [], []
    for u, nbrs in enumerate(graph.neighbors):
        for v, w in nbrs:
            rows.append(u)
            cols.append(v)
            vals.append(w)
    n = graph.num_nodes
    return csr_matrix((vals, (rows, cols)), shape=(n, n))


def connected_labels(graph: GroundGraph) -> np.ndarray:
    """每个节点所属的连通分量编号"""
    if graph.num_nodes == 0:
        return np.zeros(0, dtype=np.int64)
    _, labels = connected_components(adjacency_matrix(graph), directed=False)
    return labels


def _reverse_search(graph: GroundGraph, src: int, dst: int, use_heuristic: bool) -> Dict[int, float]:
    """从 dst 出发的（A*）搜索，返回已确定的到 dst 的距离"""
    goal_xy = graph.node_xy[src]

    def h(n: int) -> float:
        if not use_heuristic:
            return 0.0
        return float(math.hypot(*(graph.node_xy[n] - goal_xy)))

    settled: Dict[int, float] = {}
    best: Dict[int, float] = {dst: 0.0}
    heap = [(h(dst), 0.0, dst)]
    bound = math.inf
    while heap:
        f, g, u = heapq.heappop(heap)
        if f > bound + _PATH_TOL * max(1.0, bound):
            break
        if u in settled:
            continue
        settled[u] = g
        if u == src:
            bound = g
        for v, w in graph.neighbors[u]:
            if v in settled:
                continue
            ng = g + w
            if ng < best.get(v, math.inf):
                best[v] = ng
                heapq.heappush(heap, (ng + h(v), ng, v))
    return settled


def shortest_path(graph: GroundGraph, src: int, dst: int, heuristic: bool = False) -> PathResult:
    """
    最短路径（欧氏边长），等价路径中选节点编号字典序最小的一条

    Args:
        graph: 地面格点图
        src: 起点节点
        dst: 终点节点
        heuristic: 使用欧氏距离启发（A*），结果与 Dijkstra 相同

    Returns:
        PathResult: 不可达时 reachable 为 False
    """
    n = graph.num_nodes
    if not (0 <= src < n and 0 <= dst < n):
        raise DomainError("node id out of range", value=(src, dst))
    if src == dst:
        return PathResult(nodes=(src,), cost=0.0)

    dist = _reverse_search(graph, src, dst, heuristic)
    if src not in dist:
        return PathResult.unreachable()

    path = [src]
    u = src
    while u != dst:
        du = dist[u]
        tol = _PATH_TOL * max(1.0, du)
        nxt = None
        for v, w in graph.neighbors[u]:
            dv = dist.get(v)
            if dv is not None and abs(du - (w + dv)) <= tol and (nxt is None or v < nxt):
                nxt = v
        path.append(nxt)
        u = nxt
    return PathResult(nodes=tuple(path), cost=float(dist[src]))


def path_length(graph: GroundGraph, nodes: Sequence[int]) -> float:
    return float(sum(np.linalg.norm(graph.node_xy[b] - graph.node_xy[a]) for a, b in zip(nodes, nodes[1:])))


def sample_free_position(
    city: CityMap,
    rng: np.random.Generator,
    z_range: Tuple[float, float],
    center: Optional[np.ndarray] = None,
    radius: Optional[float] = None,
    max_attempts: int = 1000,
) -> np.ndarray:
    """
    在自由空间中均匀拒绝采样一个三维位置

    每次尝试固定消耗 3 个均匀随机数。

    Raises:
        SamplingExhaustedError: 达到尝试上限
    """
    z_lo, z_hi = float(z_range[0]), float(z_range[1])
    if not (0.0 < z_lo <= z_hi <= city.altitude_cap + 1e-9):
        raise DomainError("z_range must lie within (0, altitude_cap]", value=z_range)

    xmin, ymin, xmax, ymax = city.bounds
    if center is not None and radius is not None:
        cx, cy = float(center[0]), float(center[1])
        xmin, xmax = max(xmin, cx - radius), min(xmax, cx + radius)
        ymin, ymax = max(ymin, cy - radius), min(ymax, cy + radius)

    lo = np.array([xmin, ymin, z_lo])
    hi = np.array([xmax, ymax, z_hi])
    for _ in range(max_attempts):
        p = lo + rng.random(3) * (hi - lo)
        if not points_in_prisms(city, p[None, :])[0]:
            return p
    raise SamplingExhaustedError(attempts=max_attempts)


def sample_free_pose(
    city: CityMap,
    rng: np.random.Generator,
    z_range: Tuple[float, float],
    pitch_range: Tuple[float, float] = (math.radians(-80.0), math.radians(-5.0)),
    center: Optional[np.ndarray] = None,
    radius: Optional[float] = None,
    max_attempts: int = 1000,
) -> PoseSE3:
    """
    采样一个自由空间位姿：位置均匀、偏航 [0, 2π) 均匀、俯仰在给定范围内均匀

    Args:
        city: 地图
        rng: 随机数生成器
        z_range: 高度范围 [min, max]
        pitch_range: 俯仰范围（弧度）

    Returns:
        PoseSE3: 采样位姿
    """
    position = sample_free_position(city, rng, z_range, center, radius, max_attempts)
    yaw = float(rng.uniform(0.0, 2.0 * math.pi))
    pitch = float(rng.uniform(pitch_range[0], pitch_range[1]))
    return PoseSE3(position=position, yaw=yaw, pitch=pitch)
