"""
城市地图模型
============

定义地面真值场景：建筑底面多边形拉伸成的棱柱、地图边界、飞行高度上限，
以及目标滤波器和目标策略共用的地面格点图。

设计思路:
1. CityMap / GroundGraph 构造后不可变，可被多个工作进程并发读取
2. 几何判定使用 shapely，多边形在构造时预处理（prepare）
3. 格点图同时保存完整格点（lattice）和自由节点（nodes），
   滤波器定义在完整格点上，图搜索定义在自由节点上
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import shapely
from shapely.geometry import Polygon

Bounds2D = Tuple[float, float, float, float]


@dataclass(frozen=True)
class Building:
    """建筑：底面多边形 + 高度"""

    polygon: Polygon
    height: float

    @property
    def vertices(self) -> np.ndarray:
        """闭合前的顶点数组 (V, 2)"""
        return np.asarray(self.polygon.exterior.coords, dtype=np.float64)[:-1]

    @property
    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """边的起点和终点 (V, 2), (V, 2)"""
        v = self.vertices
        return v, np.roll(v, -1, axis=0)


@dataclass(frozen=True, eq=False)
class CityMap:
    """地面真值场景 ξ"""

    buildings: Tuple[Building, ...]
    bounds: Bounds2D
    altitude_cap: float
    ground_z: float = 0.0
    name: str = "unnamed"

    def __post_init__(self):
        for b in self.buildings:
            shapely.prepare(b.polygon)

    @property
    def width(self) -> float:
        return self.bounds[2] - self.bounds[0]

    @property
    def depth(self) -> float:
        return self.bounds[3] - self.bounds[1]

    @property
    def max_height(self) -> float:
        return max((b.height for b in self.buildings), default=0.0)

    @property
    def center(self) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.bounds
        return np.array([(xmin + xmax) / 2.0, (ymin + ymax) / 2.0])

    def contains_xy(self, xy: np.ndarray) -> np.ndarray:
        """点是否在地图边界内（含边界）"""
        xy = np.atleast_2d(xy)
        xmin, ymin, xmax, ymax = self.bounds
        return (
            (xy[:, 0] >= xmin) & (xy[:, 0] <= xmax) & (xy[:, 1] >= ymin) & (xy[:, 1] <= ymax)
        )


@dataclass(frozen=True, eq=False)
class GroundGraph:
    """地面格点图

    lattice 是覆盖边界的完整规则格点（行优先，先 y 后 x），
    nodes 是其中不在建筑内的子集；节点编号按格点顺序递增。
    """

    spacing: float
    origin: Tuple[float, float]
    shape: Tuple[int, int]  # (ny, nx)
    node_cells: np.ndarray  # 每个节点对应的格点下标 (N,)
    node_xy: np.ndarray  # (N, 2)
    neighbors: Tuple[Tuple[Tuple[int, float], ...], ...]
    connectivity: int = 8
    node_index: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return int(self.node_xy.shape[0])

    @property
    def num_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def free_cells(self) -> np.ndarray:
        """完整格点上的自由掩码（展平）"""
        mask = np.zeros(self.num_cells, dtype=bool)
        mask[self.node_cells] = True
        return mask

    def cell_xy(self) -> np.ndarray:
        """所有格点坐标 (ny*nx, 2)，行优先"""
        ny, nx = self.shape
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        xs = self.origin[0] + ii.ravel() * self.spacing
        ys = self.origin[1] + jj.ravel() * self.spacing
        return np.column_stack([xs, ys]).astype(np.float64)

    def cell_of(self, i: int, j: int) -> int:
        """格点坐标 (i, j) → 展平下标"""
        return j * self.shape[1] + i

    def lattice_coord(self, node: int) -> Tuple[int, int]:
        """节点编号 → 格点坐标 (i, j)"""
        cell = int(self.node_cells[node])
        return cell % self.shape[1], cell // self.shape[1]

    def node_at(self, i: int, j: int) -> Optional[int]:
        """格点坐标 → 节点编号（不是自由节点时为 None）"""
        return self.node_index.get((i, j))

    def nearest_cell(self, xy) -> int:
        """距离给定平面点最近的格点（不论是否自由）"""
        ny, nx = self.shape
        i = int(np.clip(np.rint((xy[0] - self.origin[0]) / self.spacing), 0, nx - 1))
        j = int(np.clip(np.rint((xy[1] - self.origin[1]) / self.spacing), 0, ny - 1))
        return self.cell_of(i, j)

    def nearest_node(self, xy) -> Optional[int]:
        """距离给定平面点最近的自由节点"""
        if self.num_nodes == 0:
            return None
        d2 = np.sum((self.node_xy - np.asarray(xy, dtype=np.float64)[None, :2]) ** 2, axis=1)
        return int(np.argmin(d2))


@dataclass(frozen=True)
class PathResult:
    """最短路径结果；不可达时 nodes 为 None"""

    nodes: Optional[Tuple[int, ...]]
    cost: float

    @property
    def reachable(self) -> bool:
        return self.nodes is not None

    @classmethod
    def unreachable(cls) -> "PathResult":
        return cls(nodes=None, cost=float("inf"))

    def as_list(self) -> List[int]:
        return list(self.nodes or ())
