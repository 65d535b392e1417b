"""
飞行轨迹服务
============

航点之间的平滑运动：三维自由空间路由、最小 snap 七次多项式分段、
俯仰线性插值和末端 2π 偏航扫描。

设计思路:
1. 路由：26 连通三维格点（边做棱柱碰撞检测，按地图缓存）+ 起终点虚拟节点，
   scipy csgraph Dijkstra 求最短路后贪心捷径化
2. 每段为静止到静止的最小 snap 多项式（8 个边界条件唯一确定七次多项式），
   中间航点静止使运动沿直线进行，采样点不会偏离无碰撞的折线
3. 时长：梯形速度曲线与七次多项式峰值速度约束（2.1875·L / v_max）取大
4. 末端扫描：偏航以最小 snap 多项式转过 2π，俯仰做一次 ±15° 正弦调制
"""

import math
from functools import lru_cache
from math import factorial
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from ..core.exceptions import SingularSystemError
from ..models.city import CityMap
from ..models.sensing import PoseSE3
from ..models.trajectory import FLAT_AXES, Poly7Segment, TrajectoryPlan
from .citymap_service import points_in_prisms, segments_blocked

# 配置日志
logger = structlog.get_logger(__name__)

NUM_COEFFS = 8
# 静止到静止七次多项式的峰值速度 / 平均速度
SEPTIC_PEAK_SPEED = 35.0 / 16.0


def snap_cost_matrix(duration: float) -> np.ndarray:
    """∫₀ᵀ snap² dt 的 8×8 二次型矩阵"""
    q = np.zeros((NUM_COEFFS, NUM_COEFFS))
    for i in range(4, NUM_COEFFS):
        for j in range(4, NUM_COEFFS):
            ci = factorial(i) / factorial(i - 4)
            cj = factorial(j) / factorial(j - 4)
            q[i, j] = ci * cj * duration ** (i + j - 7) / (i + j - 7)
    return q


def boundary_matrix(duration: float) -> np.ndarray:
    """两端位置、速度、加速度、jerk 的 8×8 约束矩阵"""
    m = np.zeros((NUM_COEFFS, NUM_COEFFS))
    for d in range(4):
        m[d, d] = factorial(d)
        for k in range(d, NUM_COEFFS):
            m[4 + d, k] = factorial(k) / factorial(k - d) * duration ** (k - d)
    return m


def min_snap_segment(bc_start, bc_end, duration: float) -> Poly7Segment:
    """
    满足两端 8 个边界条件的七次多项式（即最小 snap 解）

    Args:
        bc_start: (A, 4) 或 (4,) 起点的 [位置, 速度, 加速度, jerk]
        bc_end: 终点边界条件，形状同上
        duration: 时长 T

    Raises:
        SingularSystemError: T 过小导致系统奇异
    """
    start = np.atleast_2d(np.asarray(bc_start, dtype=np.float64))
    end = np.atleast_2d(np.asarray(bc_end, dtype=np.float64))
    if start.shape != end.shape or start.shape[1] != 4:
        raise ValueError("boundary conditions must have shape (A, 4)")
    if not duration > 1e-6:
        raise SingularSystemError("Segment duration too short", duration=duration)

    m = boundary_matrix(duration)
    rhs = np.concatenate([start, end], axis=1).T  # (8, A)
    try:
        coeffs = np.linalg.solve(m, rhs).T
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(str(e), duration=duration) from e
    if np.linalg.cond(m) > 1e15:
        raise SingularSystemError("Ill-conditioned boundary system", duration=duration)

    q = snap_cost_matrix(duration)
    cost = float(sum(c @ q @ c for c in coeffs))
    return Poly7Segment(coeffs=coeffs, duration=float(duration), snap_cost=cost)


def rest_to_rest(start: Sequence[float], end: Sequence[float], duration: float) -> Poly7Segment:
    start = np.asarray(start, dtype=np.float64).reshape(-1)
    end = np.asarray(end, dtype=np.float64).reshape(-1)
    zeros = np.zeros((start.size, 3))
    return min_snap_segment(np.column_stack([start, zeros]), np.column_stack([end, zeros]), duration)


def segment_duration(length: float, speed_limit: float = 15.0, accel_limit: float = 5.0) -> float:
    """梯形速度曲线时长，并保证七次多项式峰值速度不超过上限"""
    if length <= 0.0:
        return 0.0
    if length >= speed_limit**2 / accel_limit:
        trapezoid = length / speed_limit + speed_limit / accel_limit
    else:
        trapezoid = 2.0 * math.sqrt(length / accel_limit)
    return max(trapezoid, SEPTIC_PEAK_SPEED * length / speed_limit)


# ---------------------------------------------------------------------------
# 三维路由
# ---------------------------------------------------------------------------

_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]


@lru_cache(maxsize=8)
def _route_lattice(city: CityMap, spacing: float, min_altitude: float):
    """自由空间格点与无碰撞边（按地图缓存）"""
    xmin, ymin, xmax, ymax = city.bounds
    xs = np.arange(xmin, xmax + 1e-9, spacing)
    ys = np.arange(ymin, ymax + 1e-9, spacing)
    zs = np.arange(min_altitude, city.altitude_cap + 1e-9, spacing)
    if zs.size == 0:
        zs = np.array([city.altitude_cap])
    shape = (xs.size, ys.size, zs.size)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    points = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    free = ~points_in_prisms(city, points)
    ids = np.full(points.shape[0], -1, dtype=np.int64)
    ids[free] = np.arange(free.sum())
    nodes = points[free]

    rows, cols, wts = [], [], []
    grid = np.stack(np.unravel_index(np.nonzero(free)[0], shape), axis=1)
    for off in _OFFSETS_26:
        nb = grid + np.asarray(off)
        ok = np.all((nb >= 0) & (nb < np.asarray(shape)), axis=1)
        src = np.nonzero(ok)[0]
        dst = ids[np.ravel_multi_index(nb[ok].T, shape)]
        keep = dst >= 0
        src, dst = src[keep], dst[keep]
        if src.size == 0:
            continue
        clear = ~segments_blocked(city, nodes[src], nodes[dst])
        rows.append(src[clear])
        cols.append(dst[clear])
        wts.append(np.full(int(clear.sum()), spacing * math.sqrt(sum(o * o for o in off))))

    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    wts = np.concatenate(wts) if wts else np.zeros(0)
    logger.debug("Route lattice built", nodes=nodes.shape[0], edges=rows.size, spacing=spacing)
    return nodes, rows, cols, wts


def _connect(city: CityMap, nodes: np.ndarray, point: np.ndarray, spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """虚拟节点与附近格点的无碰撞连接"""
    d = np.linalg.norm(nodes - point[None, :], axis=1)
    for radius in (1.8 * spacing, 3.5 * spacing, 7.0 * spacing):
        near = np.nonzero(d <= radius)[0]
        if near.size == 0:
            continue
        clear = ~segments_blocked(city, np.repeat(point[None, :], near.size, axis=0), nodes[near])
        if clear.any():
            return near[clear], d[near[clear]]
    return np.zeros(0, dtype=np.int64), np.zeros(0)


def shortcut(city: CityMap, path: List[np.ndarray]) -> List[np.ndarray]:
    """贪心捷径：从当前点直接连到最远的可直达点"""
    if len(path) <= 2:
        return list(path)
    pts = np.asarray(path)
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        cand = np.arange(i + 1, len(pts))
        clear = ~segments_blocked(city, np.repeat(pts[i][None, :], cand.size, axis=0), pts[cand])
        reachable = cand[clear]
        j = int(reachable.max()) if reachable.size else i + 1
        out.append(pts[j])
        i = j
    return out


def route_3d(
    city: CityMap,
    start,
    goal,
    lattice_spacing: float = 20.0,
    min_altitude: Optional[float] = None,
) -> Optional[List[np.ndarray]]:
    """
    三维自由空间最短航线

    Args:
        city: 地图
        start, goal: 三维点（自由空间内）
        lattice_spacing: 路由格点间距
        min_altitude: 格点最低高度，默认半个间距

    Returns:
        航点列表；不可达时返回 None
    """
    start = np.asarray(start, dtype=np.float64).reshape(3)
    goal = np.asarray(goal, dtype=np.float64).reshape(3)
    if np.linalg.norm(goal - start) < 1e-9:
        return [start]
    if not segments_blocked(city, start[None, :], goal[None, :])[0]:
        return [start, goal]

    min_altitude = lattice_spacing / 2.0 if min_altitude is None else min_altitude
    nodes, rows, cols, wts = _route_lattice(city, float(lattice_spacing), float(min_altitude))
    n = nodes.shape[0]
    s_id, g_id = n, n + 1
    s_nb, s_w = _connect(city, nodes, start, lattice_spacing)
    g_nb, g_w = _connect(city, nodes, goal, lattice_spacing)
    if s_nb.size == 0 or g_nb.size == 0:
        logger.warning("Route endpoints cannot reach the lattice", start=start.tolist(), goal=goal.tolist())
        return None

    r = np.concatenate([rows, np.full(s_nb.size, s_id), np.full(g_nb.size, g_id)])
    c = np.concatenate([cols, s_nb, g_nb])
    w = np.concatenate([wts, s_w, g_w])
    graph = coo_matrix((w, (r, c)), shape=(n + 2, n + 2)).tocsr()
    dist, pred = dijkstra(graph, directed=False, indices=s_id, return_predecessors=True)
    if not np.isfinite(dist[g_id]):
        logger.warning("Goal unreachable through free space", goal=goal.tolist())
        return None

    chain = [g_id]
    while chain[-1] != s_id:
        chain.append(int(pred[chain[-1]]))
    chain.reverse()
    path = [start] + [nodes[k] for k in chain[1:-1]] + [goal]
    return shortcut(city, path)


# ---------------------------------------------------------------------------
# 计划与采样
# ---------------------------------------------------------------------------


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def build_plan(
    city: CityMap,
    start: PoseSE3,
    goal: PoseSE3,
    speed_limit: float = 15.0,
    accel_limit: float = 5.0,
    route_spacing: float = 20.0,
    scan_duration: float = 8.0,
    scan_fraction: float = 1.0 / 3.0,
    scan_pitch_amplitude: float = math.radians(15.0),
) -> TrajectoryPlan:
    """
    由起点和目标位姿生成完整计划：航线 → 每段静止到静止的最小 snap 多项式 → 末端扫描

    航线不可达时原地执行扫描。
    """
    route = route_3d(city, start.position, goal.position, route_spacing)
    metadata = {}
    if route is None:
        route = [start.position]
        metadata["unreachable"] = True
        goal = PoseSE3(position=start.position, yaw=goal.yaw, pitch=goal.pitch)

    lengths = [float(np.linalg.norm(b - a)) for a, b in zip(route, route[1:])]
    total = sum(lengths)
    dyaw = _wrap(goal.yaw - start.yaw)
    segments: List[Poly7Segment] = []
    travelled = 0.0
    for a, b, length in zip(route, route[1:], lengths):
        if length <= 1e-9:
            continue
        yaw_a = start.yaw + dyaw * travelled / total
        travelled += length
        yaw_b = start.yaw + dyaw * travelled / total
        segments.append(
            rest_to_rest(
                np.append(a, yaw_a),
                np.append(b, yaw_b),
                segment_duration(length, speed_limit, accel_limit),
            )
        )

    end_yaw = start.yaw + dyaw if segments else start.yaw
    scan = rest_to_rest([end_yaw], [end_yaw + 2.0 * math.pi], scan_duration)
    metadata["route_length"] = total
    return TrajectoryPlan(
        route=route,
        segments=segments,
        start_pitch=start.pitch,
        end_pitch=goal.pitch,
        scan=scan,
        scan_center=np.asarray(route[-1], dtype=np.float64),
        scan_pitch_amplitude=scan_pitch_amplitude,
        scan_fraction=scan_fraction,
        goal=goal,
        metadata=metadata,
    )


def plan_from_config(city: CityMap, start: PoseSE3, goal: PoseSE3, cfg) -> TrajectoryPlan:
    """由 FlightConfig 生成计划"""
    return build_plan(
        city,
        start,
        goal,
        speed_limit=cfg.speed_limit,
        accel_limit=cfg.accel_limit,
        route_spacing=cfg.route_spacing,
        scan_duration=cfg.scan_duration,
        scan_fraction=cfg.scan_fraction,
        scan_pitch_amplitude=math.radians(cfg.scan_pitch_amplitude_deg),
    )


def evaluate_transit(plan: TrajectoryPlan, t: float, derivative: int = 0) -> np.ndarray:
    """转场部分在全局时间 t 处的平坦输出 (x, y, z, yaw)"""
    remaining = float(np.clip(t, 0.0, plan.transit_duration))
    for seg in plan.segments:
        if remaining <= seg.duration or seg is plan.segments[-1]:
            return seg.evaluate(min(remaining, seg.duration), derivative)
        remaining -= seg.duration
    raise ValueError("plan has no transit segments")


def _clamp_pitch(p: float) -> float:
    return float(np.clip(p, -math.pi / 2.0, math.pi / 2.0))


def _step_split(plan: TrajectoryPlan, n_steps: int) -> Tuple[int, int]:
    # 只有一步时跳过转场，直接在终点完成扫描
    if not plan.has_transit or n_steps == 1:
        return 0, n_steps
    n_scan = int(round(n_steps * plan.scan_fraction))
    n_scan = min(max(n_scan, 1), n_steps - 1)
    return n_steps - n_scan, n_scan


def sample_plan(plan: TrajectoryPlan, n_steps: int) -> List[PoseSE3]:
    """
    计划的控制步位姿序列

    转场占前 (1 − scan_fraction) 的步数，在转场时间上均匀采样，俯仰线性插值；
    其余步数执行末端扫描，最后一步偏航恰好转过 2π。
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    n_transit, n_scan = _step_split(plan, n_steps)
    poses: List[PoseSE3] = []

    transit_T = plan.transit_duration
    for k in range(n_transit):
        frac = (k + 1) / n_transit
        x, y, z, yaw = evaluate_transit(plan, frac * transit_T)
        pitch = plan.start_pitch + frac * (plan.end_pitch - plan.start_pitch)
        poses.append(PoseSE3(position=np.array([x, y, z]), yaw=float(yaw), pitch=_clamp_pitch(pitch)))

    if n_scan:
        scan = plan.scan
        for k in range(n_scan):
            frac = (k + 1) / n_scan
            yaw = float(scan.evaluate(frac * scan.duration)[0])
            pitch = plan.end_pitch + plan.scan_pitch_amplitude * math.sin(2.0 * math.pi * frac)
            poses.append(PoseSE3(position=plan.scan_center.copy(), yaw=yaw, pitch=_clamp_pitch(pitch)))
    return poses


def control_step_duration(plan: TrajectoryPlan, n_steps: int) -> float:
    """转场部分每个控制步对应的时间"""
    n_transit, _ = _step_split(plan, n_steps)
    return plan.transit_duration / n_transit if n_transit else 0.0


def plan_frame(plan: TrajectoryPlan, n_steps: int, planning_step: int = 0) -> pd.DataFrame:
    """计划导出表 (t, x, y, z, yaw, pitch)"""
    poses = sample_plan(plan, n_steps)
    n_transit, n_scan = _step_split(plan, n_steps)
    times = [plan.transit_duration * (k + 1) / n_transit for k in range(n_transit)]
    scan_T = plan.scan.duration if plan.scan is not None else 0.0
    times += [plan.transit_duration + scan_T * (k + 1) / n_scan for k in range(n_scan)]
    return pd.DataFrame(
        {
            "planning_step": planning_step,
            "t": times,
            "x": [p.position[0] for p in poses],
            "y": [p.position[1] for p in poses],
            "z": [p.position[2] for p in poses],
            "yaw": [p.yaw for p in poses],
            "pitch": [p.pitch for p in poses],
        }
    )


def append_plan_csv(path: Path, plan: TrajectoryPlan, n_steps: int, planning_step: int) -> Path:
    path = Path(path)
    plan_frame(plan, n_steps, planning_step).to_csv(path, mode="a", header=not path.exists(), index=False)
    return path


__all__ = [
    "FLAT_AXES",
    "build_plan",
    "min_snap_segment",
    "route_3d",
    "sample_plan",
]
