"""
光线投射传感器服务
==================

地面真值传感器模拟：针孔 RGB-D 渲染、视线判定、视锥判定和伯努利目标检测。
所有观测 y = (y_rgb, y_depth, y_detect) 都来自这里。

设计思路:
1. 像素光线方向为 f + x·right − y·up（未归一化），参数 t 即为光轴深度
2. 光线与棱柱求交：墙面（二维射线-线段相交 + 高度区间）与屋顶（平面 + 点在多边形内）
3. 颜色为按建筑编号确定的平面色，地面与天空为固定色
4. 检测时每个目标固定消耗一次均匀随机数，保证并行与串行结果一致
"""

import colorsys
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import shapely
import structlog
from PIL import Image

from ..models.city import CityMap, GroundGraph
from ..models.sensing import CameraModel, Detection, DetectionModel, PoseSE3, RgbdFrame
from .citymap_service import segments_blocked

# 配置日志
logger = structlog.get_logger(__name__)

GROUND_COLOR = np.array([0.35, 0.35, 0.35])
SKY_COLOR = np.array([0.55, 0.75, 0.95])

HIT_SKY = -2
HIT_GROUND = -1

_GOLDEN = 0.618033988749895


def building_color(index: int) -> np.ndarray:
    """按建筑编号生成确定的平面颜色"""
    hue = (index * _GOLDEN) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.85))


def ray_directions(
    pose: PoseSE3, cam: CameraModel, width: Optional[int] = None, height: Optional[int] = None
) -> np.ndarray:
    """
    像素中心的光线方向 (H, W, 3)，沿光轴分量恒为 1

    Args:
        pose: 相机位姿
        cam: 相机模型
        width, height: 可选的渲染分辨率（视场不变）
    """
    if width is not None or height is not None:
        cam = cam.scaled(width or cam.width, height or cam.height)
    f = cam.focal
    u = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
    v = (np.arange(cam.height) + 0.5 - cam.height / 2.0) / f
    uu, vv = np.meshgrid(u, v, indexing="xy")
    return (
        pose.forward[None, None, :]
        + uu[..., None] * pose.right[None, None, :]
        - vv[..., None] * pose.up[None, None, :]
    )


def cast_rays(city: CityMap, origin: np.ndarray, dirs: np.ndarray, d_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    光线与场景求最近交点

    Args:
        origin: (3,) 光线起点
        dirs: (N, 3) 方向
        d_max: 最大量程（超出视为未命中）

    Returns:
        (t, hit): t 为参数距离（未命中为 inf），hit 为建筑编号 / HIT_GROUND / HIT_SKY
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    hit = np.full(n, HIT_SKY, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < 0.0, (city.ground_z - origin[2]) / dz, np.inf)
    ground = np.isfinite(t_ground) & (t_ground > 0.0)
    # 地面只铺在地图边界内，边界外视为天空
    gx = origin[0] + np.where(ground, t_ground, 0.0) * dirs[:, 0]
    gy = origin[1] + np.where(ground, t_ground, 0.0) * dirs[:, 1]
    ground &= city.contains_xy(np.column_stack([gx, gy]))
    t_best[ground] = t_ground[ground]
    hit[ground] = HIT_GROUND

    dxy = dirs[:, :2]
    for k, b in enumerate(city.buildings):
        # 墙面
        a, c = b.edges
        e = c - a
        denom = dxy[:, None, 0] * e[None, :, 1] - dxy[:, None, 1] * e[None, :, 0]
        ao = a[None, :, :] - origin[None, None, :2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ao[..., 0] * e[None, :, 1] - ao[..., 1] * e[None, :, 0]) / denom
            s = (ao[..., 0] * dxy[:, None, 1] - ao[..., 1] * dxy[:, None, 0]) / denom
        z = origin[2] + t * dz[:, None]
        valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0) & (z >= city.ground_z) & (z <= b.height)
        t_wall = np.where(valid, t, np.inf).min(axis=1)

        # 屋顶
        t_roof = np.full(n, np.inf)
        if origin[2] > b.height:
            down = dz < 0.0
            tr = (b.height - origin[2]) / dz[down]
            px = origin[0] + tr * dirs[down, 0]
            py = origin[1] + tr * dirs[down, 1]
            inside = shapely.intersects_xy(b.polygon, px, py)
            t_roof[np.nonzero(down)[0][inside]] = tr[inside]

        t_b = np.minimum(t_wall, t_roof)
        closer = t_b < t_best
        t_best[closer] = t_b[closer]
        hit[closer] = k

    far = t_best > d_max
    t_best[far] = np.inf
    hit[far] = HIT_SKY
    return t_best, hit


def render_rgbd(city: CityMap, pose: PoseSE3, cam: CameraModel, timestamp: int = 0) -> RgbdFrame:
    """
    渲染真值 RGB-D 帧

    Args:
        city: 地图
        pose: 相机位姿
        cam: 相机模型
        timestamp: 控制步编号

    Returns:
        RgbdFrame: 颜色 (H, W, 3) 和光轴深度 (H, W)，未命中深度为 d_max + 1
    """
    dirs = ray_directions(pose, cam)
    t, hit = cast_rays(city, pose.position, dirs.reshape(-1, 3), cam.d_max)

    palette = np.vstack([building_color(k) for k in range(len(city.buildings))] + [GROUND_COLOR, SKY_COLOR])
    # HIT_GROUND = -1 → 倒数第二行，HIT_SKY = -2 → 最后一行
    index = np.where(hit >= 0, hit, np.where(hit == HIT_GROUND, len(city.buildings), len(city.buildings) + 1))
    rgb = palette[index].reshape(cam.height, cam.width, 3)
    depth = np.where(np.isfinite(t), t, cam.no_hit_depth).reshape(cam.height, cam.width)
    return RgbdFrame(rgb=rgb, depth=depth, pose=pose, timestamp=timestamp)


def line_of_sight(city: CityMap, start, end) -> bool:
    """两点间开线段是否不与任何棱柱相交"""
    a = np.asarray(start, dtype=np.float64).reshape(1, 3)
    b = np.asarray(end, dtype=np.float64).reshape(1, 3)
    return not bool(segments_blocked(city, a, b)[0])


def camera_coordinates(pose: PoseSE3, points: np.ndarray) -> np.ndarray:
    """世界点 → 相机坐标 (x 右, y 上, z 光轴)"""
    rel = np.atleast_2d(np.asarray(points, dtype=np.float64)) - pose.position[None, :]
    return np.column_stack([rel @ pose.right, rel @ pose.up, rel @ pose.forward])


def in_frustum(pose: PoseSE3, cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """点是否在相机视锥内（光轴深度 0 < z < d_max）"""
    xyz = camera_coordinates(pose, points)
    tan_h = (cam.width / 2.0) / cam.focal
    tan_v = (cam.height / 2.0) / cam.focal
    zc = xyz[:, 2]
    return (
        (zc > 0.0)
        & (zc < cam.d_max)
        & (np.abs(xyz[:, 0]) <= zc * tan_h + 1e-12)
        & (np.abs(xyz[:, 1]) <= zc * tan_v + 1e-12)
    )


def project(pose: PoseSE3, cam: CameraModel, point) -> Tuple[float, float]:
    """世界点投影到像素坐标 (u, v)"""
    xc, yc, zc = camera_coordinates(pose, np.asarray(point)[None, :])[0]
    f = cam.focal
    return float(cam.width / 2.0 + f * xc / zc), float(cam.height / 2.0 - f * yc / zc)


def visible_points_gt(city: CityMap, pose: PoseSE3, cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """真值可见性：视锥内且视线无遮挡"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mask = in_frustum(pose, cam, points)
    idx = np.nonzero(mask)[0]
    if idx.size:
        starts = np.repeat(pose.position[None, :], idx.size, axis=0)
        mask[idx] = ~segments_blocked(city, starts, points[idx])
    return mask


def _ground_points(city: CityMap, xy: np.ndarray, height: float) -> np.ndarray:
    return np.column_stack([xy, np.full(xy.shape[0], city.ground_z + height)])


def visible_cells_gt(
    city: CityMap, pose: PoseSE3, cam: CameraModel, graph: GroundGraph, height: float = 0.0
) -> np.ndarray:
    """
    地面节点的真值可见掩码

    Returns:
        np.ndarray: (num_nodes,) 布尔数组
    """
    return visible_points_gt(city, pose, cam, _ground_points(city, graph.node_xy, height))


def visible_lattice_gt(
    city: CityMap, pose: PoseSE3, cam: CameraModel, graph: GroundGraph, height: float = 0.0
) -> np.ndarray:
    """完整格点上的真值可见掩码（建筑内格点恒为不可见）"""
    return visible_points_gt(city, pose, cam, _ground_points(city, graph.cell_xy(), height))


def detect_targets(
    city: CityMap,
    pose: PoseSE3,
    cam: CameraModel,
    targets: Sequence,
    rng: np.random.Generator,
    model: Optional[DetectionModel] = None,
    target_ids: Optional[Sequence[int]] = None,
) -> List[Detection]:
    """
    伯努利目标检测

    每个目标恰好消耗一次 rng.random()，无论是否可见。

    Args:
        targets: 目标平面坐标序列
        target_ids: 目标编号，默认按顺序编号
        model: 检测模型，默认 p=0.95

    Returns:
        List[Detection]: 检测结果（数据关联完全正确）
    """
    model = model or DetectionModel()
    xy = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    ids = list(target_ids) if target_ids is not None else list(range(xy.shape[0]))
    draws = rng.random(xy.shape[0])
    if xy.shape[0] == 0:
        return []

    pts = _ground_points(city, xy, model.target_height)
    visible = visible_points_gt(city, pose, cam, pts)
    ranges = np.linalg.norm(pts - pose.position[None, :], axis=1)
    prob = model.probability(ranges)

    detections = []
    for k in range(xy.shape[0]):
        if visible[k] and draws[k] < prob[k]:
            detections.append(
                Detection(
                    target_id=int(ids[k]),
                    ground_point=(float(xy[k, 0]), float(xy[k, 1])),
                    pixel=project(pose, cam, pts[k]),
                )
            )
    return detections


def export_frame(frame: RgbdFrame, out_dir: Path) -> Tuple[Path, Path]:
    """
    导出帧：RGB 为 PNG，深度为小端 float32 原始数组

    Returns:
        (png 路径, f32 路径)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"frame_{frame.timestamp:05d}"
    png = out_dir / f"{stem}.png"
    raw = out_dir / f"{stem}.f32"
    Image.fromarray(np.clip(np.rint(frame.rgb * 255.0), 0, 255).astype(np.uint8)).save(png)
    frame.depth.astype("<f4").tofile(raw)
    return png, raw


def load_depth(path: Path, width: int, height: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(height, width).astype(np.float64)
