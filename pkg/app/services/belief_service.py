"""
目标信念服务
============

多目标网格贝叶斯滤波：均匀先验、角点逃逸运动预测、检测/未检测量测更新、
一个备用滤波器的目标数管理，以及用于指标的位置估计。

设计思路:
1. 权重定义在完整地面格点 (ny, nx) 上，support 掩码外的格点始终为 0
2. 预测 = 卷积 + 反射规则：落到不可承载格点或边界外的质量留在原格点
   out = free · (w ∗ k) + w · (1 − free ⋆ k)
3. 检测似然为 1 格标准差的离散高斯，3 格以外为 0
4. 质量归零时按文档规则恢复，保证任何操作后权重和为 1
"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import pandas as pd
import structlog
from scipy import ndimage

from ..core.exceptions import DomainError
from ..models.belief import FilterBank, GridFilter, MotionKernel
from ..models.city import GroundGraph
from ..models.sensing import Detection

# 配置日志
logger = structlog.get_logger(__name__)

BUMP_SIGMA_CELLS = 1.0
BUMP_CUTOFF_CELLS = 3.0


def support_mask(graph: GroundGraph, map_known: bool = True) -> np.ndarray:
    """可承载概率质量的格点：已知地图时为自由节点，否则为全部格点"""
    if map_known:
        return graph.free_cells
    return np.ones(graph.num_cells, dtype=bool)


def _uniform_over(mask: np.ndarray) -> np.ndarray:
    w = mask.astype(np.float64)
    return w / w.sum()


def init_uniform(graph: GroundGraph, map_known: bool = True, target_id: Optional[int] = None) -> GridFilter:
    """
    均匀先验

    Args:
        graph: 地面格点图
        map_known: 已知地图时只在自由节点上均匀

    Raises:
        DomainError: 图为空
    """
    support = support_mask(graph, map_known)
    if graph.num_cells == 0 or not support.any():
        raise DomainError("Cannot initialise a filter on an empty graph")
    return GridFilter(weights=_uniform_over(support), support=support, target_id=target_id)


def _normalized(filt: GridFilter, weights: np.ndarray) -> GridFilter:
    total = weights.sum()
    if total <= 0.0 or not np.isfinite(total):
        logger.warning("Filter mass vanished, resetting to uniform", target_id=filt.target_id)
        return filt.with_weights(_uniform_over(filt.support))
    return filt.with_weights(weights / total)


def predict(filt: GridFilter, kernel: MotionKernel, graph: GroundGraph) -> GridFilter:
    """
    运动预测：与运动核卷积，不可达的质量留在原格点，再归一化
    """
    if kernel.stencil.shape == (1, 1):
        return filt
    shape = graph.shape
    w = filt.weights.reshape(shape)
    free = filt.support.reshape(shape).astype(np.float64)
    k = kernel.stencil
    moved = ndimage.convolve(w, k, mode="constant", cval=0.0)
    kept = 1.0 - ndimage.correlate(free, k, mode="constant", cval=0.0)
    out = free * moved + w * kept
    out = np.where(filt.support.reshape(shape), np.maximum(out, 0.0), 0.0)
    return _normalized(filt, out.reshape(-1))


def transition_matrix(support: np.ndarray, kernel: MotionKernel, shape) -> np.ndarray:
    """显式转移矩阵 P[目标格, 源格]（用于核对，只适合小网格）"""
    ny, nx = shape
    n = ny * nx
    r = kernel.radius
    p = np.zeros((n, n))
    for j in range(ny):
        for i in range(nx):
            src = j * nx + i
            if not support[src]:
                continue
            for dj in range(-r, r + 1):
                for di in range(-r, r + 1):
                    mass = kernel.stencil[dj + r, di + r]
                    if mass == 0.0:
                        continue
                    jj, ii = j + dj, i + di
                    if 0 <= jj < ny and 0 <= ii < nx and support[jj * nx + ii]:
                        p[jj * nx + ii, src] += mass
                    else:
                        p[src, src] += mass
    return p


def detection_likelihood(graph: GroundGraph, ground_point, support: Optional[np.ndarray] = None) -> np.ndarray:
    """以最近格点为中心的离散高斯似然（3 格以外为 0）"""
    center = graph.nearest_cell(ground_point)
    ny, nx = graph.shape
    ci, cj = center % nx, center // nx
    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    d2 = ((ii - ci) ** 2 + (jj - cj) ** 2).reshape(-1).astype(np.float64)
    like = np.where(d2 <= BUMP_CUTOFF_CELLS**2, np.exp(-d2 / (2.0 * BUMP_SIGMA_CELLS**2)), 0.0)
    if support is not None:
        like = like * support
    return like


def update_detection(filt: GridFilter, detection: Detection, graph: GroundGraph) -> GridFilter:
    """
    检测更新：先验与高斯似然逐点相乘后归一化；
    似然覆盖范围内先验质量为 0 时，直接重置为似然本身
    """
    like = detection_likelihood(graph, detection.ground_point, filt.support)
    post = filt.weights * like
    if post.sum() > 0.0:
        return filt.with_weights(post / post.sum())

    logger.debug("Detection outside prior support, resetting to likelihood", target_id=detection.target_id)
    if like.sum() > 0.0:
        return filt.with_weights(like / like.sum())
    # 中心附近没有可承载格点：退化为最近的可承载格点
    cells = np.nonzero(filt.support)[0]
    xy = graph.cell_xy()[cells]
    nearest = cells[int(np.argmin(np.sum((xy - np.asarray(detection.ground_point)) ** 2, axis=1)))]
    w = np.zeros_like(filt.weights)
    w[nearest] = 1.0
    return filt.with_weights(w)


def update_no_detection(
    filt: GridFilter, visible_mask: np.ndarray, p_d: Union[float, np.ndarray] = 0.95
) -> GridFilter:
    """
    未检测更新：可见格点权重乘以 (1 − p_d)，归一化

    全部质量可见且 p_d = 1 时，重置为不可见部分上的均匀分布；
    不可见部分为空时重置为整个支撑集上的均匀分布。
    """
    visible = np.asarray(visible_mask, dtype=bool)
    if visible.shape != filt.weights.shape:
        raise DomainError("visibility mask does not match the lattice", value=visible.shape)
    if not visible.any():
        return filt
    post = filt.weights * np.where(visible, 1.0 - np.asarray(p_d, dtype=np.float64), 1.0)
    total = post.sum()
    if total > 0.0:
        return filt.with_weights(post / total)

    hidden = filt.support & ~visible
    target = hidden if hidden.any() else filt.support
    logger.debug("All filter mass observed, reinitialising", target_id=filt.target_id)
    return filt.with_weights(_uniform_over(target))


def estimate(filt: GridFilter, graph: GroundGraph) -> np.ndarray:
    """后验均值（平面坐标）"""
    return filt.weights @ graph.cell_xy()


def visible_mass(filt: GridFilter, visible_mask: np.ndarray) -> float:
    return float(filt.weights[np.asarray(visible_mask, dtype=bool)].sum())


def new_bank(graph: GroundGraph, map_known: bool = True) -> FilterBank:
    """只含一个备用滤波器的滤波器组"""
    return FilterBank(assigned={}, spare=init_uniform(graph, map_known))


def bank_observe(bank: FilterBank, detections: Iterable[Detection], graph: GroundGraph) -> FilterBank:
    """
    检测更新整个滤波器组

    已知编号更新其滤波器；新编号占用备用滤波器（保留它积累的未检测信息），
    再用这次检测更新，随后创建新的均匀备用滤波器。
    """
    assigned: Dict[int, GridFilter] = dict(bank.assigned)
    spare = bank.spare
    for det in sorted(detections, key=lambda d: d.target_id):
        if det.target_id in assigned:
            assigned[det.target_id] = update_detection(assigned[det.target_id], det, graph)
            continue
        assigned[det.target_id] = update_detection(spare.assign(det.target_id), det, graph)
        spare = GridFilter(weights=_uniform_over(spare.support), support=spare.support)
        logger.info("New target discovered", target_id=det.target_id, filters=len(assigned) + 1)
    return FilterBank(assigned=assigned, spare=spare)


def bank_update_misses(
    bank: FilterBank,
    detected_ids: Iterable[int],
    visible_mask: np.ndarray,
    p_d: Union[float, np.ndarray] = 0.95,
) -> FilterBank:
    """本控制步未检测到的目标（含备用滤波器）做未检测更新"""
    detected = set(int(i) for i in detected_ids)
    assigned = {
        tid: (f if tid in detected else update_no_detection(f, visible_mask, p_d))
        for tid, f in bank.assigned.items()
    }
    spare = update_no_detection(bank.spare, visible_mask, p_d) if bank.spare is not None else None
    return FilterBank(assigned=assigned, spare=spare)


def bank_predict(bank: FilterBank, kernel: MotionKernel, graph: GroundGraph) -> FilterBank:
    return FilterBank(
        assigned={tid: predict(f, kernel, graph) for tid, f in bank.assigned.items()},
        spare=predict(bank.spare, kernel, graph) if bank.spare is not None else None,
    )


def filter_frame(bank: FilterBank, graph: GroundGraph, planning_step: int) -> pd.DataFrame:
    """滤波器快照表：每个可承载格点一行（备用滤波器的 target_id 为 -1）"""
    xy = graph.cell_xy()
    frames: List[pd.DataFrame] = []
    for filt in bank.filters:
        cells = np.nonzero(filt.support)[0]
        frames.append(
            pd.DataFrame(
                {
                    "planning_step": planning_step,
                    "target_id": filt.target_id if filt.assigned else -1,
                    "x": xy[cells, 0],
                    "y": xy[cells, 1],
                    "weight": filt.weights[cells],
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def write_filter_snapshot(bank: FilterBank, graph: GroundGraph, planning_step: int, path: Path) -> Path:
    """追加写入滤波器快照 CSV"""
    path = Path(path)
    df = filter_frame(bank, graph, planning_step)
    df.to_csv(path, mode="a", header=not path.exists(), index=False)
    return path

