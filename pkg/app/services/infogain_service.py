"""
信息增益服务
============

熵与互信息计算器，以及组合规划目标：
场景项（颜色、深度、占据）+ λ · Σ 各目标的检测互信息。单位均为 nats。

设计思路:
1. 检测通道默认为"揭示格点"通道：结果空间 = {在可见格点 j 检测到} ∪ {未检测到}
2. 集成成员的高斯混合用矩匹配近似，成员相同时恰为 0
3. 场景项按像素平均，图像分辨率不改变 λ 的权衡
4. 所有互信息项下限截断为 0
5. ScoutPerception 封装侦察机自身的可见性模型（真值地图或学习场），
   评分与实验循环中的未检测更新共用它
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog
from scipy.special import entr

from ..core.exceptions import DomainError
from ..models.agents import CandidateScore, ObjectiveWeights, ScoringMode
from ..models.belief import FilterBank
from ..models.city import CityMap, GroundGraph
from ..models.field import FieldEnsemble
from ..models.sensing import CameraModel, DetectionModel, PoseSE3
from . import raysim_service, scenefield_service

# 配置日志
logger = structlog.get_logger(__name__)

VAR_FLOOR = 1e-6


def entropy_bernoulli(p):
    """
    伯努利熵 h(p)，0·ln 0 := 0

    Raises:
        DomainError: p 不在 [0, 1] 内
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise DomainError("Bernoulli parameter outside [0, 1]", value=p)
    h = entr(arr) + entr(1.0 - arr)
    return float(h) if np.ndim(h) == 0 else h


def detection_mi(
    weights: np.ndarray,
    visible_mask: np.ndarray,
    p_d: Union[float, np.ndarray] = 0.95,
    channel: str = "cell",
) -> float:
    """
    单个目标滤波器的检测互信息 I(y_detect; θ)

    cell 通道：I = Σ_{j∈V} η(p_j w_j) + η(1 − Σ_{j∈V} p_j w_j) − Σ_{j∈V} w_j h(p_j)
    binary 通道：I = h(Σ_{j∈V} p_j w_j) − Σ_{j∈V} w_j h(p_j)
    其中 η(x) = −x ln x。
    """
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    vis = np.asarray(visible_mask, dtype=bool)
    if not vis.any():
        return 0.0
    p = np.broadcast_to(np.asarray(p_d, dtype=np.float64), w.shape)[vis]
    wv = w[vis]
    detect = p * wv
    p_detect = float(detect.sum())
    conditional = float(np.sum(wv * (entr(p) + entr(1.0 - p))))
    if channel == "binary":
        marginal = float(entr(p_detect) + entr(1.0 - p_detect))
    elif channel == "cell":
        marginal = float(np.sum(entr(detect)) + entr(max(1.0 - p_detect, 0.0)))
    else:
        raise DomainError("unknown detection channel", value=channel)
    return max(marginal - conditional, 0.0)


def gaussian_ensemble_mi(means, variances, axis: int = 0):
    """
    成员高斯的矩匹配混合互信息

    σ_mix² = mean(σ_k²) + var(μ_k)；I = ½ ln σ_mix² − mean(½ ln σ_k²)，方差下限 1e-6

    Args:
        means, variances: 沿 axis 排列 K 个成员（其余维度逐元素计算）
    """
    mu = np.asarray(means, dtype=np.float64)
    var = np.maximum(np.asarray(variances, dtype=np.float64), VAR_FLOOR)
    mix = var.mean(axis=axis) + mu.var(axis=axis)
    mi = 0.5 * np.log(np.maximum(mix, VAR_FLOOR)) - np.mean(0.5 * np.log(var), axis=axis)
    mi = np.maximum(mi, 0.0)
    return float(mi) if np.ndim(mi) == 0 else mi


def occupancy_mi(escape_probs, axis: int = 0):
    """占据（逃逸）伯努利的 Jensen–Shannon 形式：h(mean p) − mean h(p_k)"""
    p = np.clip(np.asarray(escape_probs, dtype=np.float64), 0.0, 1.0)
    mean_p = p.mean(axis=axis)
    mi = entr(mean_p) + entr(1.0 - mean_p) - np.mean(entr(p) + entr(1.0 - p), axis=axis)
    mi = np.maximum(mi, 0.0)
    return float(mi) if np.ndim(mi) == 0 else mi


@dataclass
class ScoutPerception:
    """侦察机对世界的认知接口：可见性、检测概率与评分配置"""

    city: CityMap
    graph: GroundGraph
    camera: CameraModel
    detection: DetectionModel = field(default_factory=DetectionModel)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    mode: ScoringMode = ScoringMode.FILTERS_MI
    ensemble: Optional[FieldEnsemble] = None
    scoring_camera: Optional[CameraModel] = None
    channel: str = "cell"
    sigma_threshold: Optional[float] = None
    _occupancy: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _occupancy_version: int = field(default=-1, init=False, repr=False)
    _cell_points: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    @property
    def cell_points(self) -> np.ndarray:
        """完整格点上的目标点（三维）"""
        if self._cell_points is None:
            xy = self.graph.cell_xy()
            z = np.full(xy.shape[0], self.city.ground_z + self.detection.target_height)
            self._cell_points = np.column_stack([xy, z])
        return self._cell_points

    def occupancy(self) -> np.ndarray:
        """学习场占据网格（随场版本缓存）"""
        if self._occupancy is None or self._occupancy_version != self.ensemble.version:
            thr = self.threshold
            self._occupancy = scenefield_service.occupancy_grid(self.ensemble, thr)
            self._occupancy_version = self.ensemble.version
        return self._occupancy

    @property
    def threshold(self) -> float:
        if self.sigma_threshold is not None:
            return self.sigma_threshold
        return scenefield_service.default_sigma_threshold(self.ensemble)

    def visible_mask(self, pose: PoseSE3, use_field: Optional[bool] = None) -> np.ndarray:
        """完整格点上的可见掩码；use_field 为空时按评分模式选择"""
        use_field = self.mode == ScoringMode.FIELD_MI if use_field is None else use_field
        if use_field:
            return scenefield_service.visible_points_field(
                self.ensemble, pose, self.camera, self.cell_points, self.threshold, occupancy=self.occupancy()
            )
        return raysim_service.visible_points_gt(self.city, pose, self.camera, self.cell_points)

    def detection_probs(self, pose: PoseSE3) -> Union[float, np.ndarray]:
        if self.detection.range_decay <= 0.0:
            return self.detection.p_detect
        ranges = np.linalg.norm(self.cell_points - pose.position[None, :], axis=1)
        return self.detection.probability(ranges)


def scene_terms(ensemble: FieldEnsemble, pose: PoseSE3, cam: CameraModel):
    """场景互信息三项（按像素平均）：颜色（通道求和）、深度、占据"""
    samples = scenefield_service.render_ensemble(ensemble, pose, cam)
    rgb_means = np.stack([s.rgb for s in samples])
    rgb_vars = np.stack([s.rgb_var for s in samples])
    depth_means = np.stack([s.depth for s in samples])
    depth_vars = np.stack([s.depth_var for s in samples])
    escapes = np.stack([s.escape for s in samples])
    i_rgb = float(np.mean(np.sum(gaussian_ensemble_mi(rgb_means, rgb_vars), axis=-1)))
    i_depth = float(np.mean(gaussian_ensemble_mi(depth_means, depth_vars)))
    i_occ = float(np.mean(occupancy_mi(escapes)))
    return i_rgb, i_depth, i_occ


def score_candidate(pose: PoseSE3, filter_bank: FilterBank, perception: ScoutPerception) -> CandidateScore:
    """
    候选位姿的组合目标

    FIELD_MI：场景项由学习场渲染，检测项的可见性来自学习场；
    FILTERS_MI：场景项为 0，可见性来自真值地图。
    total = λ_rgb·I_rgb + λ_depth·I_depth + λ_occ·I_occ + λ_target·Σ_i I_detect,i
    """
    w = perception.weights
    i_rgb = i_depth = i_occ = 0.0
    if perception.mode == ScoringMode.FIELD_MI:
        if perception.ensemble is None:
            raise DomainError("field scoring needs a field ensemble")
        cam = perception.scoring_camera or perception.camera
        i_rgb, i_depth, i_occ = scene_terms(perception.ensemble, pose, cam)

    vis = perception.visible_mask(pose)
    p_d = perception.detection_probs(pose)
    detection = [detection_mi(f.weights, vis, p_d, perception.channel) for f in filter_bank.filters]
    total = w.rgb * i_rgb + w.depth * i_depth + w.occupancy * i_occ + w.target * float(sum(detection))
    return CandidateScore(pose=pose, rgb=i_rgb, depth=i_depth, occupancy=i_occ, detection=detection, total=total)


def map_expected_detections(
    pose: PoseSE3,
    filter_bank: FilterBank,
    visible_mask_fn: Callable[[PoseSE3], np.ndarray],
    p_d: Union[float, np.ndarray] = 0.95,
) -> float:
    """贪心基线：Σ_i p_d · 滤波器 i 在该位姿下的可见质量"""
    vis = np.asarray(visible_mask_fn(pose), dtype=bool)
    if not vis.any():
        return 0.0
    p = np.broadcast_to(np.asarray(p_d, dtype=np.float64), vis.shape)
    return float(sum(np.sum(p[vis] * f.weights[vis]) for f in filter_bank.filters))


def score_map_candidate(pose: PoseSE3, filter_bank: FilterBank, perception: ScoutPerception) -> CandidateScore:
    """MAP 策略的评分（记录在 detection 项中）"""
    value = map_expected_detections(pose, filter_bank, perception.visible_mask, perception.detection_probs(pose))
    return CandidateScore(pose=pose, detection=[value], total=value)


def score_frame(scores: Sequence[CandidateScore], planning_step: int, chosen: Optional[int] = None) -> pd.DataFrame:
    """评分表：每个候选一行"""
    rows: List[dict] = []
    for k, s in enumerate(scores):
        x, y, z, yaw, pitch = s.pose.as_tuple()
        rows.append(
            {
                "planning_step": planning_step,
                "candidate": k,
                "x": x,
                "y": y,
                "z": z,
                "yaw": yaw,
                "pitch": pitch,
                "rgb": s.rgb,
                "depth": s.depth,
                "occupancy": s.occupancy,
                "detection": s.detection_total,
                "total": s.total,
                "chosen": chosen == k,
            }
        )
    return pd.DataFrame(rows)


def append_score_table(
    path: Path, scores: Sequence[CandidateScore], planning_step: int, chosen: Optional[int] = None
) -> Path:
    path = Path(path)
    score_frame(scores, planning_step, chosen).to_csv(path, mode="a", header=not path.exists(), index=False)
    return path
