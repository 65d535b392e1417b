"""
指标记录
========

MetricsLog 保存逐控制步、逐目标的跟踪误差，以及逐规划步的汇总
（最小/最大 RMSE 及其对应目标、2k/4k 训练步后的 PSNR、决策评分）。
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional


@dataclass
class ControlRecord:
    """单个控制步、单个目标的记录"""

    step: int
    target_id: int
    true_x: float
    true_y: float
    est_x: float
    est_y: float
    rmse: float
    discovered: bool


@dataclass
class ScoutRecord:
    """单个控制步的侦察机位姿"""

    step: int
    x: float
    y: float
    z: float
    yaw: float
    pitch: float
    detections: int = 0


@dataclass
class PlanningRecord:
    """单个规划步的汇总"""

    planning_step: int
    control_step: int
    min_rmse: Optional[float] = None
    min_target: Optional[int] = None
    max_rmse: Optional[float] = None
    max_target: Optional[int] = None
    psnr_2k: Optional[float] = None
    psnr_4k: Optional[float] = None
    chosen_x: Optional[float] = None
    chosen_y: Optional[float] = None
    chosen_z: Optional[float] = None
    chosen_yaw: Optional[float] = None
    chosen_pitch: Optional[float] = None
    score_total: Optional[float] = None
    score_rgb: Optional[float] = None
    score_depth: Optional[float] = None
    score_occupancy: Optional[float] = None
    score_detection: Optional[float] = None
    discovered: int = 0


@dataclass
class MetricsLog:
    """一次实验的完整指标"""

    seed: int
    scout_policy: str
    target_policy: str
    map_name: str
    num_targets: int
    control: List[ControlRecord] = field(default_factory=list)
    scout: List[ScoutRecord] = field(default_factory=list)
    planning: List[PlanningRecord] = field(default_factory=list)
    target_paths: Dict[int, List[List[float]]] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def num_control_steps(self) -> int:
        return len(self.scout)

    def steps(self) -> List[int]:
        return sorted({r.step for r in self.control})

    def per_step_extremes(self) -> List[Dict[str, object]]:
        """逐控制步的最小/最大 RMSE 及对应目标"""
        by_step: Dict[int, List[ControlRecord]] = {}
        for r in self.control:
            by_step.setdefault(r.step, []).append(r)
        out = []
        for step in sorted(by_step):
            recs = by_step[step]
            lo = min(recs, key=lambda r: (r.rmse, r.target_id))
            hi = max(recs, key=lambda r: (r.rmse, -r.target_id))
            out.append(
                {
                    "step": step,
                    "min_rmse": lo.rmse,
                    "min_target": lo.target_id,
                    "max_rmse": hi.rmse,
                    "max_target": hi.target_id,
                }
            )
        return out

    def tracking_summary(self) -> Dict[str, float]:
        """单次实验的跟踪误差汇总：均值、最小值、最大值；无目标时为 NaN"""
        if not self.control:
            return {"te_mean": math.nan, "te_min": math.nan, "te_max": math.nan}
        extremes = self.per_step_extremes()
        return {
            "te_mean": sum(r.rmse for r in self.control) / len(self.control),
            "te_min": min(e["min_rmse"] for e in extremes),
            "te_max": max(e["max_rmse"] for e in extremes),
        }

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)
