"""
智能体模型
==========

侦察机候选集合、信息增益评分、目标状态与"已观测节点"缓冲区。
"""

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Set

import numpy as np

from .sensing import PoseSE3


class ScoutPolicyKind(str, enum.Enum):
    """侦察机策略"""

    GTMAP_MAP = "gtmap_map"  # 真值地图 + 贪心期望检测
    GTMAP_MI = "gtmap_mi"  # 真值地图 + 仅滤波器互信息
    NERF_MI = "nerf_mi"  # 学习场 + 完整互信息目标
    NERF_MAP = "nerf_map"  # 学习场可见性 + 贪心期望检测

    @property
    def uses_field(self) -> bool:
        return self in (ScoutPolicyKind.NERF_MI, ScoutPolicyKind.NERF_MAP)

    @property
    def uses_mi(self) -> bool:
        return self in (ScoutPolicyKind.GTMAP_MI, ScoutPolicyKind.NERF_MI)

    @property
    def label(self) -> str:
        return {
            ScoutPolicyKind.GTMAP_MAP: "GTmap+MAP",
            ScoutPolicyKind.GTMAP_MI: "GTmap+MI",
            ScoutPolicyKind.NERF_MI: "NeRF+MI",
            ScoutPolicyKind.NERF_MAP: "NeRF+MAP",
        }[self]


class TargetPolicyKind(str, enum.Enum):
    """目标策略"""

    STATIONARY = "stationary"
    ACTIVE = "active"
    GOAL = "goal"


class ScoringMode(str, enum.Enum):
    """候选评分模式"""

    FIELD_MI = "field_mi"  # NeRF+MI：场景项 + 检测项，可见性来自学习场
    FILTERS_MI = "filters_mi"  # GTmap+MI：仅检测项，可见性来自真值


@dataclass(frozen=True)
class ObjectiveWeights:
    """组合目标各项权重，单位为 nats"""

    target: float = 10.0
    rgb: float = 1.0
    depth: float = 1.0
    occupancy: float = 1.0

    def __post_init__(self):
        if min(self.target, self.rgb, self.depth, self.occupancy) < 0:
            raise ValueError("objective weights must be non-negative")


@dataclass
class CandidateScore:
    """单个候选位姿的评分"""

    pose: PoseSE3
    rgb: float = 0.0
    depth: float = 0.0
    occupancy: float = 0.0
    detection: List[float] = field(default_factory=list)
    total: float = 0.0

    @property
    def detection_total(self) -> float:
        return float(sum(self.detection))


@dataclass
class CandidateSet:
    """10 个候选分布，每个由 10 个粒子位姿表示"""

    centers: np.ndarray  # (D, 3)
    particles: List[List[PoseSE3]]
    particle_scores: Optional[np.ndarray] = None  # (D, P)

    @property
    def shape(self):
        return len(self.particles), (len(self.particles[0]) if self.particles else 0)

    def flat(self) -> List[PoseSE3]:
        return [p for dist in self.particles for p in dist]

    @property
    def distribution_scores(self) -> Optional[np.ndarray]:
        if self.particle_scores is None:
            return None
        return self.particle_scores.mean(axis=1)


@dataclass
class SeenBuffer:
    """侦察机已观测到的地面节点集合（目标可见）"""

    reset_period: int = 10
    seen: Set[int] = field(default_factory=set)
    planning_step: int = 0

    def observe(self, nodes) -> None:
        self.seen.update(int(n) for n in nodes)

    def tick(self) -> bool:
        """推进一个规划步；到达重置周期的整数倍时清空，返回是否清空"""
        self.planning_step += 1
        if self.reset_period > 0 and self.planning_step % self.reset_period == 0:
            self.seen.clear()
            return True
        return False


@dataclass
class TargetState:
    """地面目标（始终位于图节点上）"""

    target_id: int
    node: int
    policy: TargetPolicyKind = TargetPolicyKind.STATIONARY
    path: List[int] = field(default_factory=list)
    goal: Optional[int] = None
    budget_m: Optional[float] = None
    history: List[int] = field(default_factory=list)
