"""
领域模型
========

纯数据的领域对象（dataclass），不含业务流程。

模型设计原则:
1. 数组字段使用 numpy，形状写在注释中
2. 不可变对象使用 frozen dataclass
3. 业务逻辑放在 services 中
"""

from .agents import (
    CandidateScore,
    CandidateSet,
    ObjectiveWeights,
    ScoringMode,
    ScoutPolicyKind,
    SeenBuffer,
    TargetPolicyKind,
    TargetState,
)
from .belief import FilterBank, GridFilter, MotionKernel
from .city import Building, CityMap, GroundGraph, PathResult
from .field import FieldEnsemble, RenderSample, VoxelMember
from .metrics import ControlRecord, MetricsLog, PlanningRecord, ScoutRecord
from .sensing import CameraModel, Detection, DetectionModel, PoseSE3, RgbdFrame
from .trajectory import Poly7Segment, TrajectoryPlan

__all__ = [
    # 地图
    "Building",
    "CityMap",
    "GroundGraph",
    "PathResult",
    # 传感
    "CameraModel",
    "Detection",
    "DetectionModel",
    "PoseSE3",
    "RgbdFrame",
    # 场景场
    "FieldEnsemble",
    "RenderSample",
    "VoxelMember",
    # 信念
    "FilterBank",
    "GridFilter",
    "MotionKernel",
    # 智能体
    "CandidateScore",
    "CandidateSet",
    "ObjectiveWeights",
    "ScoringMode",
    "ScoutPolicyKind",
    "SeenBuffer",
    "TargetPolicyKind",
    "TargetState",
    # 轨迹与指标
    "Poly7Segment",
    "TrajectoryPlan",
    "ControlRecord",
    "MetricsLog",
    "PlanningRecord",
    "ScoutRecord",
]
