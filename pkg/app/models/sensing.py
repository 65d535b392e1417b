"""
传感模型
========

定义侦察机位姿、针孔相机、RGB-D 帧和目标检测结果。

设计思路:
1. 位姿为 5 自由度：三维位置、偏航、俯仰（相机俯仰独立于机体动力学），横滚恒为 0
2. 相机坐标系：前向 f 由偏航/俯仰给出，right 水平，up = right × f
3. 深度为沿光轴的距离（z 深度），"天空/未命中" 用 d_max + 1 编码，数组保持有限
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """侦察机状态 x_t"""

    position: np.ndarray
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        if not -math.pi / 2 - 1e-12 <= self.pitch <= math.pi / 2 + 1e-12:
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")

    @property
    def forward(self) -> np.ndarray:
        cp = math.cos(self.pitch)
        return np.array([cp * math.cos(self.yaw), cp * math.sin(self.yaw), math.sin(self.pitch)])

    @property
    def right(self) -> np.ndarray:
        return np.array([math.sin(self.yaw), -math.cos(self.yaw), 0.0])

    @property
    def up(self) -> np.ndarray:
        return np.cross(self.right, self.forward)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        x, y, z = (float(v) for v in self.position)
        return x, y, z, float(self.yaw), float(self.pitch)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return self.as_tuple() == other.as_tuple()

    def __hash__(self) -> int:
        return hash(self.as_tuple())


@dataclass(frozen=True)
class CameraModel:
    """针孔相机"""

    fov: float = math.pi / 2
    width: int = 64
    height: int = 64
    d_max: float = 1000.0

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def focal(self) -> float:
        """以像素为单位的焦距（由水平视场决定）"""
        return (self.width / 2.0) / math.tan(self.fov / 2.0)

    @property
    def no_hit_depth(self) -> float:
        return self.d_max + 1.0

    def scaled(self, width: int, height: int) -> "CameraModel":
        """相同视场、不同分辨率的相机"""
        return CameraModel(fov=self.fov, width=width, height=height, d_max=self.d_max)


@dataclass
class RgbdFrame:
    """一次观测的 RGB 与深度图"""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, d_max + 1 = no hit
    pose: PoseSE3
    timestamp: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Detection:
    """目标检测；数据关联完全正确"""

    target_id: int
    ground_point: Tuple[float, float]
    pixel: Tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class DetectionModel:
    """伯努利检测模型

    p_detect 为视野内且无遮挡时的检测概率；range_decay > 0 时
    概率按 exp(-range_decay * range) 衰减（默认 0，即恒定）。
    """

    p_detect: float = 0.95
    range_decay: float = 0.0
    target_height: float = 0.0

    def probability(self, distance: np.ndarray) -> np.ndarray:
        distance = np.asarray(distance, dtype=np.float64)
        if self.range_decay <= 0.0:
            return np.full(distance.shape, self.p_detect)
        return self.p_detect * np.exp(-self.range_decay * distance)
