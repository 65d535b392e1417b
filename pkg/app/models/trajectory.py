"""
轨迹模型
========

最小 snap 七次多项式分段与完整的航点计划（转场 + 末端 2π 偏航扫描）。
平坦输出为 x, y, z, yaw；俯仰独立于动力学，单独线性插值。
"""

from dataclasses import dataclass, field
from math import factorial
from typing import List, Optional

import numpy as np

from .sensing import PoseSE3

FLAT_AXES = ("x", "y", "z", "yaw")


@dataclass(frozen=True, eq=False)
class Poly7Segment:
    """一段七次多项式；coeffs[axis, k] 为 t^k 的系数"""

    coeffs: np.ndarray  # (A, 8)
    duration: float
    snap_cost: float = 0.0

    @property
    def num_axes(self) -> int:
        return int(self.coeffs.shape[0])

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        """在 t（标量或数组，0 ≤ t ≤ T）处求各轴的导数，返回 (..., A)"""
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros(t.shape + (self.num_axes,))
        for k in range(derivative, 8):
            scale = factorial(k) / factorial(k - derivative)
            out += (scale * t[..., None] ** (k - derivative)) * self.coeffs[:, k]
        return out


@dataclass
class TrajectoryPlan:
    """一个规划步的完整计划"""

    route: List[np.ndarray]
    segments: List[Poly7Segment]
    start_pitch: float
    end_pitch: float
    scan: Optional[Poly7Segment] = None
    scan_center: Optional[np.ndarray] = None
    scan_pitch_amplitude: float = float(np.deg2rad(15.0))
    scan_fraction: float = 1.0 / 3.0
    goal: Optional[PoseSE3] = None
    metadata: dict = field(default_factory=dict)

    @property
    def transit_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    @property
    def has_transit(self) -> bool:
        return len(self.segments) > 0
