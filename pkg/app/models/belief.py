"""
目标信念模型
============

每个目标一个网格贝叶斯滤波器：权重定义在完整地面格点上（展平），
support 掩码标记允许承载概率质量的格点（已知地图时为自由节点）。

设计思路:
1. 权重非负且和为 1，所有更新返回新对象
2. 运动核为 (2r+1)×(2r+1) 模板，默认中心 0.6、四个角各 0.1
3. FilterBank 始终保留恰好一个未分配的备用滤波器
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class GridFilter:
    """单目标网格贝叶斯滤波器"""

    weights: np.ndarray  # (num_cells,)
    support: np.ndarray  # (num_cells,) bool
    target_id: Optional[int] = None

    @property
    def assigned(self) -> bool:
        return self.target_id is not None

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def with_weights(self, weights: np.ndarray) -> "GridFilter":
        return replace(self, weights=weights)

    def assign(self, target_id: int) -> "GridFilter":
        return replace(self, target_id=int(target_id))

    def snapshot(self) -> "GridFilter":
        return GridFilter(weights=self.weights.copy(), support=self.support, target_id=self.target_id)


@dataclass(frozen=True, eq=False)
class MotionKernel:
    """目标运动噪声模板"""

    stencil: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.stencil, dtype=np.float64)
        object.__setattr__(self, "stencil", k)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 != 1:
            raise ValueError("kernel must be a square odd-sized stencil")
        if np.any(k < 0):
            raise ValueError("kernel entries must be non-negative")
        if abs(k.sum() - 1.0) > 1e-9:
            raise ValueError("kernel must sum to 1")

    @property
    def radius(self) -> int:
        return self.stencil.shape[0] // 2

    @property
    def center_mass(self) -> float:
        r = self.radius
        return float(self.stencil[r, r])

    @classmethod
    def corner_escape(cls, radius: int = 2, center: float = 0.6, corner: float = 0.1) -> "MotionKernel":
        """中心停留 + 向四个对角逃逸的模板"""
        size = 2 * radius + 1
        k = np.zeros((size, size))
        k[radius, radius] = center
        for r, c in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
            k[r, c] = corner
        return cls(stencil=k)

    @classmethod
    def identity(cls) -> "MotionKernel":
        return cls(stencil=np.ones((1, 1)))


@dataclass
class FilterBank:
    """多目标滤波器组：已分配滤波器 + 一个备用滤波器"""

    assigned: Dict[int, GridFilter] = field(default_factory=dict)
    spare: Optional[GridFilter] = None

    @property
    def filters(self) -> List[GridFilter]:
        """按目标编号排序的已分配滤波器，最后是备用滤波器"""
        out = [self.assigned[k] for k in sorted(self.assigned)]
        if self.spare is not None:
            out.append(self.spare)
        return out

    def __len__(self) -> int:
        return len(self.assigned) + (1 if self.spare is not None else 0)

    def knows(self, target_id: int) -> bool:
        return target_id in self.assigned

    def snapshot(self) -> "FilterBank":
        return FilterBank(
            assigned={k: f.snapshot() for k, f in self.assigned.items()},
            spare=self.spare.snapshot() if self.spare is not None else None,
        )
