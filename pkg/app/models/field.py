"""
场景辐射场模型
==============

学习得到的场景表示 p(ξ | y_past)：两个自助采样（bootstrap）训练的体素场成员。
每个成员保存未约束密度参数（经 softplus 得到 σ ≥ 0）和颜色 c ∈ [0,1]³，
查询时在体素中心之间做三线性插值。

设计思路:
1. 体素中心位于 min + (i + 0.5) * voxel，超出中心范围时钳制到边缘体素
2. 参数更新以"整体替换数组"的方式发布，读者不会看到半更新状态
3. 每个成员拥有独立的数据集（帧引用 + 重复次数展开）和优化器状态
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .sensing import CameraModel, RgbdFrame

Bounds3D = Tuple[float, float, float, float, float, float]


def softplus(x: np.ndarray) -> np.ndarray:
    """数值稳定的 softplus"""
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    """softplus 的反函数（y > 0）"""
    y = float(y)
    if y > 30.0:
        return y
    return float(np.log(np.expm1(y)))


@dataclass
class OptimizerState:
    """单个成员的优化器状态"""

    kind: str = "adam"
    learning_rate: float = 0.05
    decay_every: int = 2000
    decay_factor: float = 0.5
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m_density: Optional[np.ndarray] = None
    v_density: Optional[np.ndarray] = None
    m_color: Optional[np.ndarray] = None
    v_color: Optional[np.ndarray] = None

    def current_rate(self) -> float:
        return self.learning_rate * self.decay_factor ** (self.step // max(self.decay_every, 1))


@dataclass
class VoxelMember:
    """单个体素场成员"""

    bounds: Bounds3D
    resolution: Tuple[int, int, int]
    density_raw: np.ndarray  # (nx, ny, nz) 未约束参数
    color: np.ndarray  # (nx, ny, nz, 3)
    optimizer: OptimizerState = field(default_factory=OptimizerState)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.bounds[0::2], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.bounds[1::2], dtype=np.float64)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.resolution, dtype=np.float64)

    @property
    def sigma(self) -> np.ndarray:
        """体素中心处的密度 σ (1/m)"""
        return softplus(self.density_raw)

    @property
    def step_count(self) -> int:
        return self.optimizer.step

    def publish(self, density_raw: np.ndarray, color: np.ndarray) -> None:
        """以整体替换的方式发布新参数"""
        self.density_raw = density_raw
        self.color = color

    def copy(self) -> "VoxelMember":
        opt = OptimizerState(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                for k, v in vars(self.optimizer).items()})
        return VoxelMember(
            bounds=self.bounds,
            resolution=self.resolution,
            density_raw=self.density_raw.copy(),
            color=self.color.copy(),
            optimizer=opt,
        )


@dataclass
class ObservationStore:
    """单个成员的训练数据集

    frames 保存（共享的）帧对象引用；entries 是展开重复次数后的帧下标序列。
    """

    frames: List[RgbdFrame] = field(default_factory=list)
    entries: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, frame: RgbdFrame, multiplicity: int) -> None:
        self.frames.append(frame)
        idx = len(self.frames) - 1
        self.entries.extend([idx] * int(multiplicity))


@dataclass
class FieldEnsemble:
    """K=2 的自助采样体素场集成"""

    members: List[VoxelMember]
    datasets: List[ObservationStore]
    loss_weights: List[float] = field(default_factory=lambda: [1.0, 0.01, 0.1])
    loss_history: List[List[float]] = field(default_factory=list)
    running_terms: Optional[np.ndarray] = None  # (K, 2) rgb / depth 的滑动均值
    all_frames: List[RgbdFrame] = field(default_factory=list)
    version: int = 0
    camera: CameraModel = field(default_factory=CameraModel)
    quadrature: int = 128
    recent_window: int = 5
    adaptive_balance: bool = True
    balance_every: int = 100
    steps_trained: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def lambda_rgb(self) -> float:
        return self.loss_weights[0]

    @property
    def lambda_depth(self) -> float:
        return self.loss_weights[1]

    @property
    def lambda_escape(self) -> float:
        return self.loss_weights[2]


@dataclass
class RenderSample:
    """逐像素渲染结果（形状为 (..., ) 或 (..., 3)）"""

    rgb: np.ndarray
    depth: np.ndarray
    rgb_var: np.ndarray
    depth_var: np.ndarray
    escape: np.ndarray
    weights_sum: Optional[np.ndarray] = None

    def composite(self, background: np.ndarray) -> np.ndarray:
        """把逃逸概率对应的背景色叠加到颜色上，用于与真值图像比较"""
        return np.clip(self.rgb + self.escape[..., None] * np.asarray(background), 0.0, 1.0)
