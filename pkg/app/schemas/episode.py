"""
实验配置模式
============

EpisodeConfig 描述一次追逃实验的全部参数，从单个 YAML 文件加载，
可用命令行 key=value 覆盖。每个字段的 description 注明来源：
"reference" 表示参考配置给出的值，"default" 表示本项目选定的默认值。

设计思路:
1. 分块组织：相机、格点、运动核、检测、目标函数、场、飞行、候选、目标
2. 策略名称接受报告中的写法（GTmap+MAP 等）并映射到枚举
3. 未知字段拒绝；所有计数 ≥ 1
4. 种子写入每个输出产物
"""

import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..core.exceptions import ConfigError
from ..models.agents import ScoutPolicyKind, TargetPolicyKind

_SCOUT_ALIASES = {
    "gtmap+map": ScoutPolicyKind.GTMAP_MAP,
    "gtmap+mi": ScoutPolicyKind.GTMAP_MI,
    "nerf+mi": ScoutPolicyKind.NERF_MI,
    "nerf+map": ScoutPolicyKind.NERF_MAP,
}


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CameraConfig(_Block):
    """相机参数"""

    fov_deg: float = Field(90.0, gt=0, lt=180, description="reference: 90 degree field of view")
    width: int = Field(64, ge=8, description="default: desk scale 64 (reference 320)")
    height: int = Field(64, ge=8, description="default: desk scale 64 (reference 320)")
    d_max: float = Field(1000.0, gt=0, description="default: maximum sensing range (m)")


class GridConfig(_Block):
    """地面格点"""

    spacing: float = Field(10.0, gt=0, description="reference: nodes roughly 10 m apart")
    connectivity: int = Field(8, description="default: 8-connected lattice (4 allowed)")

    @field_validator("connectivity")
    @classmethod
    def validate_connectivity(cls, v):
        if v not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        return v


class KernelConfig(_Block):
    """角点逃逸运动核"""

    radius: int = Field(2, ge=1, description="default: stencil radius")
    center: float = Field(0.6, ge=0, le=1, description="default: stay probability")
    corner: float = Field(0.1, ge=0, le=1, description="default: mass per diagonal corner")

    @model_validator(mode="after")
    def validate_mass(self):
        if abs(self.center + 4 * self.corner - 1.0) > 1e-9:
            raise ValueError("center + 4 * corner must equal 1")
        return self


class DetectionConfig(_Block):
    """检测模型"""

    p_detect: float = Field(0.95, ge=0, le=1, description="reference: Bernoulli 0.95")
    range_decay: float = Field(0.0, ge=0, description="default: constant probability")
    target_height: float = Field(0.0, ge=0, description="default: targets on the ground plane")


class ObjectiveConfig(_Block):
    """组合目标函数"""

    lambda_target: float = Field(10.0, ge=0, description="reference: lambda = 10")
    lambda_rgb: float = Field(1.0, ge=0, description="default: rgb term switch")
    lambda_depth: float = Field(1.0, ge=0, description="default: depth term switch")
    lambda_occ: float = Field(1.0, ge=0, description="default: occupancy term switch")
    detection_channel: str = Field("cell", description="default: cell-revealing channel (or binary)")
    scoring_width: int = Field(16, ge=8, description="default: scene-MI render width")
    scoring_height: int = Field(16, ge=8, description="default: scene-MI render height")

    @field_validator("detection_channel")
    @classmethod
    def validate_channel(cls, v):
        if v not in ("cell", "binary"):
            raise ValueError("detection_channel must be 'cell' or 'binary'")
        return v


class FieldConfig(_Block):
    """体素场训练"""

    members: int = Field(2, ge=1, description="reference: two ensemble members")
    resolution: int = Field(96, ge=4, description="default: voxels per axis (desk scale)")
    quadrature_steps: int = Field(128, ge=2, description="default: samples per ray")
    batch_rays: int = Field(256, ge=2, description="default: rays per training step")
    optimizer: str = Field("adam", description="default: adam (or sgd)")
    learning_rate: float = Field(0.05, gt=0, description="default: step size")
    decay_every: int = Field(2000, ge=1, description="default: halve step size every N steps")
    decay_factor: float = Field(0.5, gt=0, le=1, description="default: decay factor")
    lambda_rgb: float = Field(1.0, ge=0, description="reference: l1 rgb weight (tuned)")
    lambda_depth: float = Field(0.01, ge=0, description="reference: l1 depth weight (tuned)")
    lambda_escape: float = Field(0.1, ge=0, description="default: sky/escape BCE weight")
    adaptive_balance: bool = Field(True, description="default: rescale lambda_depth every N steps")
    balance_every: int = Field(100, ge=1, description="default: balancing period")
    recent_window: int = Field(5, ge=1, description="default: frames counted as recent")
    init_sigma: float = Field(1e-3, gt=0, description="default: initial density (1/m)")
    sigma_threshold: Optional[float] = Field(
        None, ge=0, description="default: density with single-step opacity 0.5 at the marching step"
    )

    @field_validator("optimizer")
    @classmethod
    def validate_optimizer(cls, v):
        if v not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        return v


class FlightConfig(_Block):
    """轨迹生成"""

    speed_limit: float = Field(15.0, gt=0, description="default: m/s")
    accel_limit: float = Field(5.0, gt=0, description="default: m/s^2")
    route_spacing: float = Field(20.0, gt=0, description="default: 3D routing lattice spacing (m)")
    scan_fraction: float = Field(1.0 / 3.0, gt=0, le=1, description="default: share of control steps scanning")
    scan_pitch_amplitude_deg: float = Field(15.0, ge=0, description="default: pitch modulation")
    scan_duration: float = Field(8.0, gt=0, description="default: seconds for the 2pi yaw scan")


class CandidateConfig(_Block):
    """候选位姿"""

    distributions: int = Field(10, ge=1, description="reference: 10 scout distributions")
    particles: int = Field(10, ge=1, description="reference: 10 particles each")
    jitter_sigma: float = Field(15.0, gt=0, description="default: positional jitter (m)")
    pitch_min_deg: float = Field(-80.0, ge=-90, le=90, description="default")
    pitch_max_deg: float = Field(-5.0, ge=-90, le=90, description="default")
    z_min: float = Field(20.0, gt=0, description="default: lowest candidate altitude (m)")
    z_max: Optional[float] = Field(None, gt=0, description="default: altitude cap")
    radius: Optional[float] = Field(None, gt=0, description="default: anywhere in bounds")
    selection: str = Field("multinomial", description="reference: multinomial (or argmax)")
    weighting: str = Field("raw", description="default: raw scores (or softmax)")
    temperature: float = Field(1.0, gt=0, description="default: softmax temperature")
    max_attempts: int = Field(2000, ge=1, description="default: rejection sampling cap")

    @model_validator(mode="after")
    def validate_ranges(self):
        if self.pitch_min_deg > self.pitch_max_deg:
            raise ValueError("pitch_min_deg must not exceed pitch_max_deg")
        if self.z_max is not None and self.z_max < self.z_min:
            raise ValueError("z_max must not be below z_min")
        if self.selection not in ("multinomial", "argmax"):
            raise ValueError("selection must be 'multinomial' or 'argmax'")
        if self.weighting not in ("raw", "softmax"):
            raise ValueError("weighting must be 'raw' or 'softmax'")
        return self


class TargetConfig(_Block):
    """目标"""

    policy: TargetPolicyKind = Field(TargetPolicyKind.ACTIVE, description="reference: stationary | active | goal")
    count: Optional[int] = Field(None, ge=0, description="reference: 4 dynamic / 20 stationary")
    active_budget_m: Optional[float] = Field(None, gt=0, description="default: whole path per step")
    goal_budget_m: float = Field(100.0, gt=0, description="reference: at most 100 m per planning step")
    seen_reset_period: int = Field(10, ge=1, description="reference: reset every 10 planning steps")

    @property
    def resolved_count(self) -> int:
        if self.count is not None:
            return self.count
        return 20 if self.policy == TargetPolicyKind.STATIONARY else 4


class EpisodeConfig(_Block):
    """一次实验的完整配置"""

    map_path: Path = Field(Path("data/maps/mini_philly.json"), description="default: bundled desk map")
    scout_policy: ScoutPolicyKind = Field(ScoutPolicyKind.GTMAP_MI, description="reference: scout policy")
    training_budget: int = Field(4000, ge=1, description="reference: 4000 (NeRF:4k) or 2000 (NeRF:2k)")
    offline_pretrain: bool = Field(False, description="reference: offlineNeRF+MI variant")
    pretrain_planning_steps: int = Field(40, ge=1, description="reference: 40 planning steps")
    pretrain_budget: int = Field(4000, ge=1, description="reference: 4000 steps per pretrain planning step")
    planning_steps: int = Field(40, ge=1, description="reference: 40 planning steps")
    control_steps: int = Field(30, ge=1, description="reference: 30 control steps per planning step")
    init_images: int = Field(30, ge=1, description="reference: 30 initial images")
    init_ascend_steps: int = Field(5, ge=0, description="default: share of init images spent ascending")
    init_training_steps: int = Field(4000, ge=0, description="reference: 4000 initial iterations")
    init_altitude: Optional[float] = Field(None, gt=0, description="default: altitude cap")
    init_pitch_deg: float = Field(-30.0, ge=-90, le=90, description="default: scan pitch")
    init_pitch_jitter_deg: float = Field(10.0, ge=0, description="default: random pitch perturbation")
    start_xy: Optional[Tuple[float, float]] = Field(None, description="default: map center")
    seed: int = Field(72, description="reference: seeds 72, 80, 88")
    predict_every: int = Field(1, ge=1, description="default: filter predict every control step")
    psnr_window: int = Field(20, ge=1, description="reference: 20 most recent frames")
    psnr_checkpoints: List[int] = Field(default_factory=lambda: [2000, 4000], description="reference")
    export_frames: bool = Field(False, description="default: write PNG/.f32 frames")
    export_filters: bool = Field(False, description="default: write filter CSV snapshots")

    camera: CameraConfig = Field(default_factory=CameraConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    flight: FlightConfig = Field(default_factory=FlightConfig)
    candidates: CandidateConfig = Field(default_factory=CandidateConfig)
    targets: TargetConfig = Field(default_factory=TargetConfig)

    @field_validator("scout_policy", mode="before")
    @classmethod
    def parse_scout_policy(cls, v):
        """接受报告中的策略写法"""
        if isinstance(v, str):
            key = v.strip().lower()
            key = key.split(":")[0] + ("+" + key.split("+", 1)[1] if ":" in key and "+" in key else "")
            return _SCOUT_ALIASES.get(key, key)
        return v

    @property
    def label(self) -> str:
        """报告中使用的方法名，如 NeRF:4k+MI"""
        if not self.scout_policy.uses_field:
            return self.scout_policy.label
        if self.offline_pretrain:
            prefix = "offlineNeRF"
        elif self.training_budget % 1000 == 0:
            prefix = f"NeRF:{self.training_budget // 1000}k"
        else:
            prefix = f"NeRF:{self.training_budget / 1000}k"
        return prefix + "+" + self.scout_policy.label.split("+", 1)[1]

    @property
    def fov(self) -> float:
        return math.radians(self.camera.fov_deg)

    @property
    def total_control_steps(self) -> int:
        return self.init_images + self.planning_steps * self.control_steps


def _parse_override(item: str) -> Tuple[List[str], Any]:
    """解析 a.b.c=value 形式的覆盖项，值按 YAML 标量解析"""
    if "=" not in item:
        raise ConfigError(f"Override '{item}' must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: Dict[str, Any], overrides: Optional[List[str]]) -> Dict[str, Any]:
    """把命令行覆盖项写入配置字典"""
    for item in overrides or []:
        path, value = _parse_override(item)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{item}' descends into a scalar", field=".".join(path))
        node[path[-1]] = value
    return data


def build_episode_config(data: Dict[str, Any], overrides: Optional[List[str]] = None) -> EpisodeConfig:
    """从字典构造并校验配置"""
    data = apply_overrides(dict(data or {}), overrides)
    try:
        return EpisodeConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"Invalid episode config at '{loc}': {first.get('msg')}", field=loc) from e


def load_episode_config(path: Union[str, Path, None], overrides: Optional[List[str]] = None) -> EpisodeConfig:
    """
    从 YAML 文件加载实验配置

    Args:
        path: 配置文件路径；None 表示只用默认值和覆盖项
        overrides: key=value 覆盖项

    Returns:
        EpisodeConfig: 校验后的配置
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", field="config")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file is not valid YAML: {e}", field="config") from e
        if not isinstance(data, dict):
            raise ConfigError("Config file must contain a mapping", field="config")
    return build_episode_config(data, overrides)


def dump_episode_config(config: EpisodeConfig) -> str:
    """序列化为 YAML（用于拷贝到输出目录）"""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
