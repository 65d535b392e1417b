"""
地图文件模式
============

定义建筑底面文件（UTF-8 JSON）的 Pydantic 模式。

文件格式::

    {
      "name": "mini-philly",                 # 可选
      "bounds": [xmin, ymin, xmax, ymax],    # 米
      "altitude_cap": 150,                   # 米，> 0
      "buildings": [
        {"polygon": [[x, y], ...], "height": h, "name": "..."},
        ...
      ]
    }

设计思路:
1. 结构校验（字段、类型、数量）在模式中完成
2. 几何校验（简单多边形、位于边界内）由 citymap_service 使用 shapely 完成
3. 未知字段直接拒绝，避免拼写错误被静默忽略
"""

from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class BuildingSpec(BaseModel):
    """单个建筑"""

    model_config = ConfigDict(extra="forbid")

    polygon: List[Tuple[float, float]] = Field(..., description="底面多边形顶点（米），首点可不重复")
    height: float = Field(..., gt=0, description="建筑高度（米）")
    name: Optional[str] = Field(None, description="建筑名称")

    @field_validator("polygon")
    @classmethod
    def validate_polygon(cls, v):
        """去掉重复的闭合点并检查顶点数"""
        if len(v) >= 2 and tuple(v[0]) == tuple(v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        return v


class MapFile(BaseModel):
    """地图文件"""

    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = Field(None, description="地图名称")
    bounds: Tuple[float, float, float, float] = Field(..., description="[xmin, ymin, xmax, ymax]")
    altitude_cap: float = Field(..., gt=0, description="侦察机最大飞行高度（米）")
    buildings: List[BuildingSpec] = Field(default_factory=list, description="建筑列表")

    @field_validator("bounds")
    @classmethod
    def validate_bounds(cls, v):
        """边界必须有正面积"""
        xmin, ymin, xmax, ymax = v
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("bounds must have positive area (empty map)")
        return v
