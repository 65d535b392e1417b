"""
地图工具服务
============

两个离线工具：GeoJSON 建筑底面（经纬度）转换为地图文件，以及地图静态图。

设计思路:
1. 经纬度按等距圆柱投影到以 origin 为原点的局部米制坐标
2. 高度优先取 height 属性，其次 building:levels × 3 m，最后用默认值
3. 无效或退化的底面用 shapely 修复，修复后仍不可用的直接跳过并记录
4. 输出文件再经过 parse_map_text 校验，保证转换结果能被直接加载
"""

import json
import math
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import shapely
import structlog
from matplotlib import colormaps
from matplotlib.cm import ScalarMappable
from matplotlib.colors import Normalize
from matplotlib.figure import Figure
from shapely.geometry import MultiPolygon, Polygon, shape

from ..core.exceptions import MapParseError, OutputError
from ..models.city import CityMap
from . import citymap_service

# 配置日志
logger = structlog.get_logger(__name__)

EARTH_RADIUS_M = 6371008.8
LEVEL_HEIGHT_M = 3.0
MIN_AREA_M2 = 1.0

_NUMBER = re.compile(r"[-+]?\d*\.?\d+")


def project_lonlat(lon, lat, origin: Tuple[float, float]) -> np.ndarray:
    """等距圆柱投影：(lon, lat) 度 → 以 origin 为原点的 (x, y) 米"""
    lon0, lat0 = origin
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    x = EARTH_RADIUS_M * np.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(lat - lat0)
    return np.stack([x, y], axis=-1)


def building_height(props: Dict[str, Any], default_height: float) -> float:
    """从 OSM 属性推断建筑高度"""
    for key, scale in (("height", 1.0), ("building:levels", LEVEL_HEIGHT_M)):
        raw = props.get(key)
        if raw is None:
            continue
        match = _NUMBER.search(str(raw))
        if match and float(match.group()) > 0:
            return float(match.group()) * scale
    return default_height


def _polygons(geom) -> List[Polygon]:
    if not geom.is_valid:
        geom = shapely.make_valid(geom)
    if isinstance(geom, Polygon):
        parts = [geom]
    elif isinstance(geom, MultiPolygon):
        parts = list(geom.geoms)
    else:
        parts = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    return [Polygon(p.exterior) for p in parts if p.area >= MIN_AREA_M2]


def convert_geojson(
    data: Dict[str, Any],
    origin: Optional[Tuple[float, float]] = None,
    altitude_cap: float = 150.0,
    default_height: float = 10.0,
    margin: float = 20.0,
    name: Optional[str] = None,
) -> Dict[str, Any]:
    """
    GeoJSON FeatureCollection → 地图文件字典

    Args:
        data: 解析后的 GeoJSON
        origin: 投影原点 (lon, lat)，默认为所有顶点的最小经纬度
        altitude_cap: 写入地图的飞行高度上限
        default_height: 缺少高度属性时的默认值
        margin: 底面外包框向外扩展的边距（米）

    Raises:
        MapParseError: 不是 FeatureCollection 或没有可用的底面
    """
    if data.get("type") != "FeatureCollection":
        raise MapParseError("GeoJSON input must be a FeatureCollection")
    features = [f for f in data.get("features", []) if f.get("geometry")]
    lonlat = [
        np.asarray(ring, dtype=np.float64)
        for f in features
        if f["geometry"]["type"] in ("Polygon", "MultiPolygon")
        for ring in _exterior_rings(f["geometry"])
    ]
    if not lonlat:
        raise MapParseError("GeoJSON contains no polygon footprints")
    if origin is None:
        allpts = np.vstack(lonlat)
        origin = (float(allpts[:, 0].min()), float(allpts[:, 1].min()))

    buildings = []
    skipped = 0
    for f in features:
        geom = f["geometry"]
        if geom["type"] not in ("Polygon", "MultiPolygon"):
            continue
        projected = {
            "type": geom["type"],
            "coordinates": _project_coords(geom["coordinates"], origin),
        }
        height = building_height(f.get("properties") or {}, default_height)
        polys = _polygons(shape(projected))
        if not polys:
            skipped += 1
            continue
        for poly in polys:
            ring = np.asarray(poly.exterior.coords)[:-1]
            buildings.append({"polygon": np.round(ring, 3).tolist(), "height": round(height, 3)})

    if not buildings:
        raise MapParseError("No usable footprints after projection")
    xy = np.vstack([np.asarray(b["polygon"]) for b in buildings])
    bounds = [
        float(np.floor(xy[:, 0].min() - margin)),
        float(np.floor(xy[:, 1].min() - margin)),
        float(np.ceil(xy[:, 0].max() + margin)),
        float(np.ceil(xy[:, 1].max() + margin)),
    ]
    logger.info("GeoJSON converted", buildings=len(buildings), skipped=skipped, origin=origin)
    out = {"bounds": bounds, "altitude_cap": altitude_cap, "buildings": buildings}
    if name:
        out["name"] = name
    return out


def _exterior_rings(geom: Dict[str, Any]) -> List[list]:
    if geom["type"] == "Polygon":
        return [geom["coordinates"][0]]
    return [poly[0] for poly in geom["coordinates"]]


def _project_coords(coords, origin):
    """递归投影 GeoJSON 坐标嵌套列表"""
    if coords and isinstance(coords[0], (int, float)):
        x, y = project_lonlat(coords[0], coords[1], origin)
        return [float(x), float(y)]
    return [_project_coords(c, origin) for c in coords]


def convert_osm_file(
    src: Union[str, Path],
    dst: Union[str, Path],
    origin: Optional[Tuple[float, float]] = None,
    altitude_cap: float = 150.0,
    default_height: float = 10.0,
) -> CityMap:
    """
    转换 GeoJSON 文件并写出地图文件；写出的文件会重新加载校验

    Raises:
        MapParseError: 输入无法解析
        OutputError: 输出无法写入
    """
    src, dst = Path(src), Path(dst)
    try:
        data = json.loads(src.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MapParseError("GeoJSON file not found", path=str(src)) from e
    except json.JSONDecodeError as e:
        raise MapParseError(f"Invalid GeoJSON: {e.msg}", path=str(src), line=e.lineno, column=e.colno) from e

    converted = convert_geojson(data, origin, altitude_cap, default_height, name=src.stem)
    text = json.dumps(converted, indent=2)
    city = citymap_service.parse_map_text(text, source=str(dst))
    try:
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Cannot write map file: {e}", path=str(dst)) from e
    return city


def render_map(
    city: CityMap,
    out_path: Union[str, Path],
    spacing: float = 10.0,
    connectivity: int = 8,
    show_graph: bool = True,
) -> Path:
    """地图静态图：按高度着色的建筑底面 + 地面格点节点"""
    out_path = Path(out_path)
    fig = Figure(figsize=(7, 6))
    ax = fig.subplots()
    if city.buildings:
        cmap = colormaps["viridis"]
        top = max(b.height for b in city.buildings)
        for b in city.buildings:
            xy = b.vertices
            ax.fill(xy[:, 0], xy[:, 1], color=cmap(b.height / top), edgecolor="black", linewidth=0.4)
        mappable = ScalarMappable(cmap=cmap, norm=Normalize(0.0, top))
        fig.colorbar(mappable, ax=ax, label="height (m)")
    if show_graph:
        graph = citymap_service.build_ground_graph(city, spacing, connectivity)
        if graph.num_nodes:
            ax.scatter(graph.node_xy[:, 0], graph.node_xy[:, 1], s=1.5, color="gray", alpha=0.6)
    xmin, ymin, xmax, ymax = city.bounds
    ax.set_xlim(xmin, xmax)
    ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    ax.set_title(f"{city.name} (cap {city.altitude_cap:g} m)")
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, dpi=130)
    except OSError as e:
        raise OutputError(f"Cannot write map image: {e}", path=str(out_path)) from e
    logger.info("Map rendered", path=str(out_path), buildings=len(city.buildings))
    return out_path
