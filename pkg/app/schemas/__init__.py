"""
数据模式
========

外部文件的 Pydantic 模式：地图底面文件与实验配置。
"""

from .episode import EpisodeConfig, build_episode_config, dump_episode_config, load_episode_config
from .map_file import BuildingSpec, MapFile

__all__ = [
    "BuildingSpec",
    "MapFile",
    "EpisodeConfig",
    "build_episode_config",
    "dump_episode_config",
    "load_episode_config",
]
