"""
核心模块
========

包含进程级配置、结构化日志与自定义异常。

模块结构:
- config.py: 应用配置管理
- logging.py: 日志配置
- exceptions.py: 自定义异常类
"""

from .config import get_settings, settings
from .exceptions import (
    CheckpointError,
    CityScoutException,
    ConfigError,
    DomainError,
    EpisodeAbortedError,
    MapParseError,
    MapValidationError,
    SamplingExhaustedError,
)

__all__ = [
    "settings",
    "get_settings",
    "CityScoutException",
    "ConfigError",
    "MapParseError",
    "MapValidationError",
    "SamplingExhaustedError",
    "DomainError",
    "CheckpointError",
    "EpisodeAbortedError",
]
