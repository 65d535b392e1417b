"""
日志配置
========

配置 structlog 结构化日志。处理器链与原 Web 服务一致，
只是输出格式可以在 JSON 和控制台之间切换。
"""

import logging
import sys

import structlog

from .config import settings

_configured = False


def configure_logging(level: str = None, renderer: str = None) -> None:
    """
    配置结构化日志（幂等）

    Args:
        level: 日志级别，默认取 settings.log_level
        renderer: json 或 console，默认取 settings.log_renderer
    """
    global _configured

    level = (level or settings.log_level).upper()
    renderer = renderer or settings.log_renderer

    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=level, force=True)

    final = (
        structlog.dev.ConsoleRenderer()
        if renderer == "console"
        else structlog.processors.JSONRenderer()
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            final,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    _configured = True
