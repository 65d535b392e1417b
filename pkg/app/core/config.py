"""
应用配置管理
============

使用 Pydantic Settings 管理进程级配置，支持环境变量和 .env 文件。
实验本身的参数（地图、策略、种子、相机等）不在这里，见 schemas/episode.py。

设计思路:
1. 使用 Pydantic BaseSettings 自动从环境变量读取配置（前缀 CITYSCOUT_）
2. 支持 .env 文件进行本地开发配置
3. 只保存与单次实验无关的运行环境参数：日志、输出目录、并行度与任务队列
"""

from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """应用配置类"""

    model_config = SettingsConfigDict(
        env_prefix="CITYSCOUT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # 日志配置
    log_level: str = Field(default="INFO", description="日志级别")
    log_renderer: str = Field(default="json", description="日志输出格式 json|console")

    # 输出与数据目录
    output_root: Path = Field(default=Path("./runs"), description="实验输出根目录")
    maps_dir: Path = Field(default=Path("./data/maps"), description="内置地图目录，只写地图名时在这里查找")

    # 并行配置
    sweep_workers: int = Field(default=1, ge=1, description="批量实验并行度；大于 1 时经 Celery 分发")
    sweep_result_timeout: Optional[float] = Field(default=None, gt=0, description="等待单个实验结果的秒数")
    render_chunk_rays: Optional[int] = Field(
        default=None,
        description="单次渲染的最大光线数（None 表示一次渲染整帧）",
    )

    # Celery 配置
    celery_broker_url: str = Field(default="filesystem://", description="Celery 消息代理URL（默认本机文件系统队列）")
    celery_result_backend: Optional[str] = Field(
        default=None,
        description="Celery 结果后端URL（None 时 eager 模式用内存，否则用输出目录下的文件）",
    )
    celery_task_always_eager: bool = Field(default=True, description="在当前进程内直接执行任务，不需要 worker")

    @field_validator("log_level", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        """处理日志级别大小写"""
        if isinstance(v, str):
            return v.strip().upper()
        return v

    @field_validator("log_renderer", mode="before")
    @classmethod
    def normalize_renderer(cls, v):
        """处理日志格式配置"""
        if isinstance(v, str):
            v = v.strip().lower()
            if v not in ("json", "console"):
                raise ValueError("log_renderer must be 'json' or 'console'")
        return v


# 全局配置实例
settings = Settings()


def get_settings() -> Settings:
    """获取配置实例"""
    return settings
