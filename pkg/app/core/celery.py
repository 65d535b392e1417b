"""
Celery 初始化
=============

批量实验的任务队列。默认 eager 模式：任务在调用进程内直接执行，不需要 broker 和 worker。
关闭 eager（CITYSCOUT_CELERY_TASK_ALWAYS_EAGER=false）后默认使用本机文件系统 broker，
队列与结果都放在输出目录的 .celery/ 下，启动 worker 即可并行：

    celery -A app.core.celery worker --concurrency 4

生产中可把 broker 换成 Redis/RabbitMQ，只需设置 CITYSCOUT_CELERY_BROKER_URL。
"""

from pathlib import Path
from typing import Any, Dict

from celery import Celery

from .config import settings


def _queue_root() -> Path:
    return (Path(settings.output_root) / ".celery").resolve()


def _result_backend() -> str:
    if settings.celery_result_backend:
        return settings.celery_result_backend
    if settings.celery_task_always_eager:
        return "cache+memory://"
    results = _queue_root() / "results"
    results.mkdir(parents=True, exist_ok=True)
    return f"file://{results.as_posix()}"


def _broker_transport_options() -> Dict[str, Any]:
    if settings.celery_task_always_eager or not settings.celery_broker_url.startswith("filesystem://"):
        return {}
    queue = _queue_root() / "queue"
    processed = _queue_root() / "processed"
    queue.mkdir(parents=True, exist_ok=True)
    processed.mkdir(parents=True, exist_ok=True)
    return {
        "data_folder_in": str(queue),
        "data_folder_out": str(queue),
        "processed_folder": str(processed),
        "store_processed": False,
    }


celery_app = Celery(
    "cityscout",
    broker=settings.celery_broker_url,
    backend=_result_backend(),
    include=["app.tasks.sweep_tasks"],
)

celery_app.conf.update(
    task_always_eager=settings.celery_task_always_eager,
    task_serializer="json",
    result_serializer="json",
    accept_content=["json"],
    task_acks_late=True,
    # 一个实验可能运行很久，worker 每次只取一个
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=1000,
    task_default_queue="sweeps",
    broker_transport_options=_broker_transport_options(),
)
