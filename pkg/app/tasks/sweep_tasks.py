"""
批量实验任务
============

策略 × 种子矩阵的批量运行。每个实验是一个 Celery 任务，整个矩阵用 group 一次分发；
单个实验失败只记录，不影响其他实验。

设计思路:
1. 任务参数只传可 JSON 序列化的配置字典，worker 内重新校验并配置日志
2. 方法名接受报告中的写法：GTmap+MAP、NeRF:2k+MI、offlineNeRF+MI 等
3. 结果按提交顺序返回，与并行度无关
4. 并行度为 1 时直接在当前进程串行调用任务函数
"""

import re
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import structlog
from celery import group

from ..core.celery import celery_app
from ..core.config import settings
from ..core.exceptions import CityScoutException, ConfigError
from ..core.logging import configure_logging
from ..schemas.episode import EpisodeConfig, build_episode_config
from ..services import episode_service

# 配置日志
logger = structlog.get_logger(__name__)

_BUDGET = re.compile(r"^nerf:(\d+(?:\.\d+)?)k\+", re.IGNORECASE)


@dataclass
class SweepResult:
    """单个实验的结果"""

    label: str
    seed: int
    log_dir: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def method_overrides(method: str) -> Dict[str, Any]:
    """
    把方法名翻译成配置字段

    Raises:
        ConfigError: NeRF:<n>k 中的训练步数不是整数
    """
    text = method.strip()
    update: Dict[str, Any] = {}
    if text.lower().startswith("offline"):
        update["offline_pretrain"] = True
        text = text[len("offline"):]
    match = _BUDGET.match(text)
    if match:
        steps = Decimal(match.group(1)) * 1000
        if steps != steps.to_integral_value() or steps < 1:
            raise ConfigError(f"Training budget in '{method}' is not a whole number of steps", field="training_budget")
        update["training_budget"] = int(steps)
    update["scout_policy"] = text
    return update


def expand_matrix(base: EpisodeConfig, methods: Sequence[str], seeds: Sequence[int]) -> List[EpisodeConfig]:
    """方法 × 种子的配置列表（方法在外层循环）"""
    configs = []
    for method in methods:
        for seed in seeds:
            data = base.model_dump(mode="json")
            data.update(method_overrides(method))
            data["seed"] = int(seed)
            configs.append(build_episode_config(data))
    return configs


@celery_app.task(name="app.tasks.sweep_tasks.run_episode_task")
def run_episode_task(config_data: Dict[str, Any], out_root: str, log_level: Optional[str] = None) -> Dict[str, Any]:
    """worker 入口：运行一个实验并写出日志目录，返回 SweepResult 的字典形式"""
    configure_logging(level=log_level)
    config = build_episode_config(config_data)
    run_dir = episode_service.prepare_run_dir(config, Path(out_root))
    try:
        episode_service.run_episode(config, out_dir=run_dir)
    except CityScoutException as e:
        return asdict(SweepResult(label=config.label, seed=config.seed, log_dir=str(run_dir), error=e.message))
    return asdict(SweepResult(label=config.label, seed=config.seed, log_dir=str(run_dir)))


def _collect(config: EpisodeConfig, value: Any) -> SweepResult:
    if isinstance(value, dict):
        return SweepResult(**value)
    # 任务本身崩溃时 get(propagate=False) 返回异常对象
    return SweepResult(label=config.label, seed=config.seed, error=str(value))


def run_sweep(
    base: EpisodeConfig,
    methods: Sequence[str],
    seeds: Sequence[int],
    out_root: Optional[Path] = None,
    workers: Optional[int] = None,
) -> List[SweepResult]:
    """
    运行策略 × 种子矩阵

    Args:
        base: 基础配置
        methods: 方法名列表
        seeds: 种子列表
        out_root: 输出根目录，默认 settings.output_root
        workers: 并行度，默认 settings.sweep_workers；1 表示在当前进程串行运行，
            大于 1 时经 Celery 分发（实际并发数由 worker 的 --concurrency 决定）

    Returns:
        List[SweepResult]: 按提交顺序的结果
    """
    out_root = Path(out_root or settings.output_root)
    workers = workers or settings.sweep_workers
    configs = expand_matrix(base, methods, seeds)
    payloads = [c.model_dump(mode="json") for c in configs]
    logger.info("Sweep started", episodes=len(configs), workers=workers, out_root=str(out_root))

    if workers <= 1:
        results = [_collect(c, run_episode_task(p, str(out_root))) for c, p in zip(configs, payloads)]
    else:
        job = group(run_episode_task.s(p, str(out_root), settings.log_level) for p in payloads)
        pending = job.apply_async()
        logger.info("Sweep dispatched", group_id=pending.id, eager=celery_app.conf.task_always_eager)
        results = [
            _collect(c, r.get(timeout=settings.sweep_result_timeout, propagate=False))
            for c, r in zip(configs, pending.results)
        ]

    failed = [r for r in results if not r.ok]
    logger.info("Sweep finished", episodes=len(results), failed=len(failed))
    return results
