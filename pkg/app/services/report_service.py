"""
报告服务
========

MetricsLog 的落盘与读取、跨种子汇总表（均值 ± 样本标准差），
以及静态图：最小/最大 RMSE 曲线、PSNR 曲线、二维轨迹图。

设计思路:
1. 每个 CSV 都带 seed 列，产物脱离目录也能追溯
2. 汇总按 (地图, 侦察机策略, 目标策略) 分组；单个种子时标准差记为 0
3. 没有目标的实验，跟踪误差列输出 N/A，PSNR 列照常
4. 绘图直接使用 matplotlib.figure.Figure（Agg 画布），不经过 pyplot，也不依赖显示环境
"""

import math
import re
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog
import yaml
from matplotlib import colormaps
from matplotlib.figure import Figure

from ..core.exceptions import OutputError
from ..models.city import CityMap
from ..models.metrics import ControlRecord, MetricsLog, PlanningRecord, ScoutRecord

# 配置日志
logger = structlog.get_logger(__name__)

NA = "N/A"
GROUP_KEYS = ["map_name", "scout_policy", "target_policy"]


def _records_frame(records: Sequence, record_type, seed: int) -> pd.DataFrame:
    columns = [f.name for f in fields(record_type)]
    df = pd.DataFrame([asdict(r) for r in records], columns=columns)
    df.insert(0, "seed", seed)
    return df


def _targets_frame(log: MetricsLog) -> pd.DataFrame:
    rows = [
        {"seed": log.seed, "target_id": tid, "planning_step": k - 1, "x": xy[0], "y": xy[1]}
        for tid, path in sorted(log.target_paths.items())
        for k, xy in enumerate(path)
    ]
    return pd.DataFrame(rows, columns=["seed", "target_id", "planning_step", "x", "y"])


def write_log(log: MetricsLog, out_dir: Union[str, Path]) -> Path:
    """
    写出一次实验的日志目录

    文件：control.csv、scout.csv、planning.csv、targets.csv（planning_step = -1 为初始位置）、
    meta.yaml

    Raises:
        OutputError: 目录或文件无法写入
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _records_frame(log.control, ControlRecord, log.seed).to_csv(out_dir / "control.csv", index=False)
        _records_frame(log.scout, ScoutRecord, log.seed).to_csv(out_dir / "scout.csv", index=False)
        _records_frame(log.planning, PlanningRecord, log.seed).to_csv(out_dir / "planning.csv", index=False)
        _targets_frame(log).to_csv(out_dir / "targets.csv", index=False)
        meta = {
            "seed": log.seed,
            "scout_policy": log.scout_policy,
            "target_policy": log.target_policy,
            "map_name": log.map_name,
            "num_targets": log.num_targets,
            "meta": log.meta,
        }
        (out_dir / "meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Cannot write episode log: {e}", path=str(out_dir)) from e
    logger.info("Episode log written", path=str(out_dir), seed=log.seed)
    return out_dir


def _none_if_nan(v):
    if v is None:
        return None
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _load_records(path: Path, record_type) -> list:
    df = pd.read_csv(path)
    names = [f.name for f in fields(record_type)]
    out = []
    for row in df.to_dict(orient="records"):
        values = {k: _none_if_nan(row.get(k)) for k in names}
        out.append(record_type(**values))
    return out


def load_log(log_dir: Union[str, Path]) -> MetricsLog:
    """
    读取 write_log 写出的目录

    Raises:
        OutputError: 缺少文件
    """
    log_dir = Path(log_dir)
    meta_path = log_dir / "meta.yaml"
    if not meta_path.exists():
        raise OutputError("Not an episode log directory", path=str(log_dir))
    meta = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
    log = MetricsLog(
        seed=int(meta["seed"]),
        scout_policy=meta["scout_policy"],
        target_policy=meta["target_policy"],
        map_name=meta["map_name"],
        num_targets=int(meta["num_targets"]),
        meta=meta.get("meta") or {},
    )
    log.control = _load_records(log_dir / "control.csv", ControlRecord)
    log.scout = _load_records(log_dir / "scout.csv", ScoutRecord)
    log.planning = _load_records(log_dir / "planning.csv", PlanningRecord)
    targets = pd.read_csv(log_dir / "targets.csv")
    for tid, group in targets.groupby("target_id", sort=True):
        group = group.sort_values("planning_step")
        log.target_paths[int(tid)] = group[["x", "y"]].to_numpy().tolist()
    return log


def find_logs(root: Union[str, Path]) -> List[Path]:
    """root 下所有包含 meta.yaml 的目录（不含中止时写出的 partial 目录）"""
    root = Path(root)
    return sorted(p.parent for p in root.rglob("meta.yaml") if p.parent.name != "partial")


def _final_psnr(log: MetricsLog) -> float:
    for rec in reversed(log.planning):
        value = rec.psnr_4k if rec.psnr_4k is not None else rec.psnr_2k
        if value is not None:
            return float(value)
    return math.nan


def episode_row(log: MetricsLog) -> Dict[str, object]:
    """单次实验的汇总行"""
    te = log.tracking_summary()
    return {
        "map_name": log.map_name,
        "scout_policy": log.scout_policy,
        "target_policy": log.target_policy,
        "seed": log.seed,
        "num_targets": log.num_targets,
        "control_ticks": log.num_control_steps,
        "te_mean": te["te_mean"],
        "te_min": te["te_min"],
        "te_max": te["te_max"],
        "psnr": _final_psnr(log),
    }


def _std(values: pd.Series) -> float:
    values = values.dropna()
    if values.empty:
        return math.nan
    if len(values) == 1:
        return 0.0
    return float(values.std(ddof=1))


def summary_frame(logs: Sequence[MetricsLog]) -> pd.DataFrame:
    """
    跨种子汇总：每组一行，te_mean / te_min / te_max / psnr 的均值与样本标准差

    Raises:
        ValueError: 日志列表为空
    """
    if not logs:
        raise ValueError("at least one log is required")
    episodes = pd.DataFrame([episode_row(log) for log in logs])
    rows = []
    for key, group in episodes.groupby(GROUP_KEYS, sort=True):
        row = dict(zip(GROUP_KEYS, key))
        row["seeds"] = " ".join(str(s) for s in sorted(group["seed"]))
        row["episodes"] = len(group)
        for col in ("te_mean", "te_min", "te_max", "psnr"):
            vals = group[col].dropna()
            row[f"{col}_mean"] = float(vals.mean()) if not vals.empty else math.nan
            row[f"{col}_std"] = _std(group[col])
        rows.append(row)
    return pd.DataFrame(rows)


def formatted_summary(summary: pd.DataFrame) -> pd.DataFrame:
    """把数值汇总格式化为 "均值 ± 标准差" 文本列"""
    out = summary[GROUP_KEYS + ["seeds"]].copy()
    for col in ("te_mean", "te_min", "te_max", "psnr"):
        out[col] = [
            NA if math.isnan(m) else f"{m:.3f} ± {s:.3f}"
            for m, s in zip(summary[f"{col}_mean"], summary[f"{col}_std"])
        ]
    return out


# ---------------------------------------------------------------------------
# 图
# ---------------------------------------------------------------------------


def _stem(log: MetricsLog) -> str:
    """单个实验在报告中的文件名：地图_方法_目标策略_s种子"""
    label = f"{log.map_name}_{log.scout_policy}_{log.target_policy}_s{log.seed}"
    return re.sub(r"[^A-Za-z0-9_.-]", "", label.replace("+", "-"))


def plot_rmse(log: MetricsLog, path: Path) -> Optional[Path]:
    """最小 RMSE（不透明）与最大 RMSE（半透明）曲线，点颜色表示对应目标"""
    extremes = log.per_step_extremes()
    if not extremes:
        return None
    steps = np.array([e["step"] for e in extremes])
    cmap = colormaps["tab20"]
    fig = Figure(figsize=(8, 4))
    ax = fig.subplots()
    for key, alpha, label in (("min", 1.0, "min RMSE"), ("max", 0.3, "max RMSE")):
        values = np.array([e[f"{key}_rmse"] for e in extremes])
        ids = np.array([e[f"{key}_target"] for e in extremes])
        ax.plot(steps, values, color="black", alpha=alpha, linewidth=0.8, label=label)
        ax.scatter(steps, values, c=[cmap(i % 20) for i in ids], s=6, alpha=alpha)
    ax.set_xlabel("control step")
    ax.set_ylabel("RMSE (m)")
    ax.set_title(f"{log.scout_policy} / {log.target_policy} / seed {log.seed}")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_psnr(log: MetricsLog, path: Path) -> Optional[Path]:
    steps = [r.planning_step for r in log.planning]
    early = [np.nan if r.psnr_2k is None else r.psnr_2k for r in log.planning]
    late = [np.nan if r.psnr_4k is None else r.psnr_4k for r in log.planning]
    if not steps or (np.all(np.isnan(early)) and np.all(np.isnan(late))):
        return None
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    ax.plot(steps, early, marker="o", markersize=3, label="first checkpoint")
    ax.plot(steps, late, marker="s", markersize=3, label="second checkpoint")
    ax.set_xlabel("planning step")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def draw_footprints(ax, city: CityMap) -> None:
    """按高度着色的建筑轮廓"""
    if not city.buildings:
        return
    cmap = colormaps["viridis"]
    top = max(b.height for b in city.buildings)
    for b in city.buildings:
        xy = b.vertices
        ax.fill(xy[:, 0], xy[:, 1], color=cmap(b.height / top), alpha=0.7, linewidth=0)


def plot_trajectories(log: MetricsLog, path: Path, city: Optional[CityMap] = None) -> Path:
    """侦察机平面轨迹与目标路径"""
    fig = Figure(figsize=(6, 6))
    ax = fig.subplots()
    if city is not None:
        draw_footprints(ax, city)
    if log.scout:
        ax.plot([r.x for r in log.scout], [r.y for r in log.scout], color="tab:red", linewidth=1.0, label="scout")
    for tid, pts in sorted(log.target_paths.items()):
        arr = np.asarray(pts)
        ax.plot(arr[:, 0], arr[:, 1], linewidth=0.8, marker=".", markersize=3, label=f"target {tid}")
    bounds = log.meta.get("bounds")
    if bounds:
        ax.set_xlim(bounds[0], bounds[2])
        ax.set_ylim(bounds[1], bounds[3])
    ax.set_aspect("equal")
    if len(log.target_paths) <= 8:
        ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def emit_report(
    logs: Sequence[MetricsLog], out_dir: Union[str, Path], city: Optional[CityMap] = None
) -> Dict[str, List[Path]]:
    """
    生成完整报告

    Args:
        logs: 至少一个实验日志
        out_dir: 输出目录
        city: 可选，轨迹图上绘制建筑

    Returns:
        Dict[str, List[Path]]: 按类别列出的输出文件

    Raises:
        OutputError: 文件无法写入
    """
    if not logs:
        raise ValueError("emit_report needs at least one log")
    out_dir = Path(out_dir)
    files: Dict[str, List[Path]] = {"episodes": [], "summary": [], "figures": []}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        episodes = pd.DataFrame([episode_row(log) for log in logs])
        episodes_path = out_dir / "episodes.csv"
        episodes.to_csv(episodes_path, index=False, na_rep=NA)
        files["episodes"].append(episodes_path)

        summary = summary_frame(logs)
        summary_path = out_dir / "summary.csv"
        summary.to_csv(summary_path, index=False, na_rep=NA)
        table_path = out_dir / "summary_formatted.csv"
        formatted_summary(summary).to_csv(table_path, index=False)
        files["summary"] += [summary_path, table_path]

        figures = out_dir / "figures"
        figures.mkdir(exist_ok=True)
        used: Dict[str, int] = {}
        for log in logs:
            stem = _stem(log)
            used[stem] = used.get(stem, 0) + 1
            if used[stem] > 1:
                stem = f"{stem}_{used[stem]}"
            per_episode = out_dir / "episodes" / stem
            write_log(log, per_episode)
            files["episodes"].append(per_episode)
            for fig_path in (
                plot_rmse(log, figures / f"rmse_{stem}.png"),
                plot_psnr(log, figures / f"psnr_{stem}.png"),
                plot_trajectories(log, figures / f"trajectory_{stem}.png", city),
            ):
                if fig_path is not None:
                    files["figures"].append(fig_path)
    except OSError as e:
        raise OutputError(f"Cannot write report: {e}", path=str(out_dir)) from e

    logger.info("Report emitted", path=str(out_dir), episodes=len(logs), groups=len(summary))
    return files
