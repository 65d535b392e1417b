"""
报告服务测试
"""

import math
import statistics

import pandas as pd
import pytest

from app.core.exceptions import OutputError
from app.models.metrics import ControlRecord, MetricsLog, PlanningRecord, ScoutRecord
from app.services.report_service import (
    NA,
    emit_report,
    episode_row,
    find_logs,
    formatted_summary,
    load_log,
    summary_frame,
    write_log,
)


def _log(seed, rmses=None, psnr=None, scout_policy="GTmap+MI", num_targets=2, map_name="block"):
    """rmses[step][target] 给出每个控制步、每个目标的误差"""
    rmses = rmses if rmses is not None else [[1.0, 3.0], [2.0, 6.0]]
    log = MetricsLog(
        seed=seed,
        scout_policy=scout_policy,
        target_policy="active",
        map_name=map_name,
        num_targets=num_targets,
        meta={"bounds": [0.0, 0.0, 100.0, 100.0]},
    )
    for step, row in enumerate(rmses):
        log.scout.append(ScoutRecord(step, 10.0 * step, 5.0, 30.0, 0.0, -0.5, 1))
        for tid, value in enumerate(row):
            log.control.append(ControlRecord(step, tid, 0.0, 0.0, value, 0.0, value, True))
    if not rmses:
        log.scout = [ScoutRecord(0, 0.0, 0.0, 30.0, 0.0, -0.5, 0)]
    log.planning.append(PlanningRecord(planning_step=0, control_step=len(log.scout) - 1, psnr_2k=psnr, psnr_4k=psnr))
    for tid in range(num_targets):
        log.target_paths[tid] = [[0.0, 0.0], [10.0, 10.0]]
    return log


class TestEpisodeRow:
    def test_tracking_columns(self):
        row = episode_row(_log(72))
        assert row["seed"] == 72
        assert row["te_mean"] == pytest.approx(3.0)
        assert row["te_min"] == pytest.approx(1.0)
        assert row["te_max"] == pytest.approx(6.0)
        assert math.isnan(row["psnr"])
        assert row["control_ticks"] == 2

    def test_last_psnr_wins(self):
        log = _log(72, psnr=20.0)
        log.planning.append(PlanningRecord(planning_step=1, control_step=2, psnr_2k=22.0, psnr_4k=None))
        assert episode_row(log)["psnr"] == pytest.approx(22.0)


class TestSummary:
    """跨种子汇总"""

    def test_sample_std(self):
        logs = [
            _log(72, [[1.0, 1.0]]),
            _log(80, [[2.0, 4.0]]),
            _log(88, [[5.0, 7.0]]),
        ]
        summary = summary_frame(logs)
        assert len(summary) == 1
        row = summary.iloc[0]
        assert row["seeds"] == "72 80 88"
        assert row["episodes"] == 3
        means = [1.0, 3.0, 6.0]
        assert row["te_mean_mean"] == pytest.approx(statistics.mean(means))
        assert row["te_mean_std"] == pytest.approx(statistics.stdev(means))
        assert row["te_max_std"] == pytest.approx(statistics.stdev([1.0, 4.0, 7.0]))

    def test_single_seed_std_zero(self):
        summary = summary_frame([_log(72, psnr=25.0)])
        row = summary.iloc[0]
        assert row["te_mean_std"] == 0.0
        assert row["psnr_mean"] == pytest.approx(25.0)
        assert row["psnr_std"] == 0.0

    def test_groups_by_policy(self):
        logs = [_log(72), _log(80), _log(72, scout_policy="GTmap+MAP")]
        summary = summary_frame(logs)
        assert summary["scout_policy"].tolist() == ["GTmap+MAP", "GTmap+MI"]
        assert summary["episodes"].tolist() == [1, 2]

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            summary_frame([])

    def test_no_targets_formatted_as_na(self):
        summary = summary_frame([_log(72, rmses=[], psnr=18.5, num_targets=0)])
        table = formatted_summary(summary)
        row = table.iloc[0]
        assert row["te_mean"] == NA
        assert row["te_min"] == NA
        assert row["te_max"] == NA
        assert row["psnr"] == "18.500 ± 0.000"

    def test_formatted_values(self):
        table = formatted_summary(summary_frame([_log(72), _log(80, [[2.0, 4.0], [3.0, 5.0]])]))
        # 3.0 与 3.5 的均值与样本标准差
        assert table.iloc[0]["te_mean"] == f"{3.25:.3f} ± {statistics.stdev([3.0, 3.5]):.3f}"


class TestLogFiles:
    """日志目录"""

    def test_write_and_load(self, tmp_path):
        log = _log(72, psnr=21.0)
        write_log(log, tmp_path / "ep")
        control = pd.read_csv(tmp_path / "ep" / "control.csv")
        assert set(control["seed"]) == {72}
        loaded = load_log(tmp_path / "ep")
        assert loaded.seed == 72
        assert loaded.num_targets == 2
        assert [r.rmse for r in loaded.control] == [r.rmse for r in log.control]
        assert loaded.planning[0].psnr_4k == pytest.approx(21.0)
        assert loaded.planning[0].min_rmse is None
        assert loaded.target_paths == log.target_paths
        assert loaded.meta["bounds"] == [0.0, 0.0, 100.0, 100.0]

    def test_load_missing_meta(self, tmp_path):
        with pytest.raises(OutputError):
            load_log(tmp_path)

    def test_find_logs_skips_partial(self, tmp_path):
        write_log(_log(72), tmp_path / "a")
        write_log(_log(80), tmp_path / "nested" / "b")
        write_log(_log(88), tmp_path / "c" / "partial")
        assert find_logs(tmp_path) == [tmp_path / "a", tmp_path / "nested" / "b"]


class TestEmitReport:
    def test_outputs(self, tmp_path, block_city):
        logs = [_log(72, psnr=20.0), _log(80, psnr=22.0)]
        files = emit_report(logs, tmp_path, block_city)
        assert (tmp_path / "episodes.csv").exists()
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "summary_formatted.csv").exists()
        names = sorted(p.name for p in files["figures"])
        assert names == sorted(
            [
                "rmse_block_GTmap-MI_active_s72.png",
                "psnr_block_GTmap-MI_active_s72.png",
                "trajectory_block_GTmap-MI_active_s72.png",
                "rmse_block_GTmap-MI_active_s80.png",
                "psnr_block_GTmap-MI_active_s80.png",
                "trajectory_block_GTmap-MI_active_s80.png",
            ]
        )
        assert all(p.exists() for p in files["figures"])
        assert (tmp_path / "episodes" / "block_GTmap-MI_active_s72" / "meta.yaml").exists()

    def test_skips_empty_plots(self, tmp_path):
        files = emit_report([_log(72, rmses=[], num_targets=0)], tmp_path)
        assert [p.name for p in files["figures"]] == ["trajectory_block_GTmap-MI_active_s72.png"]
        episodes = pd.read_csv(tmp_path / "episodes.csv", keep_default_na=False)
        assert episodes.loc[0, "te_mean"] == NA

    def test_maps_do_not_collide(self, tmp_path):
        logs = [_log(1, psnr=20.0, map_name="alpha"), _log(1, psnr=24.0, map_name="beta")]
        files = emit_report(logs, tmp_path)
        dirs = sorted(p.name for p in (tmp_path / "episodes").iterdir())
        assert dirs == ["alpha_GTmap-MI_active_s1", "beta_GTmap-MI_active_s1"]
        assert len(set(files["episodes"])) == len(files["episodes"])
        assert load_log(tmp_path / "episodes" / "alpha_GTmap-MI_active_s1").map_name == "alpha"
        assert len(files["figures"]) == 6

    def test_repeated_episode_gets_suffix(self, tmp_path):
        emit_report([_log(1), _log(1)], tmp_path)
        dirs = sorted(p.name for p in (tmp_path / "episodes").iterdir())
        assert dirs == ["block_GTmap-MI_active_s1", "block_GTmap-MI_active_s1_2"]

    def test_requires_logs(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path)
