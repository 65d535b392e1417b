"""
实验编排服务
============

一次追逃实验的完整流程：初始化（爬升 + 2π 扫描采集初始图像、初始训练），
然后是规划步 / 控制步循环，逐控制步记录跟踪误差，逐规划步记录 PSNR 与决策。

设计思路:
1. 随机数按用途拆分为独立的子流（种子序列派生）：侦察机、目标、检测、场、初始化，
   任何一个模块多用或少用随机数都不会扰动其他模块
2. 每个控制步：渲染真值帧 → 加入场数据集 → 检测 → 预测 → 检测更新 → 未检测更新
   → 已观测缓冲区 → 记录指标
3. 未检测更新使用侦察机自己的可见性模型（GTmap 用真值，NeRF 用学习场），
   已观测缓冲区始终使用真值（目标能看到真实的 y_detect）
4. 规划步结束：目标移动 → 缓冲区计数/重置 → 场训练（在检查点记录 PSNR）
5. 任何模块异常都会先把已有日志写盘，再抛出 EpisodeAbortedError
"""

import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import structlog

from ..core.config import settings
from ..core.exceptions import DomainError, EpisodeAbortedError, log_exception
from ..models.agents import (
    ObjectiveWeights,
    ScoringMode,
    ScoutPolicyKind,
    SeenBuffer,
    TargetPolicyKind,
    TargetState,
)
from ..models.belief import FilterBank, MotionKernel
from ..models.city import CityMap, GroundGraph
from ..models.field import FieldEnsemble
from ..models.metrics import ControlRecord, MetricsLog, PlanningRecord, ScoutRecord
from ..models.sensing import CameraModel, DetectionModel, PoseSE3
from ..schemas.episode import EpisodeConfig, dump_episode_config
from . import (
    belief_service,
    citymap_service,
    flight_service,
    infogain_service,
    policy_service,
    raysim_service,
    report_service,
    scenefield_service,
)
from .infogain_service import ScoutPerception

# 配置日志
logger = structlog.get_logger(__name__)

_STREAMS = ("scout", "targets", "detect", "field", "init")


def rmse(true_pos, est_pos) -> float:
    """单目标瞬时跟踪误差：平面欧氏距离"""
    a = np.asarray(true_pos, dtype=np.float64).reshape(-1)[:2]
    b = np.asarray(est_pos, dtype=np.float64).reshape(-1)[:2]
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


def make_streams(seed: int) -> dict:
    """按用途派生独立的随机数生成器"""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def prepare_run_dir(config: EpisodeConfig, root: Optional[Path] = None, name: Optional[str] = None) -> Path:
    """创建带时间戳的输出目录并拷贝配置"""
    root = Path(root or settings.output_root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    label = (name or f"{config.label}_{config.targets.policy.value}").replace("+", "-").replace(":", "")
    run_dir = root / f"{stamp}_{label}_s{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_episode_config(config), encoding="utf-8")
    return run_dir


@dataclass
class World:
    """实验中不变的部分"""

    city: CityMap
    graph: GroundGraph
    camera: CameraModel
    kernel: MotionKernel
    detection: DetectionModel
    labels: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_config(cls, config: EpisodeConfig, city: Optional[CityMap] = None) -> "World":
        city = city or citymap_service.load_map(config.map_path)
        graph = citymap_service.build_ground_graph(city, config.grid.spacing, config.grid.connectivity)
        camera = CameraModel(
            fov=config.fov, width=config.camera.width, height=config.camera.height, d_max=config.camera.d_max
        )
        kernel = MotionKernel.corner_escape(config.kernel.radius, config.kernel.center, config.kernel.corner)
        detection = DetectionModel(
            p_detect=config.detection.p_detect,
            range_decay=config.detection.range_decay,
            target_height=config.detection.target_height,
        )
        return cls(
            city=city,
            graph=graph,
            camera=camera,
            kernel=kernel,
            detection=detection,
            labels=citymap_service.connected_labels(graph),
        )


class EpisodeService:
    """一次实验的状态与流程"""

    def __init__(
        self,
        config: EpisodeConfig,
        world: World,
        ensemble: Optional[FieldEnsemble] = None,
        out_dir: Optional[Path] = None,
        with_targets: bool = True,
    ):
        self.config = config
        self.world = world
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rngs = make_streams(config.seed)
        kind = config.scout_policy

        if kind.uses_field and ensemble is None:
            ensemble = scenefield_service.ensemble_from_config(world.city, world.camera, config.field)
        self.ensemble = ensemble if kind.uses_field else None
        self.pretrained = ensemble is not None and ensemble.steps_trained > 0

        obj = config.objective
        self.perception = ScoutPerception(
            city=world.city,
            graph=world.graph,
            camera=world.camera,
            detection=world.detection,
            weights=ObjectiveWeights(
                target=obj.lambda_target, rgb=obj.lambda_rgb, depth=obj.lambda_depth, occupancy=obj.lambda_occ
            ),
            mode=ScoringMode.FIELD_MI if kind.uses_field else ScoringMode.FILTERS_MI,
            ensemble=self.ensemble,
            scoring_camera=world.camera.scaled(obj.scoring_width, obj.scoring_height),
            channel=obj.detection_channel,
            sigma_threshold=config.field.sigma_threshold,
        )
        self.bank: FilterBank = belief_service.new_bank(world.graph, map_known=not kind.uses_field)
        self.seen = SeenBuffer(reset_period=config.targets.seen_reset_period)

        tcfg = config.targets
        count = tcfg.resolved_count if with_targets else 0
        budget = tcfg.active_budget_m if tcfg.policy == TargetPolicyKind.ACTIVE else tcfg.goal_budget_m
        self.targets: List[TargetState] = policy_service.spawn_targets(
            world.graph, self.rngs["targets"], count, tcfg.policy, budget
        )

        self.log = MetricsLog(
            seed=config.seed,
            scout_policy=config.label,
            target_policy=tcfg.policy.value,
            map_name=world.city.name,
            num_targets=len(self.targets),
        )
        self.log.meta.update(
            {
                "planning_steps": config.planning_steps,
                "control_steps": config.control_steps,
                "init_images": config.init_images,
                "training_budget": config.training_budget if kind.uses_field else 0,
                "bounds": list(world.city.bounds),
            }
        )
        for t in self.targets:
            self.log.target_paths[t.target_id] = [world.graph.node_xy[t.node].tolist()]
        self.step = 0
        self.pose = self._start_pose()

    # ------------------------------------------------------------------
    # 初始化阶段
    # ------------------------------------------------------------------

    def _start_pose(self) -> PoseSE3:
        city = self.world.city
        xy = np.asarray(self.config.start_xy if self.config.start_xy is not None else city.center, dtype=np.float64)
        if citymap_service.point_in_building(city, xy):
            node = self.world.graph.nearest_node(xy)
            if node is None:
                raise DomainError("No free start position on this map")
            xy = self.world.graph.node_xy[node]
        z0 = min(2.0, city.altitude_cap)
        return PoseSE3(position=np.array([xy[0], xy[1], z0]), yaw=0.0, pitch=math.radians(self.config.init_pitch_deg))

    def init_poses(self) -> List[PoseSE3]:
        """爬升到指定高度，再做一圈带随机俯仰扰动的 2π 偏航扫描"""
        cfg = self.config
        rng = self.rngs["init"]
        top = min(cfg.init_altitude or self.world.city.altitude_cap, self.world.city.altitude_cap)
        x, y, z0 = self.pose.position
        n_ascend = min(cfg.init_ascend_steps, cfg.init_images)
        n_scan = cfg.init_images - n_ascend
        base_pitch = math.radians(cfg.init_pitch_deg)
        jitter = math.radians(cfg.init_pitch_jitter_deg)

        poses = []
        for k in range(n_ascend):
            z = z0 + (top - z0) * (k + 1) / n_ascend
            poses.append(PoseSE3(position=np.array([x, y, z]), yaw=0.0, pitch=base_pitch))
        for k in range(n_scan):
            yaw = 2.0 * math.pi * (k + 1) / n_scan
            pitch = float(np.clip(base_pitch + rng.uniform(-jitter, jitter), -math.pi / 2.0, math.pi / 2.0))
            poses.append(PoseSE3(position=np.array([x, y, top]), yaw=yaw, pitch=pitch))
        return poses

    def run_init(self) -> None:
        for pose in self.init_poses():
            self.control_tick(pose)
        if self.ensemble is not None and not self.pretrained and self.config.init_training_steps > 0:
            scenefield_service.train(
                self.ensemble, self.config.init_training_steps, self.config.field.batch_rays, self.rngs["field"]
            )
        logger.info("Initial phase completed", frames=self.step, discovered=len(self.bank.assigned))

    # ------------------------------------------------------------------
    # 控制步
    # ------------------------------------------------------------------

    def control_tick(self, pose: PoseSE3) -> None:
        """执行一个控制步：采集、检测、滤波器更新、记录"""
        w = self.world
        if citymap_service.points_in_prisms(w.city, pose.position[None, :])[0]:
            raise DomainError("Scout pose inside a building", value=pose.as_tuple())

        frame = raysim_service.render_rgbd(w.city, pose, w.camera, timestamp=self.step)
        if self.ensemble is not None:
            scenefield_service.add_observation(self.ensemble, frame, self.rngs["field"])
        if self.out_dir is not None and self.config.export_frames:
            raysim_service.export_frame(frame, self.out_dir / "frames")

        positions = policy_service.target_positions(self.targets, w.graph)
        detections = raysim_service.detect_targets(
            w.city,
            pose,
            w.camera,
            positions,
            self.rngs["detect"],
            w.detection,
            [t.target_id for t in self.targets],
        )

        if self.step % self.config.predict_every == 0:
            self.bank = belief_service.bank_predict(self.bank, w.kernel, w.graph)
        self.bank = belief_service.bank_observe(self.bank, detections, w.graph)
        visible = self.perception.visible_mask(pose)
        self.bank = belief_service.bank_update_misses(
            self.bank, [d.target_id for d in detections], visible, self.perception.detection_probs(pose)
        )

        seen_nodes = raysim_service.visible_cells_gt(w.city, pose, w.camera, w.graph, w.detection.target_height)
        self.seen.observe(np.nonzero(seen_nodes)[0])

        self._record(pose, positions, len(detections))
        self.step += 1
        self.pose = pose

    def _record(self, pose: PoseSE3, positions: np.ndarray, n_detections: int) -> None:
        x, y, z, yaw, pitch = pose.as_tuple()
        self.log.scout.append(ScoutRecord(self.step, x, y, z, yaw, pitch, n_detections))
        for t, true_xy in zip(self.targets, positions):
            filt = self.bank.assigned.get(t.target_id, self.bank.spare)
            est = belief_service.estimate(filt, self.world.graph)
            self.log.control.append(
                ControlRecord(
                    step=self.step,
                    target_id=t.target_id,
                    true_x=float(true_xy[0]),
                    true_y=float(true_xy[1]),
                    est_x=float(est[0]),
                    est_y=float(est[1]),
                    rmse=rmse(true_xy, est),
                    discovered=self.bank.knows(t.target_id),
                )
            )

    # ------------------------------------------------------------------
    # 规划步
    # ------------------------------------------------------------------

    def _decide(self, planning_step: int):
        kind = self.config.scout_policy
        step_fn = policy_service.scout_step_mi if kind.uses_mi else policy_service.scout_step_map
        decision = step_fn(
            self.pose,
            self.bank,
            self.perception,
            self.rngs["scout"],
            self.config.candidates,
            self.config.flight,
        )
        if self.out_dir is not None:
            infogain_service.append_score_table(
                self.out_dir / "scores.csv", decision.flat_scores(), planning_step, decision.chosen_flat
            )
            flight_service.append_plan_csv(
                self.out_dir / "plans.csv", decision.plan, self.config.control_steps, planning_step
            )
        return decision

    def _train(self, budget: int) -> Tuple[Optional[float], Optional[float]]:
        """训练一个规划步的预算，在前两个检查点记录 PSNR"""
        if self.ensemble is None:
            return None, None
        cfg = self.config
        marks = sorted(c for c in cfg.psnr_checkpoints if 0 < c <= budget)
        values = {}
        done = 0
        for mark in marks:
            scenefield_service.train(self.ensemble, mark - done, cfg.field.batch_rays, self.rngs["field"])
            done = mark
            values[mark] = scenefield_service.recent_psnr(self.ensemble, cfg.psnr_window)
        if budget > done:
            scenefield_service.train(self.ensemble, budget - done, cfg.field.batch_rays, self.rngs["field"])
        ordered = [values[m] for m in marks]
        early = ordered[0] if ordered else None
        late = ordered[1] if len(ordered) > 1 else None
        return early, late

    def planning_step(self, k: int, budget: int) -> PlanningRecord:
        decision = self._decide(k)
        for pose in flight_service.sample_plan(decision.plan, self.config.control_steps):
            self.control_tick(pose)

        self.targets = policy_service.move_targets(
            self.targets,
            self.seen,
            self.world.graph,
            self.rngs["targets"],
            self.config.targets.goal_budget_m,
            self.world.labels,
        )
        for t in self.targets:
            self.log.target_paths[t.target_id].append(self.world.graph.node_xy[t.node].tolist())
        self.seen.tick()

        psnr_early, psnr_late = self._train(budget)
        if self.out_dir is not None and self.config.export_filters:
            belief_service.write_filter_snapshot(self.bank, self.world.graph, k, self.out_dir / "filters.csv")
        return self._planning_record(k, decision, psnr_early, psnr_late)

    def _planning_record(self, k: int, decision, psnr_early, psnr_late) -> PlanningRecord:
        chosen = decision.chosen
        x, y, z, yaw, pitch = chosen.pose.as_tuple()
        rec = PlanningRecord(
            planning_step=k,
            control_step=self.step - 1,
            psnr_2k=psnr_early,
            psnr_4k=psnr_late,
            chosen_x=x,
            chosen_y=y,
            chosen_z=z,
            chosen_yaw=yaw,
            chosen_pitch=pitch,
            score_total=chosen.total,
            score_rgb=chosen.rgb,
            score_depth=chosen.depth,
            score_occupancy=chosen.occupancy,
            score_detection=chosen.detection_total,
            discovered=len(self.bank.assigned),
        )
        last = [r for r in self.log.control if r.step == self.step - 1]
        if last:
            lo = min(last, key=lambda r: (r.rmse, r.target_id))
            hi = max(last, key=lambda r: (r.rmse, -r.target_id))
            rec.min_rmse, rec.min_target = lo.rmse, lo.target_id
            rec.max_rmse, rec.max_target = hi.rmse, hi.target_id
        self.log.planning.append(rec)
        logger.info(
            "Planning step completed",
            planning_step=k,
            control_step=self.step,
            discovered=rec.discovered,
            min_rmse=rec.min_rmse,
            max_rmse=rec.max_rmse,
            psnr=psnr_late if psnr_late is not None else psnr_early,
            goals=policy_service.target_goals(self.targets),
        )
        return rec

    def run(self, planning_steps: Optional[int] = None, budget: Optional[int] = None) -> MetricsLog:
        """运行完整实验；失败时先落盘部分日志"""
        planning_steps = self.config.planning_steps if planning_steps is None else planning_steps
        budget = self.config.training_budget if budget is None else budget
        try:
            self.run_init()
            for k in range(planning_steps):
                self.planning_step(k, budget)
        except Exception as e:
            log_exception(e, {"step": self.step, "seed": self.config.seed})
            partial = self._flush_partial()
            raise EpisodeAbortedError(f"Episode aborted: {e}", partial_log=str(partial), step=self.step) from e

        self.log.meta["control_ticks"] = self.step
        summary = {k: (None if math.isnan(v) else round(v, 3)) for k, v in self.log.tracking_summary().items()}
        logger.info(
            "Episode completed",
            label=self.config.label,
            seed=self.config.seed,
            control_ticks=self.step,
            **summary,
        )
        return self.log

    def _flush_partial(self) -> Path:
        target = (self.out_dir or Path(settings.output_root)) / "partial"
        self.log.meta["aborted_at"] = self.step
        return report_service.write_log(self.log, target)


def pretrain_ensemble(config: EpisodeConfig, world: World) -> FieldEnsemble:
    """
    离线预训练：无目标的 NeRF+MI 探索，每个规划步训练 pretrain_budget 步

    Returns:
        FieldEnsemble: 训练好的集成（包含探索中采集的数据集）
    """
    tour = config.model_copy(update={"seed": config.seed + 1, "scout_policy": ScoutPolicyKind.NERF_MI})
    runner = EpisodeService(tour, world, with_targets=False)
    runner.run(planning_steps=config.pretrain_planning_steps, budget=config.pretrain_budget)
    logger.info("Offline pretraining completed", frames=len(runner.ensemble.all_frames))
    return runner.ensemble


def run_episode(
    config: EpisodeConfig,
    out_dir: Optional[Path] = None,
    city: Optional[CityMap] = None,
) -> MetricsLog:
    """
    运行一次实验

    Args:
        config: 实验配置
        out_dir: 输出目录（None 时不写任何文件）
        city: 已加载的地图（默认按 config.map_path 加载）

    Returns:
        MetricsLog: 指标日志

    Raises:
        EpisodeAbortedError: 运行中任何模块出错（部分日志已写盘）
    """
    world = World.from_config(config, city)
    ensemble = None
    if config.offline_pretrain and config.scout_policy.uses_field:
        ensemble = pretrain_ensemble(config, world)
    runner = EpisodeService(config, world, ensemble=ensemble, out_dir=out_dir)
    log = runner.run()
    if out_dir is not None:
        report_service.write_log(log, out_dir)
        if runner.ensemble is not None:
            scenefield_service.save_ensemble(runner.ensemble, Path(out_dir) / "field")
    return log
