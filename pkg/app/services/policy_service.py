"""
策略服务
========

双方的决策：侦察机的候选生成与选择（MI 与 MAP 两种评分），
以及三种目标行为（静止、主动躲藏、随机目标点）。

设计思路:
1. 自由空间判定是可替换的 oracle：真值地图，或学习场密度阈值
   （学习场判定的结果再经真值地图复核，任何输出位姿都在真实自由空间中）
2. 候选 = D 个分布中心 × 每个 P 个粒子（高斯位置扰动，偏航/俯仰独立采样）
3. 多项式选择按分布平均分数（原始分数或 softmax），再取该分布内最好的粒子
4. 目标每个规划步移动一次；主动目标看到的是侦察机真实的可见集合
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..core.exceptions import SamplingExhaustedError
from ..models.agents import (
    CandidateScore,
    CandidateSet,
    ScoringMode,
    SeenBuffer,
    TargetPolicyKind,
    TargetState,
)
from ..models.belief import FilterBank
from ..models.city import CityMap, GroundGraph
from ..models.sensing import PoseSE3
from ..models.trajectory import TrajectoryPlan
from . import citymap_service, flight_service, infogain_service, scenefield_service
from .infogain_service import ScoutPerception

# 配置日志
logger = structlog.get_logger(__name__)

OccupiedFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# 自由空间 oracle
# ---------------------------------------------------------------------------


def ground_truth_oracle(city: CityMap) -> OccupiedFn:
    """真值地图：点在棱柱内即占据"""
    return lambda points: citymap_service.points_in_prisms(city, points)


def field_oracle(perception: ScoutPerception) -> OccupiedFn:
    """学习场：密度超过阈值即占据；再用真值地图复核"""
    ensemble = perception.ensemble
    city = perception.city

    def occupied(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        learned = scenefield_service.lookup_occupancy(ensemble, perception.occupancy(), pts)
        return learned | citymap_service.points_in_prisms(city, pts)

    return occupied


def oracle_for(perception: ScoutPerception) -> OccupiedFn:
    if perception.mode == ScoringMode.FIELD_MI and perception.ensemble is not None:
        return field_oracle(perception)
    return ground_truth_oracle(perception.city)


# ---------------------------------------------------------------------------
# 候选生成
# ---------------------------------------------------------------------------


def _altitude_range(city: CityMap, cfg) -> Tuple[float, float]:
    z_hi = city.altitude_cap if cfg.z_max is None else min(cfg.z_max, city.altitude_cap)
    return min(cfg.z_min, z_hi), z_hi


def _sample_center(
    city: CityMap, occupied: OccupiedFn, rng: np.random.Generator, scout_xy, cfg
) -> np.ndarray:
    """自由空间中的分布中心（可限制在侦察机周围 radius 内）"""
    xmin, ymin, xmax, ymax = city.bounds
    if cfg.radius is not None:
        xmin, xmax = max(xmin, scout_xy[0] - cfg.radius), min(xmax, scout_xy[0] + cfg.radius)
        ymin, ymax = max(ymin, scout_xy[1] - cfg.radius), min(ymax, scout_xy[1] + cfg.radius)
    z_lo, z_hi = _altitude_range(city, cfg)
    lo = np.array([xmin, ymin, z_lo])
    hi = np.array([xmax, ymax, z_hi])
    for _ in range(cfg.max_attempts):
        p = lo + rng.random(3) * (hi - lo)
        if cfg.radius is not None and math.hypot(p[0] - scout_xy[0], p[1] - scout_xy[1]) > cfg.radius:
            continue
        if not occupied(p[None, :])[0]:
            return p
    raise SamplingExhaustedError("Candidate center sampling exhausted", attempts=cfg.max_attempts)


def _jitter(
    city: CityMap, occupied: OccupiedFn, rng: np.random.Generator, center: np.ndarray, cfg
) -> np.ndarray:
    """中心附近的高斯扰动位置，落在障碍物或边界外则重采"""
    z_lo, z_hi = _altitude_range(city, cfg)
    for _ in range(cfg.max_attempts):
        p = center + rng.normal(0.0, cfg.jitter_sigma, size=3)
        if not city.contains_xy(p[None, :2])[0] or not (z_lo <= p[2] <= z_hi):
            continue
        if not occupied(p[None, :])[0]:
            return p
    raise SamplingExhaustedError("Candidate jitter sampling exhausted", attempts=cfg.max_attempts)


def propose_candidates(
    city: CityMap,
    scout_pose: PoseSE3,
    rng: np.random.Generator,
    cfg,
    occupied: Optional[OccupiedFn] = None,
) -> CandidateSet:
    """
    生成候选集合

    Args:
        city: 地图（边界与高度上限）
        scout_pose: 当前侦察机位姿（radius 限制的中心）
        rng: 随机数生成器
        cfg: CandidateConfig
        occupied: 自由空间 oracle，默认真值地图

    Raises:
        SamplingExhaustedError: 拒绝采样达到上限
    """
    occupied = occupied or ground_truth_oracle(city)
    pitch_lo, pitch_hi = math.radians(cfg.pitch_min_deg), math.radians(cfg.pitch_max_deg)
    centers = []
    particles: List[List[PoseSE3]] = []
    for _ in range(cfg.distributions):
        c = _sample_center(city, occupied, rng, scout_pose.position[:2], cfg)
        centers.append(c)
        dist = []
        for _ in range(cfg.particles):
            p = _jitter(city, occupied, rng, c, cfg)
            yaw = float(rng.uniform(0.0, 2.0 * math.pi))
            pitch = float(rng.uniform(pitch_lo, pitch_hi))
            dist.append(PoseSE3(position=p, yaw=yaw, pitch=pitch))
        particles.append(dist)
    return CandidateSet(centers=np.asarray(centers), particles=particles)


def score_candidates(
    candidates: CandidateSet, score_fn: Callable[[PoseSE3], CandidateScore]
) -> List[List[CandidateScore]]:
    """逐粒子评分，并把总分写入 candidates.particle_scores"""
    scores = [[score_fn(p) for p in dist] for dist in candidates.particles]
    candidates.particle_scores = np.array([[s.total for s in row] for row in scores], dtype=np.float64)
    return scores


# ---------------------------------------------------------------------------
# 选择
# ---------------------------------------------------------------------------


def selection_weights(scores: np.ndarray, weighting: str = "raw", temperature: float = 1.0) -> np.ndarray:
    """分布得分 → 选择概率；原始分数为 max(s, 0)，全部 ≤ 0 时均匀"""
    s = np.asarray(scores, dtype=np.float64)
    if weighting == "softmax":
        z = (s - s.max()) / temperature
        w = np.exp(z)
    else:
        w = np.maximum(s, 0.0)
    total = w.sum()
    if not total > 0.0 or not np.isfinite(total):
        return np.full(s.shape, 1.0 / s.size)
    return w / total


def select_waypoint(
    candidates: CandidateSet,
    rng: np.random.Generator,
    selection: str = "multinomial",
    weighting: str = "raw",
    temperature: float = 1.0,
) -> Tuple[int, int]:
    """
    选择航点

    Returns:
        (分布下标, 粒子下标)；并列时取最小下标
    """
    scores = candidates.particle_scores
    if scores is None or scores.size == 0:
        raise ValueError("candidates must be scored before selection")
    if selection == "argmax":
        flat = int(np.argmax(scores))
        return divmod(flat, scores.shape[1])

    probs = selection_weights(scores.mean(axis=1), weighting, temperature)
    d = int(rng.choice(probs.size, p=probs))
    return d, int(np.argmax(scores[d]))


# ---------------------------------------------------------------------------
# 侦察机
# ---------------------------------------------------------------------------


@dataclass
class ScoutDecision:
    """一个规划步的侦察机决策"""

    plan: TrajectoryPlan
    candidates: CandidateSet
    scores: List[List[CandidateScore]]
    chosen_index: Tuple[int, int]

    @property
    def chosen(self) -> CandidateScore:
        d, p = self.chosen_index
        return self.scores[d][p]

    def flat_scores(self) -> List[CandidateScore]:
        return [s for row in self.scores for s in row]

    @property
    def chosen_flat(self) -> int:
        d, p = self.chosen_index
        return d * len(self.scores[0]) + p


def _scout_step(
    scout_pose: PoseSE3,
    perception: ScoutPerception,
    rng: np.random.Generator,
    candidate_cfg,
    flight_cfg,
    score_fn: Callable[[PoseSE3], CandidateScore],
) -> ScoutDecision:
    city = perception.city
    candidates = propose_candidates(city, scout_pose, rng, candidate_cfg, oracle_for(perception))
    scores = score_candidates(candidates, score_fn)
    d, p = select_waypoint(
        candidates, rng, candidate_cfg.selection, candidate_cfg.weighting, candidate_cfg.temperature
    )
    goal = candidates.particles[d][p]
    plan = flight_service.plan_from_config(city, scout_pose, goal, flight_cfg)
    decision = ScoutDecision(plan=plan, candidates=candidates, scores=scores, chosen_index=(d, p))
    chosen = decision.chosen
    logger.info(
        "Waypoint selected",
        distribution=d,
        particle=p,
        x=round(float(goal.position[0]), 2),
        y=round(float(goal.position[1]), 2),
        z=round(float(goal.position[2]), 2),
        total=round(chosen.total, 6),
        rgb=round(chosen.rgb, 6),
        depth=round(chosen.depth, 6),
        occupancy=round(chosen.occupancy, 6),
        detection=round(chosen.detection_total, 6),
    )
    return decision


def scout_step_mi(
    scout_pose: PoseSE3,
    bank: FilterBank,
    perception: ScoutPerception,
    rng: np.random.Generator,
    candidate_cfg,
    flight_cfg,
) -> ScoutDecision:
    """互信息侦察机：候选 → score_candidate → 选择 → 航线与最小 snap 计划"""
    return _scout_step(
        scout_pose,
        perception,
        rng,
        candidate_cfg,
        flight_cfg,
        lambda pose: infogain_service.score_candidate(pose, bank, perception),
    )


def scout_step_map(
    scout_pose: PoseSE3,
    bank: FilterBank,
    perception: ScoutPerception,
    rng: np.random.Generator,
    candidate_cfg,
    flight_cfg,
) -> ScoutDecision:
    """贪心侦察机：最大化期望检测到的后验质量"""
    return _scout_step(
        scout_pose,
        perception,
        rng,
        candidate_cfg,
        flight_cfg,
        lambda pose: infogain_service.score_map_candidate(pose, bank, perception),
    )


# ---------------------------------------------------------------------------
# 目标
# ---------------------------------------------------------------------------


def spawn_targets(
    graph: GroundGraph,
    rng: np.random.Generator,
    count: int,
    policy: TargetPolicyKind,
    budget_m: Optional[float] = None,
) -> List[TargetState]:
    """在不同的自由节点上放置目标（节点不足时允许重复）"""
    if count == 0:
        return []
    if graph.num_nodes == 0:
        raise ValueError("cannot place targets on an empty graph")
    nodes = rng.choice(graph.num_nodes, size=count, replace=count > graph.num_nodes)
    return [
        TargetState(target_id=k, node=int(n), policy=policy, budget_m=budget_m, history=[int(n)])
        for k, n in enumerate(nodes)
    ]


def _advance(state: TargetState, graph: GroundGraph, budget_m: Optional[float]) -> TargetState:
    """沿待走路径前进，累计边长不超过预算"""
    node = state.node
    path = list(state.path)
    history = list(state.history)
    used = 0.0
    while path:
        step = float(np.linalg.norm(graph.node_xy[path[0]] - graph.node_xy[node]))
        if budget_m is not None and used + step > budget_m + 1e-9:
            break
        used += step
        node = path.pop(0)
        history.append(node)
    return replace(state, node=node, path=path, history=history)


def _plan_to(state: TargetState, graph: GroundGraph, goal: int) -> TargetState:
    result = citymap_service.shortest_path(graph, state.node, goal)
    if not result.reachable:
        return replace(state, goal=None, path=[])
    return replace(state, goal=goal, path=list(result.nodes[1:]))


def target_step_stationary(state: TargetState) -> TargetState:
    return state


def target_step_active(
    state: TargetState,
    seen: SeenBuffer,
    graph: GroundGraph,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
) -> TargetState:
    """
    主动躲藏：没有待走路径时，从同一连通分量里侦察机未见过的节点中均匀选一个，
    沿最短路前往；所有节点都被看到时原地不动
    """
    if not state.path:
        labels = citymap_service.connected_labels(graph) if labels is None else labels
        same = np.nonzero(labels == labels[state.node])[0]
        unseen = np.array([n for n in same if int(n) not in seen.seen and int(n) != state.node], dtype=np.int64)
        if unseen.size == 0:
            return state
        goal = int(unseen[rng.integers(unseen.size)])
        state = _plan_to(state, graph, goal)
    return _advance(state, graph, state.budget_m)


def target_step_goal(
    state: TargetState,
    graph: GroundGraph,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
    budget_m: float = 100.0,
) -> TargetState:
    """随机目标点：到达（或没有目标）时重新抽取，每个规划步最多移动 budget_m"""
    if state.goal is None or state.goal == state.node or not state.path:
        labels = citymap_service.connected_labels(graph) if labels is None else labels
        same = np.nonzero(labels == labels[state.node])[0]
        others = same[same != state.node]
        if others.size == 0:
            return state
        goal = int(others[rng.integers(others.size)])
        state = _plan_to(state, graph, goal)
    budget = state.budget_m if state.budget_m is not None else budget_m
    return _advance(state, graph, budget)


def move_targets(
    targets: Sequence[TargetState],
    seen: SeenBuffer,
    graph: GroundGraph,
    rng: np.random.Generator,
    goal_budget_m: float = 100.0,
    labels: Optional[np.ndarray] = None,
) -> List[TargetState]:
    """所有目标按各自策略移动一个规划步（按编号顺序消耗随机数）"""
    if not targets:
        return []
    labels = citymap_service.connected_labels(graph) if labels is None else labels
    moved: List[TargetState] = []
    for t in sorted(targets, key=lambda s: s.target_id):
        if t.policy == TargetPolicyKind.ACTIVE:
            moved.append(target_step_active(t, seen, graph, rng, labels))
        elif t.policy == TargetPolicyKind.GOAL:
            moved.append(target_step_goal(t, graph, rng, labels, goal_budget_m))
        else:
            moved.append(target_step_stationary(t))
    return moved


def target_positions(targets: Sequence[TargetState], graph: GroundGraph) -> np.ndarray:
    if not targets:
        return np.zeros((0, 2))
    return np.array([graph.node_xy[t.node] for t in targets])


def target_goals(targets: Sequence[TargetState]) -> Dict[int, Optional[int]]:
    return {t.target_id: t.goal for t in targets}
