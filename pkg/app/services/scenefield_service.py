"""
场景辐射场服务
==============

学习得到的场景表示：两个体素场成员在自助采样的 RGB-D 数据上在线训练，
用体渲染公式渲染颜色/深度及其方差、逃逸概率，并为滤波器回答可见性查询。

设计思路:
1. 光线先与场的包围盒求交，在盒内做 n 点均匀求积；参数 t 即为光轴深度
2. 合成权重 w_i = T_i (1 − exp(−σ_i δ_i))，逃逸概率为 T_n，方差为 w 加权的二阶中心矩
3. 损失：命中光线上的 ℓ1 颜色 + λ2·ℓ1 深度，全部光线上的逃逸二元交叉熵
4. 梯度解析求出，经三线性权重散射回体素（bincount），密度再乘 softplus 导数
5. 训练在工作副本上进行，一批训练结束后整体发布参数
6. 可见性：两个成员的占据网格取并集，沿视线按体素步长行进
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from ..core.config import settings
from ..core.exceptions import CheckpointError, DimensionMismatchError, EmptyDatasetError
from ..models.city import CityMap
from ..models.field import (
    FieldEnsemble,
    ObservationStore,
    OptimizerState,
    RenderSample,
    VoxelMember,
    inverse_softplus,
)
from ..models.sensing import CameraModel, PoseSE3, RgbdFrame
from .raysim_service import SKY_COLOR, in_frustum, ray_directions

# 配置日志
logger = structlog.get_logger(__name__)

PSNR_CAP = 99.0
BCE_EPS = 1e-6

_CKPT_MAGIC = b"CSFIELD1"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII6d3IQdId")
_FLAG_ADAM = 1
_FLAG_MOMENTS = 2

_DEFAULT_CHUNK = 4096
_MARCH_CHUNK = 512


def create_member(
    bounds: Tuple[float, float, float, float, float, float],
    resolution: int,
    init_sigma: float = 1e-3,
    optimizer: Optional[OptimizerState] = None,
) -> VoxelMember:
    """常数密度、灰色的体素成员"""
    shape = (resolution, resolution, resolution)
    return VoxelMember(
        bounds=tuple(float(b) for b in bounds),
        resolution=shape,
        density_raw=np.full(shape, inverse_softplus(init_sigma)),
        color=np.full(shape + (3,), 0.5),
        optimizer=optimizer or OptimizerState(),
    )


def create_ensemble(
    city: CityMap,
    camera: CameraModel,
    members: int = 2,
    resolution: int = 96,
    init_sigma: float = 1e-3,
    optimizer: str = "adam",
    learning_rate: float = 0.05,
    decay_every: int = 2000,
    decay_factor: float = 0.5,
    loss_weights: Sequence[float] = (1.0, 0.01, 0.1),
    quadrature: int = 128,
    recent_window: int = 5,
    adaptive_balance: bool = True,
    balance_every: int = 100,
) -> FieldEnsemble:
    """
    创建体素场集成，包围盒为地图边界 × [ground_z, altitude_cap]

    所有成员初始化相同；差异只来自自助采样的数据集。
    """
    xmin, ymin, xmax, ymax = city.bounds
    bounds = (xmin, xmax, ymin, ymax, city.ground_z, city.altitude_cap)
    ms = [
        create_member(
            bounds,
            resolution,
            init_sigma,
            OptimizerState(
                kind=optimizer,
                learning_rate=learning_rate,
                decay_every=decay_every,
                decay_factor=decay_factor,
            ),
        )
        for _ in range(members)
    ]
    ensemble = FieldEnsemble(
        members=ms,
        datasets=[ObservationStore() for _ in range(members)],
        loss_weights=list(loss_weights),
        running_terms=np.zeros((members, 2)),
        camera=camera,
        quadrature=quadrature,
        recent_window=recent_window,
        adaptive_balance=adaptive_balance,
        balance_every=balance_every,
    )
    logger.info("Field ensemble created", members=members, resolution=resolution, bounds=bounds)
    return ensemble


def ensemble_from_config(city: CityMap, camera: CameraModel, cfg) -> FieldEnsemble:
    """由 FieldConfig 创建集成"""
    return create_ensemble(
        city,
        camera,
        members=cfg.members,
        resolution=cfg.resolution,
        init_sigma=cfg.init_sigma,
        optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        decay_every=cfg.decay_every,
        decay_factor=cfg.decay_factor,
        loss_weights=(cfg.lambda_rgb, cfg.lambda_depth, cfg.lambda_escape),
        quadrature=cfg.quadrature_steps,
        recent_window=cfg.recent_window,
        adaptive_balance=cfg.adaptive_balance,
        balance_every=cfg.balance_every,
    )


# ---------------------------------------------------------------------------
# 采样与插值
# ---------------------------------------------------------------------------


def _ray_box(member: VoxelMember, origins: np.ndarray, dirs: np.ndarray, d_max: float):
    """光线与包围盒的参数区间 [t_near, t_far]（已截断到 [0, d_max]）"""
    lo, hi = member.lower, member.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - origins) / dirs
        t2 = (hi[None, :] - origins) / dirs
    flat = dirs == 0.0
    inside = (origins >= lo[None, :]) & (origins <= hi[None, :])
    t_lo = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(t_lo.max(axis=1), 0.0)
    t_far = np.minimum(t_hi.min(axis=1), d_max)
    valid = t_far > t_near
    # 未穿过包围盒的光线退化为零长度区间
    return np.where(valid, t_near, 0.0), np.where(valid, t_far, 0.0)


def _trilinear(member: VoxelMember, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    三线性插值的角点下标和权重

    Args:
        points: (..., 3)

    Returns:
        (idx, w): 形状 (..., 8) 的展平体素下标与权重
    """
    res = np.asarray(member.resolution)
    g = (points - member.lower) / member.voxel_size - 0.5
    g = np.clip(g, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), np.maximum(res - 2, 0))
    frac = g - i0
    i1 = np.minimum(i0 + 1, res - 1)

    ny, nz = member.resolution[1], member.resolution[2]
    idx = []
    wts = []
    for cx in (0, 1):
        ix = i1[..., 0] if cx else i0[..., 0]
        wx = frac[..., 0] if cx else 1.0 - frac[..., 0]
        for cy in (0, 1):
            iy = i1[..., 1] if cy else i0[..., 1]
            wy = frac[..., 1] if cy else 1.0 - frac[..., 1]
            for cz in (0, 1):
                iz = i1[..., 2] if cz else i0[..., 2]
                wz = frac[..., 2] if cz else 1.0 - frac[..., 2]
                idx.append((ix * ny + iy) * nz + iz)
                wts.append(wx * wy * wz)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


@dataclass
class _RayPass:
    """一批光线的前向中间量（用于反向传播）"""

    idx: np.ndarray  # (R, n, 8)
    tri: np.ndarray  # (R, n, 8)
    delta: np.ndarray  # (R, n) 米
    s: np.ndarray  # (R, n) 光轴深度
    sigma: np.ndarray  # (R, n)
    color: np.ndarray  # (R, n, 3)
    trans_next: np.ndarray  # (R, n) T_{i+1}
    weights: np.ndarray  # (R, n)
    escape: np.ndarray  # (R,)
    rgb: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)


def _forward(
    member: VoxelMember,
    origins: np.ndarray,
    dirs: np.ndarray,
    quadrature: int,
    d_max: float,
    sigma_grid: Optional[np.ndarray] = None,
) -> _RayPass:
    """体渲染前向计算"""
    t_near, t_far = _ray_box(member, origins, dirs, d_max)
    step = (t_far - t_near) / quadrature
    s = t_near[:, None] + (np.arange(quadrature)[None, :] + 0.5) * step[:, None]
    delta = np.repeat((step * np.linalg.norm(dirs, axis=1))[:, None], quadrature, axis=1)
    points = origins[:, None, :] + s[..., None] * dirs[:, None, :]

    idx, tri = _trilinear(member, points)
    if sigma_grid is None:
        sigma_grid = member.sigma
    sigma = np.sum(tri * sigma_grid.reshape(-1)[idx], axis=-1)
    color_flat = member.color.reshape(-1, 3)
    color = np.sum(tri[..., None] * color_flat[idx], axis=-2)

    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans_next = np.exp(-cum)
    trans = np.exp(-(cum - tau))
    weights = trans - trans_next
    escape = trans_next[:, -1]
    rgb = np.sum(weights[..., None] * color, axis=1)
    depth = np.sum(weights * s, axis=1)
    return _RayPass(idx, tri, delta, s, sigma, color, trans_next, weights, escape, rgb, depth)


def _to_sample(fp: _RayPass) -> RenderSample:
    rgb_var = np.sum(fp.weights[..., None] * (fp.color - fp.rgb[:, None, :]) ** 2, axis=1)
    depth_var = np.sum(fp.weights * (fp.s - fp.depth[:, None]) ** 2, axis=1)
    return RenderSample(
        rgb=fp.rgb,
        depth=fp.depth,
        rgb_var=rgb_var,
        depth_var=depth_var,
        escape=fp.escape,
        weights_sum=fp.weights.sum(axis=1),
    )


def render_rays(
    member: VoxelMember,
    origins: np.ndarray,
    dirs: np.ndarray,
    quadrature: int = 128,
    d_max: float = 1000.0,
) -> RenderSample:
    """渲染任意一批光线 (R,)"""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if origins.shape[0] == 1 and dirs.shape[0] > 1:
        origins = np.repeat(origins, dirs.shape[0], axis=0)
    chunk = settings.render_chunk_rays or _DEFAULT_CHUNK
    sigma_grid = member.sigma
    parts = [
        _to_sample(_forward(member, origins[i : i + chunk], dirs[i : i + chunk], quadrature, d_max, sigma_grid))
        for i in range(0, dirs.shape[0], chunk)
    ]
    return RenderSample(
        rgb=np.concatenate([p.rgb for p in parts]),
        depth=np.concatenate([p.depth for p in parts]),
        rgb_var=np.concatenate([p.rgb_var for p in parts]),
        depth_var=np.concatenate([p.depth_var for p in parts]),
        escape=np.concatenate([p.escape for p in parts]),
        weights_sum=np.concatenate([p.weights_sum for p in parts]),
    )


def render_member(member: VoxelMember, pose: PoseSE3, cam: CameraModel, quadrature: int = 128) -> RenderSample:
    """
    渲染单个成员的一帧

    Args:
        member: 体素成员
        pose: 相机位姿
        cam: 相机模型
        quadrature: 每条光线的求积点数（≥ 2）

    Returns:
        RenderSample: 各量形状为 (H, W) 或 (H, W, 3)
    """
    if quadrature < 2:
        raise ValueError("quadrature needs at least 2 steps")
    dirs = ray_directions(pose, cam).reshape(-1, 3)
    flat = render_rays(member, pose.position[None, :], dirs, quadrature, cam.d_max)
    h, w = cam.height, cam.width
    return RenderSample(
        rgb=flat.rgb.reshape(h, w, 3),
        depth=flat.depth.reshape(h, w),
        rgb_var=flat.rgb_var.reshape(h, w, 3),
        depth_var=flat.depth_var.reshape(h, w),
        escape=flat.escape.reshape(h, w),
        weights_sum=flat.weights_sum.reshape(h, w),
    )


def render_ensemble(
    ensemble: FieldEnsemble, pose: PoseSE3, cam: Optional[CameraModel] = None, quadrature: Optional[int] = None
) -> List[RenderSample]:
    cam = cam or ensemble.camera
    n = quadrature or ensemble.quadrature
    return [render_member(m, pose, cam, n) for m in ensemble.members]


def predicted_frame(ensemble: FieldEnsemble, pose: PoseSE3, cam: Optional[CameraModel] = None) -> np.ndarray:
    """成员平均、叠加天空背景后的预测颜色图，用于 PSNR"""
    samples = render_ensemble(ensemble, pose, cam)
    return np.mean([s.composite(SKY_COLOR) for s in samples], axis=0)


# ---------------------------------------------------------------------------
# 损失与梯度
# ---------------------------------------------------------------------------


@dataclass
class RayBatch:
    """一批训练光线及其真值"""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    rgb: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    d_max: float

    @property
    def hit(self) -> np.ndarray:
        return self.depth <= self.d_max


@dataclass
class LossGradient:
    """单成员的损失及对参数的梯度"""

    loss: float
    rgb_term: float
    depth_term: float
    escape_term: float
    grad_raw: np.ndarray  # 与 density_raw 同形
    grad_color: np.ndarray  # 与 color 同形
    touched: np.ndarray  # 被更新的展平体素下标


def loss_and_grad(
    member: VoxelMember,
    batch: RayBatch,
    loss_weights: Sequence[float],
    quadrature: int,
) -> LossGradient:
    """
    计算一批光线上的损失和解析梯度

    τ_k = σ_k δ_k 时有 ∂L/∂τ_k = T_{k+1} v_k − Σ_{i>k} w_i v_i − g_E · T_n，
    其中 v_i = g_rgb · c_i + g_D · s_i。
    """
    lam_rgb, lam_depth, lam_esc = loss_weights
    fp = _forward(member, batch.origins, batch.dirs, quadrature, batch.d_max)
    r = batch.rgb.shape[0]
    hit = batch.hit
    n_hit = max(int(hit.sum()), 1)

    rgb_res = fp.rgb - batch.rgb
    depth_res = fp.depth - batch.depth
    rgb_term = float(np.sum(np.abs(rgb_res[hit])) / (3.0 * n_hit))
    depth_term = float(np.sum(np.abs(depth_res[hit])) / n_hit)

    target = (~hit).astype(np.float64)
    e = fp.escape
    e_clip = np.clip(e, BCE_EPS, 1.0 - BCE_EPS)
    bce = -(target * np.log(e_clip) + (1.0 - target) * np.log(1.0 - e_clip))
    escape_term = float(bce.mean())
    loss = lam_rgb * rgb_term + lam_depth * depth_term + lam_esc * escape_term

    g_rgb = np.where(hit[:, None], lam_rgb * np.sign(rgb_res) / (3.0 * n_hit), 0.0)
    g_depth = np.where(hit, lam_depth * np.sign(depth_res) / n_hit, 0.0)
    inside = (e > BCE_EPS) & (e < 1.0 - BCE_EPS)
    g_esc = np.where(inside, lam_esc * (e - target) / (e * (1.0 - e)) / r, 0.0)

    v = np.sum(g_rgb[:, None, :] * fp.color, axis=-1) + g_depth[:, None] * fp.s
    wv = fp.weights * v
    suffix = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1] - wv
    g_tau = fp.trans_next * v - suffix - (g_esc * fp.escape)[:, None]
    g_sigma = g_tau * fp.delta
    g_color = fp.weights[..., None] * g_rgb[:, None, :]

    n_vox = member.density_raw.size
    flat_idx = fp.idx.reshape(-1)
    tri = fp.tri.reshape(-1, 8)
    g_sigma_vox = np.bincount(flat_idx, weights=(tri * g_sigma.reshape(-1, 1)).reshape(-1), minlength=n_vox)
    grad_raw = (g_sigma_vox / (1.0 + np.exp(-member.density_raw.reshape(-1)))).reshape(member.density_raw.shape)

    gc = g_color.reshape(-1, 3)
    grad_color = np.stack(
        [
            np.bincount(flat_idx, weights=(tri * gc[:, c : c + 1]).reshape(-1), minlength=n_vox)
            for c in range(3)
        ],
        axis=-1,
    ).reshape(member.color.shape)

    return LossGradient(
        loss=float(loss),
        rgb_term=rgb_term,
        depth_term=depth_term,
        escape_term=escape_term,
        grad_raw=grad_raw,
        grad_color=grad_color,
        touched=np.unique(flat_idx),
    )


def batch_loss(member: VoxelMember, batch: RayBatch, loss_weights: Sequence[float], quadrature: int) -> float:
    """只求损失（用于有限差分检查）"""
    return loss_and_grad(member, batch, loss_weights, quadrature).loss


def _apply_update(
    opt: OptimizerState, raw: np.ndarray, color: np.ndarray, grad: LossGradient
) -> None:
    """在工作副本上原地更新被触及的体素"""
    lr = opt.current_rate()
    touched = grad.touched
    raw_f = raw.reshape(-1)
    col_f = color.reshape(-1, 3)
    g_raw = grad.grad_raw.reshape(-1)[touched]
    g_col = grad.grad_color.reshape(-1, 3)[touched]

    if opt.kind == "adam":
        if opt.m_density is None:
            opt.m_density = np.zeros(raw.size)
            opt.v_density = np.zeros(raw.size)
            opt.m_color = np.zeros((raw.size, 3))
            opt.v_color = np.zeros((raw.size, 3))
        t = opt.step + 1
        b1, b2 = opt.beta1, opt.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t

        m = b1 * opt.m_density[touched] + (1.0 - b1) * g_raw
        v = b2 * opt.v_density[touched] + (1.0 - b2) * g_raw**2
        opt.m_density[touched] = m
        opt.v_density[touched] = v
        raw_f[touched] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)

        m = b1 * opt.m_color[touched] + (1.0 - b1) * g_col
        v = b2 * opt.v_color[touched] + (1.0 - b2) * g_col**2
        opt.m_color[touched] = m
        opt.v_color[touched] = v
        col_f[touched] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    else:
        raw_f[touched] -= lr * g_raw
        col_f[touched] -= lr * g_col

    col_f[touched] = np.clip(col_f[touched], 0.0, 1.0)
    opt.step += 1


# ---------------------------------------------------------------------------
# 数据集与训练
# ---------------------------------------------------------------------------


def add_observation(ensemble: FieldEnsemble, frame: RgbdFrame, rng: np.random.Generator) -> List[int]:
    """
    将一帧加入每个成员的自助采样数据集

    每个成员独立抽取 Poisson(1) 重复次数；成员数据集为空时第一帧至少插入一次。

    Returns:
        List[int]: 每个成员的重复次数
    """
    ensemble.all_frames.append(frame)
    counts = []
    for store in ensemble.datasets:
        k = int(rng.poisson(1.0))
        if k == 0 and len(store) == 0:
            k = 1
        store.add(frame, k)
        counts.append(k)
    ensemble.version += 1
    return counts


def _pixel_rays(frames: List[RgbdFrame], frame_idx: np.ndarray, pixel: np.ndarray, cam: CameraModel):
    """按 (帧, 像素) 取出光线与真值"""
    origins = np.empty((frame_idx.size, 3))
    dirs = np.empty((frame_idx.size, 3))
    rgb = np.empty((frame_idx.size, 3))
    depth = np.empty(frame_idx.size)
    for k, (fi, px) in enumerate(zip(frame_idx, pixel)):
        frame = frames[fi]
        h, w = frame.depth.shape
        v, u = divmod(int(px), w)
        c = cam.scaled(w, h)
        x = (u + 0.5 - w / 2.0) / c.focal
        y = (v + 0.5 - h / 2.0) / c.focal
        pose = frame.pose
        origins[k] = pose.position
        dirs[k] = pose.forward + x * pose.right - y * pose.up
        rgb[k] = frame.rgb[v, u]
        depth[k] = frame.depth[v, u]
    return origins, dirs, rgb, depth


def sample_batch(
    store: ObservationStore,
    cam: CameraModel,
    batch_size: int,
    recent_window: int,
    rng: np.random.Generator,
) -> RayBatch:
    """
    采样训练光线：一半来自最近的若干帧，一半在全部历史上均匀采样
    """
    entries = np.asarray(store.entries, dtype=np.int64)
    recent_from = len(store.frames) - recent_window
    recent = entries[entries >= recent_from]
    if recent.size == 0:
        recent = entries

    n_recent = batch_size // 2
    n_uniform = batch_size - n_recent
    picks = np.concatenate(
        [
            recent[rng.integers(0, recent.size, size=n_recent)],
            entries[rng.integers(0, entries.size, size=n_uniform)],
        ]
    )
    sizes = np.array([store.frames[i].depth.size for i in picks])
    pixels = np.floor(rng.random(picks.size) * sizes).astype(np.int64)
    origins, dirs, rgb, depth = _pixel_rays(store.frames, picks, pixels, cam)
    return RayBatch(origins=origins, dirs=dirs, rgb=rgb, depth=depth, d_max=cam.d_max)


def _rebalance(ensemble: FieldEnsemble) -> None:
    """把 λ_depth 调整到使两项滑动均值相差不超过 2 倍"""
    rgb_mean, depth_mean = ensemble.running_terms.mean(axis=0)
    if rgb_mean <= 0.0 or depth_mean <= 0.0:
        return
    lam_rgb, lam_depth = ensemble.loss_weights[0], ensemble.loss_weights[1]
    ratio = lam_depth * depth_mean / (lam_rgb * rgb_mean)
    if ratio > 2.0:
        ensemble.loss_weights[1] = 2.0 * lam_rgb * rgb_mean / depth_mean
    elif ratio < 0.5:
        ensemble.loss_weights[1] = 0.5 * lam_rgb * rgb_mean / depth_mean
    else:
        return
    logger.debug("Depth weight rebalanced", lambda_depth=ensemble.loss_weights[1], ratio=ratio)


def train(
    ensemble: FieldEnsemble, steps: int, batch_size: int, rng: np.random.Generator
) -> List[List[float]]:
    """
    训练若干步；每个成员在工作副本上更新，结束后整体发布

    Returns:
        List[List[float]]: 每步每个成员的损失

    Raises:
        EmptyDatasetError: 某个成员的数据集为空
    """
    for k, store in enumerate(ensemble.datasets):
        if len(store) == 0:
            raise EmptyDatasetError(member=k)

    work = [(m.density_raw.copy(), m.color.copy()) for m in ensemble.members]
    history: List[List[float]] = []
    for _ in range(steps):
        losses = []
        for k, member in enumerate(ensemble.members):
            batch = sample_batch(ensemble.datasets[k], ensemble.camera, batch_size, ensemble.recent_window, rng)
            raw, color = work[k]
            view = VoxelMember(member.bounds, member.resolution, raw, color, member.optimizer)
            grad = loss_and_grad(view, batch, ensemble.loss_weights, ensemble.quadrature)
            _apply_update(member.optimizer, raw, color, grad)
            ensemble.running_terms[k] = 0.95 * ensemble.running_terms[k] + 0.05 * np.array(
                [grad.rgb_term, grad.depth_term]
            )
            losses.append(grad.loss)
        ensemble.steps_trained += 1
        if ensemble.adaptive_balance and ensemble.steps_trained % ensemble.balance_every == 0:
            _rebalance(ensemble)
        history.append(losses)

    for member, (raw, color) in zip(ensemble.members, work):
        member.publish(raw, color)
    ensemble.loss_history.extend(history)
    ensemble.version += 1
    if history:
        logger.info(
            "Field trained",
            steps=steps,
            total_steps=ensemble.steps_trained,
            loss=[round(v, 5) for v in history[-1]],
            lambda_depth=ensemble.loss_weights[1],
        )
    return history


def train_step(ensemble: FieldEnsemble, batch_size: int, rng: np.random.Generator) -> List[float]:
    """单步训练，返回每个成员的损失"""
    return train(ensemble, 1, batch_size, rng)[0]


# ---------------------------------------------------------------------------
# 可见性与自由空间
# ---------------------------------------------------------------------------


def default_sigma_threshold(ensemble: FieldEnsemble) -> float:
    """单步不透明度为 0.5 时的密度：ln 2 / 行进步长"""
    return math.log(2.0) / march_step(ensemble)


def march_step(ensemble: FieldEnsemble) -> float:
    return float(ensemble.members[0].voxel_size.min())


def occupancy_grid(ensemble: FieldEnsemble, threshold: float) -> np.ndarray:
    """任一成员体素密度超过阈值即占据"""
    occ = np.zeros(ensemble.members[0].resolution, dtype=bool)
    for m in ensemble.members:
        occ |= m.sigma > threshold
    return occ


def _voxel_index(member: VoxelMember, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """最近体素下标；第二个返回值标记点是否在包围盒内"""
    res = np.asarray(member.resolution)
    g = np.floor((points - member.lower) / member.voxel_size).astype(np.int64)
    inside = np.all((points >= member.lower) & (points <= member.upper), axis=-1)
    g = np.clip(g, 0, res - 1)
    return g, inside


def points_occupied(ensemble: FieldEnsemble, points: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
    """学习场的自由空间查询：包围盒外或密度超过阈值视为占据"""
    threshold = default_sigma_threshold(ensemble) if threshold is None else threshold
    return lookup_occupancy(ensemble, occupancy_grid(ensemble, threshold), points)


def lookup_occupancy(ensemble: FieldEnsemble, occupancy: np.ndarray, points: np.ndarray) -> np.ndarray:
    """在给定占据网格中查询点（最近体素，包围盒外为占据）"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g, inside = _voxel_index(ensemble.members[0], points)
    return ~inside | occupancy[g[:, 0], g[:, 1], g[:, 2]]


def visible_points_field(
    ensemble: FieldEnsemble,
    pose: PoseSE3,
    cam: CameraModel,
    points: np.ndarray,
    threshold: Optional[float] = None,
    occupancy: Optional[np.ndarray] = None,
    step: Optional[float] = None,
) -> np.ndarray:
    """
    学习场可见性（批量）

    从相机沿线段按体素步长行进，任一采样点落在占据体素中即不可见。
    终点附近两个步长以及最底层体素内的采样被跳过，地面本身的密度不遮挡地面上的点。
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mask = in_frustum(pose, cam, points)
    if threshold is None:
        threshold = default_sigma_threshold(ensemble)
    if occupancy is None:
        occupancy = occupancy_grid(ensemble, threshold)
    step = step or march_step(ensemble)
    member = ensemble.members[0]
    floor_z = member.lower[2] + 1.5 * member.voxel_size[2]

    visible_idx = np.nonzero(mask)[0]
    for start in range(0, visible_idx.size, _MARCH_CHUNK):
        idx = visible_idx[start : start + _MARCH_CHUNK]
        rel = points[idx] - pose.position[None, :]
        length = np.linalg.norm(rel, axis=1)
        n_max = max(int(np.ceil(length.max() / step)), 1)
        ks = np.arange(n_max)[None, :] * step
        usable = ks < (length[:, None] - 2.0 * step)
        frac = ks / np.maximum(length[:, None], 1e-12)
        samples = pose.position[None, None, :] + frac[..., None] * rel[:, None, :]
        usable &= samples[..., 2] >= floor_z
        g, inside = _voxel_index(member, samples)
        hit = occupancy[g[..., 0], g[..., 1], g[..., 2]] & inside & usable
        mask[idx] = ~hit.any(axis=1)
    return mask


def visible_from_field(
    ensemble: FieldEnsemble,
    pose: PoseSE3,
    ground_point,
    threshold: Optional[float] = None,
    cam: Optional[CameraModel] = None,
) -> bool:
    """单个地面点的学习场可见性"""
    p = np.asarray(ground_point, dtype=np.float64).reshape(-1)
    if p.size == 2:
        p = np.array([p[0], p[1], ensemble.members[0].lower[2]])
    return bool(visible_points_field(ensemble, pose, cam or ensemble.camera, p[None, :], threshold)[0])


# ---------------------------------------------------------------------------
# 指标
# ---------------------------------------------------------------------------


def psnr(frame_pred, frame_true) -> float:
    """
    峰值信噪比（dB），值域 [0, 1]；完全相同时返回上限 99 dB

    Raises:
        DimensionMismatchError: 形状不同
    """
    a = frame_pred.rgb if isinstance(frame_pred, RgbdFrame) else np.asarray(frame_pred, dtype=np.float64)
    b = frame_true.rgb if isinstance(frame_true, RgbdFrame) else np.asarray(frame_true, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(b.shape, a.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(1.0 / mse)))


def recent_psnr(ensemble: FieldEnsemble, window: int = 20) -> Optional[float]:
    """最近 window 帧上的平均 PSNR"""
    frames = ensemble.all_frames[-window:]
    if not frames:
        return None
    values = []
    for frame in frames:
        h, w = frame.depth.shape
        pred = predicted_frame(ensemble, frame.pose, ensemble.camera.scaled(w, h))
        values.append(psnr(pred, frame.rgb))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------


def save_member(member: VoxelMember, path: Union[str, Path]) -> Path:
    """
    保存成员检查点

    布局：定长头（magic, version, flags, bounds×6, resolution×3, step,
    learning_rate, decay_every, decay_factor），随后依次为小端 float64 的
    density_raw、color，若有 Adam 矩则再接 m/v（密度）与 m/v（颜色）。
    """
    path = Path(path)
    opt = member.optimizer
    flags = (_FLAG_ADAM if opt.kind == "adam" else 0) | (_FLAG_MOMENTS if opt.m_density is not None else 0)
    header = _CKPT_HEADER.pack(
        _CKPT_MAGIC,
        _CKPT_VERSION,
        flags,
        *member.bounds,
        *member.resolution,
        opt.step,
        opt.learning_rate,
        opt.decay_every,
        opt.decay_factor,
    )
    try:
        with path.open("wb") as fh:
            fh.write(header)
            for arr in (member.density_raw, member.color):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            if flags & _FLAG_MOMENTS:
                for arr in (opt.m_density, opt.v_density, opt.m_color, opt.v_color):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint: {e}", path=str(path)) from e
    return path


def load_member(path: Union[str, Path]) -> VoxelMember:
    """读取 save_member 写出的检查点"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path=str(path)) from e
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError("Checkpoint truncated", path=str(path))

    fields = _CKPT_HEADER.unpack_from(data, 0)
    magic, version, flags = fields[0], fields[1], fields[2]
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise CheckpointError("Not a field checkpoint", path=str(path))
    bounds = tuple(fields[3:9])
    resolution = tuple(int(v) for v in fields[9:12])
    step, lr, decay_every, decay_factor = fields[12], fields[13], fields[14], fields[15]

    n = resolution[0] * resolution[1] * resolution[2]
    sizes = [n, 3 * n]
    if flags & _FLAG_MOMENTS:
        sizes += [n, n, 3 * n, 3 * n]
    expected = _CKPT_HEADER.size + 8 * sum(sizes)
    if len(data) != expected:
        raise CheckpointError(f"Checkpoint size {len(data)} != expected {expected}", path=str(path))

    arrays = []
    offset = _CKPT_HEADER.size
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64))
        offset += 8 * size

    opt = OptimizerState(
        kind="adam" if flags & _FLAG_ADAM else "sgd",
        learning_rate=lr,
        decay_every=decay_every,
        decay_factor=decay_factor,
        step=int(step),
    )
    if flags & _FLAG_MOMENTS:
        opt.m_density, opt.v_density = arrays[2], arrays[3]
        opt.m_color, opt.v_color = arrays[4].reshape(n, 3), arrays[5].reshape(n, 3)
    return VoxelMember(
        bounds=bounds,
        resolution=resolution,
        density_raw=arrays[0].reshape(resolution),
        color=arrays[1].reshape(resolution + (3,)),
        optimizer=opt,
    )


def save_ensemble(ensemble: FieldEnsemble, directory: Union[str, Path]) -> List[Path]:
    """每个成员写一个检查点：directory/member_{k}.ckpt"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"Cannot create checkpoint directory: {e}", path=str(directory)) from e
    paths = [save_member(m, directory / f"member_{k}.ckpt") for k, m in enumerate(ensemble.members)]
    logger.info("Field checkpoints saved", directory=str(directory), members=len(paths), steps=ensemble.steps_trained)
    return paths
