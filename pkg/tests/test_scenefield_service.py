"""
体素辐射场测试
"""

import math

import numpy as np
import pytest

from app.core.exceptions import CheckpointError, DimensionMismatchError, EmptyDatasetError
from app.models.field import OptimizerState, inverse_softplus, softplus
from app.models.sensing import PoseSE3
from app.services.raysim_service import render_rgbd
from app.services.scenefield_service import (
    PSNR_CAP,
    RayBatch,
    add_observation,
    batch_loss,
    create_ensemble,
    create_member,
    default_sigma_threshold,
    load_member,
    loss_and_grad,
    points_occupied,
    psnr,
    recent_psnr,
    render_member,
    render_rays,
    save_ensemble,
    save_member,
    train,
    train_step,
    visible_from_field,
    visible_points_field,
)


def _slab_member():
    """x ≥ 5 的半空间为高密度"""
    member = create_member((0, 10, 0, 10, 0, 10), 10, init_sigma=1e-6)
    member.density_raw[5:] = 50.0
    return member


def _random_member(seed=0):
    rng = np.random.default_rng(seed)
    member = create_member((0, 4, 0, 4, 0, 4), 4, init_sigma=0.3)
    member.density_raw = rng.normal(-0.5, 0.5, member.resolution)
    member.color = rng.uniform(0.2, 0.8, member.resolution + (3,))
    return member


def _gradient_batch():
    rng = np.random.default_rng(3)
    n = 6
    origins = np.column_stack([np.full(n, -1.0), rng.uniform(1.0, 3.0, n), rng.uniform(1.0, 3.0, n)])
    dirs = np.column_stack([np.ones(n), rng.uniform(-0.1, 0.1, n), rng.uniform(-0.1, 0.1, n)])
    rgb = np.array([[0.95] * 3, [0.02] * 3] * 3)
    depth = np.array([0.2, 6.0, 0.2, 6.0, 25.0, 25.0])
    return RayBatch(origins=origins, dirs=dirs, rgb=rgb, depth=depth, d_max=20.0)


class TestSoftplus:
    def test_inverse(self):
        for y in (1e-6, 1e-3, 0.5, 3.0, 40.0):
            assert float(softplus(np.array(inverse_softplus(y)))) == pytest.approx(y, rel=1e-9)


class TestRendering:
    def test_weights_and_escape_sum_to_one(self):
        member = _random_member()
        rng = np.random.default_rng(1)
        origins = rng.uniform(0.0, 4.0, (20, 3))
        dirs = rng.normal(size=(20, 3))
        sample = render_rays(member, origins, dirs, quadrature=32, d_max=10.0)
        np.testing.assert_allclose(sample.weights_sum + sample.escape, 1.0, atol=1e-12)
        assert np.all(sample.rgb_var >= -1e-12)
        assert np.all(sample.depth_var >= -1e-12)

    def test_slab_depth(self):
        member = _slab_member()
        sample = render_rays(member, np.array([[-5.0, 5.0, 5.0]]), np.array([[1.0, 0.0, 0.0]]), 256, 100.0)
        assert 9.4 < sample.depth[0] < 10.2
        assert sample.escape[0] < 1e-6

    def test_thin_field_is_transparent(self):
        member = create_member((0, 10, 0, 10, 0, 10), 4, init_sigma=1e-3)
        sample = render_rays(member, np.array([[-5.0, 5.0, 5.0]]), np.array([[1.0, 0.0, 0.0]]), 64, 100.0)
        assert sample.escape[0] == pytest.approx(math.exp(-1e-3 * 10.0), rel=1e-9)
        np.testing.assert_allclose(sample.rgb[0], 0.5 * (1.0 - sample.escape[0]))

    def test_ray_missing_the_box(self):
        member = _slab_member()
        sample = render_rays(member, np.array([[-5.0, 50.0, 5.0]]), np.array([[1.0, 0.0, 0.0]]), 16, 100.0)
        assert sample.escape[0] == pytest.approx(1.0)
        assert sample.depth[0] == pytest.approx(0.0)

    def test_member_frame_shape(self, camera):
        member = _slab_member()
        pose = PoseSE3(position=[-5.0, 5.0, 5.0], yaw=0.0, pitch=0.0)
        sample = render_member(member, pose, camera, quadrature=16)
        assert sample.rgb.shape == (16, 16, 3)
        assert sample.depth.shape == (16, 16)

    def test_quadrature_too_small(self, camera):
        pose = PoseSE3(position=[-5.0, 5.0, 5.0])
        with pytest.raises(ValueError):
            render_member(_slab_member(), pose, camera, quadrature=1)


class TestGradient:
    """解析梯度与有限差分一致"""

    weights = (1.0, 0.1, 0.1)

    def test_density_gradient(self):
        member = _random_member()
        batch = _gradient_batch()
        grad = loss_and_grad(member, batch, self.weights, 16)
        h = 1e-5
        for j in grad.touched[:: max(grad.touched.size // 6, 1)]:
            idx = np.unravel_index(j, member.density_raw.shape)
            base = member.density_raw[idx]
            member.density_raw[idx] = base + h
            up = batch_loss(member, batch, self.weights, 16)
            member.density_raw[idx] = base - h
            down = batch_loss(member, batch, self.weights, 16)
            member.density_raw[idx] = base
            assert grad.grad_raw[idx] == pytest.approx((up - down) / (2 * h), rel=1e-3, abs=1e-7)

    def test_color_gradient(self):
        member = _random_member()
        batch = _gradient_batch()
        grad = loss_and_grad(member, batch, self.weights, 16)
        h = 1e-6
        for j in grad.touched[:4]:
            idx = np.unravel_index(j, member.density_raw.shape) + (1,)
            base = member.color[idx]
            member.color[idx] = base + h
            up = batch_loss(member, batch, self.weights, 16)
            member.color[idx] = base - h
            down = batch_loss(member, batch, self.weights, 16)
            member.color[idx] = base
            assert grad.grad_color[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)

    def test_loss_terms(self):
        member = _random_member()
        grad = loss_and_grad(member, _gradient_batch(), self.weights, 16)
        expected = grad.rgb_term + 0.1 * grad.depth_term + 0.1 * grad.escape_term
        assert grad.loss == pytest.approx(expected)
        assert grad.escape_term > 0.0


class TestDatasets:
    def test_first_frame_always_kept(self, open_city, camera):
        pose = PoseSE3(position=[50.0, 50.0, 20.0], pitch=-math.pi / 2)
        frame = render_rgbd(open_city, pose, camera)
        second = set()
        for seed in range(30):
            ens = create_ensemble(open_city, camera, members=2, resolution=4)
            rng = np.random.default_rng(seed)
            counts = add_observation(ens, frame, rng)
            assert all(c >= 1 for c in counts)
            assert [len(s) for s in ens.datasets] == counts
            second.update(add_observation(ens, frame, rng))
        assert 0 in second
        assert len(ens.all_frames) == 2

    def test_members_start_identical(self, open_city, camera):
        ens = create_ensemble(open_city, camera, members=2, resolution=4)
        np.testing.assert_array_equal(ens.members[0].density_raw, ens.members[1].density_raw)
        assert ens.members[0].bounds == (0.0, 100.0, 0.0, 100.0, 0.0, 50.0)

    def test_train_on_empty_dataset(self, open_city, camera, rng):
        ens = create_ensemble(open_city, camera, members=2, resolution=4)
        with pytest.raises(EmptyDatasetError):
            train(ens, 1, 16, rng)


class TestTraining:
    def test_training_lowers_escape_on_observed_rays(self, open_city, camera, rng):
        ens = create_ensemble(open_city, camera, members=2, resolution=8, quadrature=32)
        pose = PoseSE3(position=[50.0, 50.0, 20.0], pitch=-math.pi / 2)
        add_observation(ens, render_rgbd(open_city, pose, camera), rng)
        before = render_member(ens.members[0], pose, camera, 32).escape.mean()
        old_raw = ens.members[0].density_raw
        old_copy = old_raw.copy()

        history = train(ens, 60, 64, rng)

        assert len(history) == 60 and len(history[0]) == 2
        assert ens.members[0].density_raw is not old_raw
        np.testing.assert_array_equal(old_raw, old_copy)
        after = render_member(ens.members[0], pose, camera, 32).escape.mean()
        assert after < before - 0.05
        assert ens.steps_trained == 60
        assert ens.members[0].optimizer.step == 60

    def test_single_step(self, open_city, camera, rng):
        ens = create_ensemble(open_city, camera, members=2, resolution=4)
        pose = PoseSE3(position=[50.0, 50.0, 20.0], pitch=-math.pi / 2)
        add_observation(ens, render_rgbd(open_city, pose, camera), rng)
        losses = train_step(ens, 8, rng)
        assert len(losses) == 2
        assert all(np.isfinite(losses))
        assert ens.steps_trained == 1

    def test_recent_psnr_without_frames(self, open_city, camera):
        ens = create_ensemble(open_city, camera, members=2, resolution=4)
        assert recent_psnr(ens) is None


class TestVisibility:
    def _ensemble(self, open_city, camera):
        return create_ensemble(open_city, camera, members=2, resolution=10)

    def test_threshold(self, open_city, camera):
        ens = self._ensemble(open_city, camera)
        assert default_sigma_threshold(ens) == pytest.approx(math.log(2.0) / 5.0)

    def test_untrained_field_is_free(self, open_city, camera):
        ens = self._ensemble(open_city, camera)
        pts = np.array([[10.0, 10.0, 10.0], [90.0, 50.0, 40.0], [150.0, 50.0, 10.0], [50.0, 50.0, 80.0]])
        np.testing.assert_array_equal(points_occupied(ens, pts), [False, False, True, True])

    def test_occupancy_is_union_of_members(self, open_city, camera):
        ens = self._ensemble(open_city, camera)
        ens.members[1].density_raw[5] = 5.0
        assert points_occupied(ens, np.array([[55.0, 10.0, 10.0]]))[0]
        assert not points_occupied(ens, np.array([[35.0, 10.0, 10.0]]))[0]

    def test_dense_slab_blocks_view(self, open_city, camera):
        ens = self._ensemble(open_city, camera)
        pose = PoseSE3(position=[20.0, 50.0, 40.0], yaw=0.0, pitch=-0.3)
        target = (80.0, 50.0)
        assert visible_from_field(ens, pose, target)
        ens.members[0].density_raw[5] = 5.0
        assert not visible_from_field(ens, pose, target)

    def test_out_of_frustum_is_hidden(self, open_city, camera):
        ens = self._ensemble(open_city, camera)
        pose = PoseSE3(position=[20.0, 50.0, 40.0], yaw=0.0, pitch=-0.3)
        mask = visible_points_field(ens, pose, camera, np.array([[5.0, 50.0, 0.0], [80.0, 50.0, 0.0]]))
        np.testing.assert_array_equal(mask, [False, True])


class TestPsnr:
    def test_identical_frames(self):
        a = np.full((4, 4, 3), 0.3)
        assert psnr(a, a.copy()) == PSNR_CAP

    def test_known_value(self):
        assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestCheckpoint:
    def test_round_trip_with_moments(self, tmp_path):
        rng = np.random.default_rng(9)
        member = _random_member()
        n = member.density_raw.size
        opt = member.optimizer
        opt.step = 17
        opt.m_density, opt.v_density = rng.normal(size=n), rng.uniform(size=n)
        opt.m_color, opt.v_color = rng.normal(size=(n, 3)), rng.uniform(size=(n, 3))

        loaded = load_member(save_member(member, tmp_path / "m.ckpt"))

        assert loaded.bounds == member.bounds
        assert loaded.resolution == member.resolution
        np.testing.assert_array_equal(loaded.density_raw, member.density_raw)
        np.testing.assert_array_equal(loaded.color, member.color)
        assert loaded.optimizer.kind == "adam"
        assert loaded.optimizer.step == 17
        np.testing.assert_array_equal(loaded.optimizer.m_density, opt.m_density)
        np.testing.assert_array_equal(loaded.optimizer.v_color, opt.v_color)

    def test_round_trip_sgd(self, tmp_path):
        member = create_member((0, 1, 0, 1, 0, 1), 3, optimizer=OptimizerState(kind="sgd", learning_rate=0.2))
        loaded = load_member(save_member(member, tmp_path / "m.ckpt"))
        assert loaded.optimizer.kind == "sgd"
        assert loaded.optimizer.learning_rate == 0.2
        assert loaded.optimizer.m_density is None

    def test_truncated(self, tmp_path):
        path = save_member(_random_member(), tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_member(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"x" * 200)
        with pytest.raises(CheckpointError):
            load_member(path)

    def test_save_ensemble(self, open_city, camera, tmp_path):
        ens = create_ensemble(open_city, camera, members=2, resolution=4)
        paths = save_ensemble(ens, tmp_path / "field")
        assert [p.name for p in paths] == ["member_0.ckpt", "member_1.ckpt"]
        assert all(p.exists() for p in paths)
