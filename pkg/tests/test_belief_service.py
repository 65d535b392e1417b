"""
网格贝叶斯滤波器测试
"""

import numpy as np
import pytest

from app.core.exceptions import DomainError
from app.models.belief import FilterBank, GridFilter, MotionKernel
from app.models.sensing import Detection
from app.services.belief_service import (
    bank_observe,
    bank_predict,
    bank_update_misses,
    detection_likelihood,
    estimate,
    filter_frame,
    init_uniform,
    new_bank,
    predict,
    support_mask,
    transition_matrix,
    update_detection,
    update_no_detection,
    visible_mass,
    write_filter_snapshot,
)
from app.services.citymap_service import build_ground_graph, make_city_map


@pytest.fixture
def kernel():
    return MotionKernel.corner_escape()


class TestMotionKernel:
    def test_corner_escape_layout(self, kernel):
        k = kernel.stencil
        assert k.shape == (5, 5)
        assert k[2, 2] == pytest.approx(0.6)
        for r, c in ((0, 0), (0, 4), (4, 0), (4, 4)):
            assert k[r, c] == pytest.approx(0.1)
        assert k.sum() == pytest.approx(1.0)

    def test_rejects_bad_stencils(self):
        with pytest.raises(ValueError):
            MotionKernel(stencil=np.ones((2, 2)) / 4)
        with pytest.raises(ValueError):
            MotionKernel(stencil=np.full((3, 3), 0.2))


class TestInit:
    def test_uniform_over_free_nodes(self, block_graph):
        filt = init_uniform(block_graph)
        assert filt.total == pytest.approx(1.0)
        assert np.all(filt.weights[~block_graph.free_cells] == 0.0)
        np.testing.assert_allclose(filt.weights[block_graph.free_cells], 1.0 / block_graph.num_nodes)

    def test_unknown_map_covers_all_cells(self, block_graph):
        filt = init_uniform(block_graph, map_known=False)
        assert support_mask(block_graph, False).all()
        np.testing.assert_allclose(filt.weights, 1.0 / block_graph.num_cells)

    def test_empty_graph(self):
        city = make_city_map((0, 0, 20, 20), [([(0, 0), (20, 0), (20, 20), (0, 20)], 5.0)], altitude_cap=10)
        with pytest.raises(DomainError):
            init_uniform(build_ground_graph(city, 10.0))


class TestPredict:
    def test_matches_transition_matrix(self, block_graph, kernel):
        rng = np.random.default_rng(0)
        support = block_graph.free_cells
        w = np.where(support, rng.random(block_graph.num_cells), 0.0)
        filt = GridFilter(weights=w / w.sum(), support=support)
        p = transition_matrix(support, kernel, block_graph.shape)
        np.testing.assert_allclose(predict(filt, kernel, block_graph).weights, p @ filt.weights, atol=1e-12)

    def test_transition_matrix_is_stochastic(self, block_graph, kernel):
        support = block_graph.free_cells
        p = transition_matrix(support, kernel, block_graph.shape)
        np.testing.assert_allclose(p.sum(axis=0)[support], 1.0)
        assert np.all(p[~support] == 0.0)

    def test_mass_stays_out_of_buildings(self, block_graph, kernel):
        filt = init_uniform(block_graph)
        for _ in range(5):
            filt = predict(filt, kernel, block_graph)
        assert filt.total == pytest.approx(1.0)
        assert np.all(filt.weights[~block_graph.free_cells] == 0.0)

    def test_point_mass_spreads_to_corners(self, open_graph, kernel):
        w = np.zeros(open_graph.num_cells)
        center = open_graph.nearest_cell((50.0, 50.0))
        w[center] = 1.0
        out = predict(GridFilter(weights=w, support=open_graph.free_cells), kernel, open_graph).weights
        assert out[center] == pytest.approx(0.6)
        assert out[open_graph.nearest_cell((70.0, 70.0))] == pytest.approx(0.1)
        assert out[open_graph.nearest_cell((30.0, 70.0))] == pytest.approx(0.1)

    def test_blocked_move_stays_put(self, open_graph, kernel):
        w = np.zeros(open_graph.num_cells)
        corner = open_graph.nearest_cell((0.0, 0.0))
        w[corner] = 1.0
        out = predict(GridFilter(weights=w, support=open_graph.free_cells), kernel, open_graph).weights
        assert out[corner] == pytest.approx(0.9)
        assert out[open_graph.nearest_cell((20.0, 20.0))] == pytest.approx(0.1)

    def test_identity_kernel(self, open_graph):
        filt = init_uniform(open_graph)
        assert predict(filt, MotionKernel.identity(), open_graph) is filt


class TestUpdates:
    def test_detection_centres_estimate(self, open_graph):
        filt = init_uniform(open_graph)
        post = update_detection(filt, Detection(target_id=0, ground_point=(50.0, 50.0)), open_graph)
        np.testing.assert_allclose(estimate(post, open_graph), [50.0, 50.0], atol=1e-9)
        assert post.total == pytest.approx(1.0)

    def test_likelihood_cutoff(self, open_graph):
        like = detection_likelihood(open_graph, (50.0, 50.0))
        assert like[open_graph.nearest_cell((50.0, 50.0))] == pytest.approx(1.0)
        assert like[open_graph.nearest_cell((80.0, 50.0))] > 0.0
        assert like[open_graph.nearest_cell((90.0, 50.0))] == 0.0
        assert like[open_graph.nearest_cell((80.0, 80.0))] == 0.0

    def test_detection_outside_prior_resets(self, open_graph):
        w = np.zeros(open_graph.num_cells)
        w[0] = 1.0
        filt = GridFilter(weights=w, support=open_graph.free_cells)
        post = update_detection(filt, Detection(target_id=0, ground_point=(50.0, 50.0)), open_graph)
        np.testing.assert_allclose(estimate(post, open_graph), [50.0, 50.0], atol=1e-9)

    def test_no_detection_moves_mass_away(self, open_graph):
        filt = init_uniform(open_graph)
        visible = open_graph.cell_xy()[:, 0] < 50.0
        post = update_no_detection(filt, visible, 0.95)
        assert post.total == pytest.approx(1.0)
        assert visible_mass(post, visible) < visible_mass(filt, visible)
        ratio = post.weights[visible][0] / post.weights[~visible][0]
        assert ratio == pytest.approx(0.05)

    def test_certain_miss_on_everything(self, block_graph):
        filt = init_uniform(block_graph)
        post = update_no_detection(filt, np.ones(block_graph.num_cells, dtype=bool), 1.0)
        np.testing.assert_allclose(post.weights, filt.weights)

    def test_certain_miss_on_all_mass(self, open_graph):
        w = np.zeros(open_graph.num_cells)
        w[:3] = 1.0 / 3.0
        filt = GridFilter(weights=w, support=open_graph.free_cells)
        visible = np.zeros(open_graph.num_cells, dtype=bool)
        visible[:5] = True
        post = update_no_detection(filt, visible, 1.0)
        assert post.total == pytest.approx(1.0)
        assert np.all(post.weights[:5] == 0.0)
        np.testing.assert_allclose(post.weights[5:], 1.0 / (open_graph.num_cells - 5))

    def test_nothing_visible_is_noop(self, open_graph):
        filt = init_uniform(open_graph)
        assert update_no_detection(filt, np.zeros(open_graph.num_cells, dtype=bool)) is filt

    def test_mask_shape_checked(self, open_graph):
        with pytest.raises(DomainError):
            update_no_detection(init_uniform(open_graph), np.ones(3, dtype=bool))


class TestNormalization:
    def test_random_sequences_stay_normalized(self, block_graph, kernel):
        rng = np.random.default_rng(2024)
        building = ~block_graph.free_cells
        xmin, ymin, xmax, ymax = 0.0, 0.0, 100.0, 100.0
        filt = init_uniform(block_graph)
        for step in range(10_000):
            op = rng.integers(3)
            if op == 0:
                filt = predict(filt, kernel, block_graph)
            elif op == 1:
                point = (float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)))
                filt = update_detection(filt, Detection(target_id=0, ground_point=point), block_graph)
            else:
                visible = rng.random(block_graph.num_cells) < rng.random()
                p_d = 1.0 if rng.random() < 0.1 else float(rng.random())
                filt = update_no_detection(filt, visible, p_d)
            assert abs(filt.weights.sum() - 1.0) <= 1e-9, step
            assert np.all(filt.weights >= 0.0), step
            assert np.all(filt.weights[building] == 0.0), step


class TestFilterBank:
    def test_new_target_takes_spare(self, open_graph):
        bank = new_bank(open_graph)
        visible = open_graph.cell_xy()[:, 0] < 50.0
        bank = bank_update_misses(bank, [], visible)
        informed = bank.spare.weights.copy()

        bank = bank_observe(bank, [Detection(target_id=3, ground_point=(80.0, 80.0))], open_graph)

        assert len(bank) == 2
        assert bank.knows(3)
        assert bank.assigned[3].target_id == 3
        np.testing.assert_allclose(bank.spare.weights, 1.0 / open_graph.num_cells)
        assert not np.allclose(informed, bank.spare.weights)

    def test_detected_filters_skip_miss_update(self, open_graph):
        bank = bank_observe(new_bank(open_graph), [Detection(target_id=1, ground_point=(20.0, 20.0))], open_graph)
        visible = np.ones(open_graph.num_cells, dtype=bool)
        after = bank_update_misses(bank, [1], visible, 0.5)
        assert after.assigned[1] is bank.assigned[1]
        np.testing.assert_allclose(after.spare.weights, bank.spare.weights)

    def test_predict_all(self, open_graph):
        bank = bank_observe(new_bank(open_graph), [Detection(target_id=0, ground_point=(50.0, 50.0))], open_graph)
        out = bank_predict(bank, MotionKernel.corner_escape(), open_graph)
        assert sorted(out.assigned) == [0]
        assert all(f.total == pytest.approx(1.0) for f in out.filters)

    def test_filters_order(self, open_graph):
        spare = init_uniform(open_graph)
        bank = FilterBank(assigned={5: spare.assign(5), 2: spare.assign(2)}, spare=spare)
        assert [f.target_id for f in bank.filters] == [2, 5, None]

    def test_snapshot_csv(self, block_graph, tmp_path):
        bank = new_bank(block_graph)
        frame = filter_frame(bank, block_graph, 4)
        assert len(frame) == block_graph.num_nodes
        assert set(frame["target_id"]) == {-1}
        path = tmp_path / "filters.csv"
        write_filter_snapshot(bank, block_graph, 0, path)
        write_filter_snapshot(bank, block_graph, 1, path)
        assert path.read_text().count("planning_step") == 1
