"""
Tests for Langevin inference module.
"""

import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from src.graphalign.alignment_graph import GRASPED, TARGET, attach_candidates, attach_context
from src.graphalign.energy_model import ROTATION_MODE, TRANSLATION_MODE, EnergyOutput
from src.graphalign.errors import DigestMismatchError, InconsistentWaypointsError, InferenceFailure
from src.graphalign.langevin import (
    SamplerConfig,
    infer_waypoints,
    langevin_increment,
    noise_schedule,
    optimize_alignment,
    run_pass,
    write_inference_report,
)

from tests.helpers import QuadraticEnergy, TwoBasinEnergy, ZeroEnergy, grasped_centroid, random_pair

BOWL = SamplerConfig(
    n_steps=40, n_restarts=2, chunk_size=2, step_scale_trans=0.5, sigma0_trans=0.0,
    mode_order=(TRANSLATION_MODE,), final_refine=False, init_trans_range=0.1, init_rot_range=0.0,
)


class NanEnergy(ZeroEnergy):
    """Energy that is never finite."""

    def forward(self, graph, twists=None, track_cross_edges=False) -> EnergyOutput:
        return EnergyOutput(super().forward(graph, twists).energies * float("nan"))


def _graph(m: int = 3):
    graph = attach_context([random_pair(seed=40)], random_pair(seed=4))
    if m > 1:
        attach_candidates(graph, m - 1)
    return graph


class TestSchedule:
    """Tests for the noise schedule and settings validation."""

    def test_schedule_non_increasing(self):
        """Test sigma_k = sigma0 * decay^k."""
        sigmas = noise_schedule(0.02, 0.98, 50)

        assert sigmas[0] == pytest.approx(0.02)
        assert np.all(np.diff(sigmas) <= 0)

    @pytest.mark.parametrize("kwargs", [
        {"n_restarts": 0},
        {"sigma_decay": 1.5},
        {"sigma0_trans": -1.0},
        {"mode_order": ("scale",)},
    ])
    def test_invalid_settings(self, kwargs):
        """Test that invalid sampler settings raise ValueError."""
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs).validate()


class TestSteps:
    """Tests for single increments and passes."""

    def test_rotation_increment_has_no_translation(self):
        """Test that a rotation-mode increment never translates."""
        inc = langevin_increment(np.ones(6), 0.1, 0.2, ROTATION_MODE, np.random.default_rng(0))

        np.testing.assert_array_equal(inc.translation, np.zeros(3))

    def test_translation_increment_has_no_rotation(self):
        """Test that a translation-mode increment never rotates."""
        inc = langevin_increment(np.ones(6), 0.1, 0.2, TRANSLATION_MODE, np.random.default_rng(0))

        np.testing.assert_allclose(inc.rotation, np.eye(3), atol=1e-15)

    def test_zero_gradient_without_noise_stays_put(self):
        """Test that a flat energy with sigma 0 leaves every candidate in place."""
        graph = _graph()
        before = graph.cand_positions.clone()
        config = SamplerConfig(sigma0_rot_deg=0.0)
        state = run_pass(graph, ZeroEnergy(ROTATION_MODE), ROTATION_MODE, 5, config, np.random.default_rng(0))

        torch.testing.assert_close(graph.cand_positions, before, atol=1e-15, rtol=0)
        assert all(t.is_identity() or np.allclose(t.as_matrix(), np.eye(4)) for t in state.totals)

    def test_pass_stops_at_deadline(self):
        """Test that a passed deadline stops a pass before any step."""
        graph = _graph()
        before = graph.cand_positions.clone()
        model = QuadraticEnergy(TRANSLATION_MODE, goal_center=[0.1, 0.0, 0.0])
        state = run_pass(graph, model, TRANSLATION_MODE, 5, SamplerConfig(), np.random.default_rng(0),
                         deadline=0.0)

        assert state.expired
        assert all(not t for t in state.trajectories)
        torch.testing.assert_close(graph.cand_positions, before, atol=0, rtol=0)

    def test_rotation_pass_keeps_centroid_and_target(self):
        """Test that a rotation pass turns grasped nodes about their centroid only."""
        graph = _graph()
        before = graph.cand_positions.clone()
        goal = torch.randn((4, 3), dtype=torch.float64) * 0.05
        model = QuadraticEnergy(ROTATION_MODE, goal_offsets=goal, weight=1.0)
        run_pass(graph, model, ROTATION_MODE, 5, SamplerConfig(), np.random.default_rng(1))

        torch.testing.assert_close(graph.cand_positions[:, TARGET], before[:, TARGET], atol=0, rtol=0)
        torch.testing.assert_close(graph.cand_positions[:, GRASPED].mean(1), before[:, GRASPED].mean(1),
                                   atol=1e-12, rtol=0)
        assert not torch.equal(graph.cand_positions, before)

    def test_translation_pass_keeps_shape(self):
        """Test that a translation pass moves grasped nodes rigidly without turning features."""
        graph = _graph()
        before_pos, before_feat = graph.cand_positions.clone(), graph.cand_features.clone()
        model = QuadraticEnergy(TRANSLATION_MODE, goal_center=[0.1, 0.0, 0.0])
        run_pass(graph, model, TRANSLATION_MODE, 5, SamplerConfig(), np.random.default_rng(2))

        offsets = graph.cand_positions[:, GRASPED] - graph.cand_positions[:, GRASPED].mean(1, keepdim=True)
        before_offsets = before_pos[:, GRASPED] - before_pos[:, GRASPED].mean(1, keepdim=True)
        torch.testing.assert_close(offsets, before_offsets, atol=1e-12, rtol=0)
        torch.testing.assert_close(graph.cand_features, before_feat, atol=1e-12, rtol=0)


class TestOptimizeAlignment:
    """Tests for multi-restart inference."""

    def test_translation_bowl_converges(self):
        """Test that noise-free descent on a quadratic bowl reaches its minimum."""
        test = random_pair(seed=5)
        start = grasped_centroid(test)
        goal = start + np.array([0.03, -0.02, 0.01])
        result = optimize_alignment([random_pair(seed=50)], test, ZeroEnergy(ROTATION_MODE),
                                    QuadraticEnergy(TRANSLATION_MODE, goal_center=goal), BOWL, seed=0)

        assert len(result.restarts) == 2
        placed = result.best_transform.apply(start[None])[0]
        np.testing.assert_allclose(placed, goal, atol=1e-6)
        assert result.best_energy == pytest.approx(0.0, abs=1e-10)

    def test_sixteen_restarts_reach_both_basins(self):
        """Test that restarts spread over two energy basins and each basin is hit at least twice."""
        test = random_pair(seed=9)
        start = grasped_centroid(test)
        goals = [start + np.array([0.05, 0.0, 0.0]), start - np.array([0.05, 0.0, 0.0])]
        config = replace(BOWL, n_restarts=16, chunk_size=16)
        result = optimize_alignment([random_pair(seed=90)], test, ZeroEnergy(ROTATION_MODE),
                                    TwoBasinEnergy(goals), config, seed=3)

        placed = [r.transform.apply(start[None])[0] for r in result.restarts]
        nearest = [int(np.argmin([np.linalg.norm(p - g) for g in goals])) for p in placed]
        for p, k in zip(placed, nearest):
            np.testing.assert_allclose(p, goals[k], atol=1e-6)
        assert nearest.count(0) >= 2
        assert nearest.count(1) >= 2

    def test_rotation_bowl_converges(self):
        """Test that rotation passes recover a small turn of the grasped nodes."""
        test = random_pair(seed=6)
        offsets = test.positions[GRASPED] - test.positions[GRASPED].mean(0)
        angle = 0.2
        turn = torch.tensor([[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0],
                             [0.0, 0.0, 1.0]], dtype=torch.float64)
        goal = offsets @ turn.T
        config = SamplerConfig(
            n_steps=300, n_restarts=1, chunk_size=1, step_scale_rot=0.5 / float((offsets ** 2).sum()), sigma0_rot_deg=0.0,
            mode_order=(ROTATION_MODE,), final_refine=False, init_trans_range=0.0, init_rot_range=0.0,
        )
        result = optimize_alignment([random_pair(seed=60)], test, QuadraticEnergy(ROTATION_MODE, goal_offsets=goal),
                                    ZeroEnergy(TRANSLATION_MODE), config, seed=0)

        assert result.best_energy < 1e-2 * float((goal ** 2).sum())

    def test_all_restarts_fail(self):
        """Test that non-finite energies everywhere raise InferenceFailure."""
        with pytest.raises(InferenceFailure):
            optimize_alignment([random_pair(seed=1)], random_pair(seed=2), NanEnergy(ROTATION_MODE),
                               NanEnergy(TRANSLATION_MODE), SamplerConfig(n_steps=2, refine_steps=1, n_restarts=2))

    def test_budget_truncates(self):
        """Test that an exhausted budget returns the best restart so far."""
        config = SamplerConfig(n_steps=1, refine_steps=1, n_restarts=4, chunk_size=1, budget_seconds=0.0)
        result = optimize_alignment([random_pair(seed=1)], random_pair(seed=2), ZeroEnergy(ROTATION_MODE),
                                    ZeroEnergy(TRANSLATION_MODE), config)

        assert result.truncated
        assert len(result.restarts) == 1

    def test_budget_truncates_single_chunk(self):
        """Test that the budget stops descent inside a chunk holding every restart."""
        config = SamplerConfig(n_steps=1, refine_steps=1, budget_seconds=0.0)
        result = optimize_alignment([random_pair(seed=1)], random_pair(seed=2), ZeroEnergy(ROTATION_MODE),
                                    ZeroEnergy(TRANSLATION_MODE), config)

        assert config.chunk_size >= config.n_restarts
        assert result.truncated
        assert len(result.restarts) == config.n_restarts
        assert all(not r.trajectory for r in result.restarts)
        assert result.best_energy == min(r.energy for r in result.restarts)

    def test_generous_budget_not_truncated(self):
        """Test that a budget that is never reached leaves the result complete."""
        config = SamplerConfig(n_steps=2, refine_steps=1, n_restarts=2, budget_seconds=3600.0)
        result = optimize_alignment([random_pair(seed=1)], random_pair(seed=2), ZeroEnergy(ROTATION_MODE),
                                    ZeroEnergy(TRANSLATION_MODE), config)

        assert not result.truncated
        assert all(len(r.trajectory) == 2 * 2 + 1 for r in result.restarts)

    def test_encoder_mismatch(self):
        """Test that models trained on different encoders are refused."""
        rot, trans = ZeroEnergy(ROTATION_MODE), ZeroEnergy(TRANSLATION_MODE)
        rot.encoder_digest, trans.encoder_digest = "a", "b"

        with pytest.raises(DigestMismatchError):
            optimize_alignment([random_pair(seed=1)], random_pair(seed=2), rot, trans, SamplerConfig(n_steps=1))

    def test_same_seed_same_result(self):
        """Test that inference is reproducible for a fixed seed."""
        args = ([random_pair(seed=1)], random_pair(seed=2), ZeroEnergy(ROTATION_MODE), ZeroEnergy(TRANSLATION_MODE))
        config = SamplerConfig(n_steps=3, refine_steps=1, n_restarts=2)
        a = optimize_alignment(*args, config, seed=9)
        b = optimize_alignment(*args, config, seed=9)

        np.testing.assert_array_equal(a.best_transform.to_vector12(), b.best_transform.to_vector12())


class TestWaypoints:
    """Tests for multi-waypoint inference and reports."""

    def test_waypoints_solved_independently(self, tmp_path):
        """Test one result per waypoint and the JSON report layout."""
        demos = [[random_pair(seed=70), random_pair(seed=71)], [random_pair(seed=72), random_pair(seed=73)]]
        test = [random_pair(seed=7), random_pair(seed=8)]
        goal = grasped_centroid(test[0])
        results = infer_waypoints(demos, test, ZeroEnergy(ROTATION_MODE),
                                  QuadraticEnergy(TRANSLATION_MODE, goal_center=goal), BOWL)
        path = write_inference_report(results, tmp_path / "inference.json")
        payload = json.loads(path.read_text())

        assert len(results) == 2
        assert len(payload["waypoints"]) == 2
        assert len(payload["waypoints"][0]["best_transform"]) == 12
        assert len(payload["waypoints"][1]["restarts"]) == BOWL.n_restarts

    def test_inconsistent_demos(self):
        """Test that demos with different waypoint counts are rejected."""
        demos = [[random_pair(seed=1)], [random_pair(seed=2), random_pair(seed=3)]]

        with pytest.raises(InconsistentWaypointsError):
            infer_waypoints(demos, [random_pair()], ZeroEnergy(ROTATION_MODE), ZeroEnergy(TRANSLATION_MODE), BOWL)

    def test_test_waypoint_count(self):
        """Test that the test must have as many waypoints as the demos."""
        demos = [[random_pair(seed=1), random_pair(seed=2)]]

        with pytest.raises(InconsistentWaypointsError):
            infer_waypoints(demos, [random_pair()], ZeroEnergy(ROTATION_MODE), ZeroEnergy(TRANSLATION_MODE), BOWL)
