"""
Tests for pipeline module.
"""

import numpy as np
import pytest

from src.graphalign.config import load_config
from src.graphalign.errors import DatasetFormatError
from src.graphalign.evaluation import (
    CoverageRow,
    EvalMode,
    OraclePredictor,
    coverage_stats,
    run_trials,
    self_consistency_experiment,
)
from src.graphalign.pipeline import AlignmentPipeline, load_observation, save_observation
from src.graphalign.report import ReportWriter, write_report
from src.graphalign.shapes import PointCloud


def _tiny_config(out):
    return load_config(overrides=[
        f"run.output_dir={out}", "run.seed=2", "shapes.n_samples=1", "shapes.n_pairs=3",
        "shapes.points_per_view=60", "shapes.magnitude_range=0.0, 0.1", "shapes.scale_jitter=0.05",
        "shapes.max_retries=10",
    ])


def _cloud(seed: int, n: int = 20) -> PointCloud:
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)))


class TestObservationFiles:
    """Tests for npz observation files."""

    def test_single_waypoint(self, tmp_path):
        """Test that one waypoint is stored under the plain key names."""
        path = save_observation(tmp_path / "obs.npz", [(_cloud(0), _cloud(1))])
        back = load_observation(path)

        assert len(back) == 1
        np.testing.assert_array_equal(back[0][0].points, _cloud(0).points)
        with np.load(path) as archive:
            assert sorted(archive.files) == ["cloud_a", "cloud_b"]

    def test_waypoints(self, tmp_path):
        """Test that several waypoints keep their order."""
        obs = [(_cloud(w), _cloud(10 + w)) for w in range(3)]
        back = load_observation(save_observation(tmp_path / "obs.npz", obs))

        assert len(back) == 3
        np.testing.assert_array_equal(back[2][1].points, obs[2][1].points)

    def test_wrong_keys(self, tmp_path):
        """Test that a file without cloud keys is rejected."""
        path = tmp_path / "bad.npz"
        np.savez(path, points=np.zeros((4, 3)))

        with pytest.raises(DatasetFormatError):
            load_observation(path)

    def test_wrong_shape(self, tmp_path):
        """Test that a cloud that is not (N, 3) is rejected."""
        path = tmp_path / "bad.npz"
        np.savez(path, cloud_a=np.zeros((4, 2)), cloud_b=np.zeros((4, 3)))

        with pytest.raises(DatasetFormatError):
            load_observation(path)


class TestAlignmentPipeline:
    """Tests for AlignmentPipeline stages that need no trained models."""

    def test_paths(self, tmp_path):
        """Test the output layout."""
        pipeline = AlignmentPipeline(_tiny_config(tmp_path))

        assert pipeline.data_path == tmp_path / "data" / "train.bin"
        assert pipeline.model_path("rotation") == tmp_path / "models" / "rotation.ckpt"

    def test_stage_order_enforced(self, tmp_path):
        """Test that evaluation before data generation names the missing stage."""
        pipeline = AlignmentPipeline(_tiny_config(tmp_path))

        with pytest.raises(FileNotFoundError, match="gen-data"):
            pipeline.evaluate([EvalMode.SEEN_ALIGNMENTS])
        with pytest.raises(FileNotFoundError):
            pipeline.plot()

    def test_observation_from_dataset(self, tmp_path):
        """Test that a stored sample yields demos and a posed test observation."""
        pipeline = AlignmentPipeline(_tiny_config(tmp_path))
        path = pipeline.generate_data()
        demos, test, trial = pipeline.observation_from_dataset(path, 0)

        assert len(demos) == 2
        assert len(test) == 1
        np.testing.assert_array_equal(test[0][0].points, trial.observed_a.points)
        with pytest.raises(DatasetFormatError):
            pipeline.observation_from_dataset(path, 5)

    def test_plot_regenerates_summary(self, tmp_path, tiny_sample):
        """Test that plot rebuilds the summary from record CSVs alone."""
        pipeline = AlignmentPipeline(_tiny_config(tmp_path))
        records = run_trials([tiny_sample], OraclePredictor(), mode=EvalMode.SEEN_ALIGNMENTS.value)
        write_report(records, pipeline.eval_dir, name="oracle")
        (pipeline.eval_dir / "summary.md").unlink()

        files = pipeline.plot()
        assert files.markdown.exists()
        assert "oracle" in files.markdown.read_text(encoding="utf-8")

    def test_plot_keeps_experiment_sections(self, tmp_path, tiny_sample):
        """Test that plot rebuilds the self-consistency and mode-coverage sections from their CSVs."""
        pipeline = AlignmentPipeline(_tiny_config(tmp_path))
        config = pipeline.config.eval
        consistent = self_consistency_experiment(OraclePredictor(), [tiny_sample], config)
        rows = [CoverageRow(5, (2, 3), 0.0, 0.0, 4.0, 20.0)]
        covered = (rows, coverage_stats(rows, config.coverage_min_hits))
        ReportWriter().write({}, pipeline.eval_dir, consistency=consistent, coverage=covered)
        (pipeline.eval_dir / "summary.md").unlink()

        text = pipeline.plot().markdown.read_text(encoding="utf-8")
        assert "## Self-consistency" in text
        assert "## Mode coverage" in text
        assert "100%" in text
