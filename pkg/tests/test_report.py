"""
Tests for report module.
"""

import pytest

from src.graphalign.evaluation import CoverageRow, DiversityCell, EvalRecord, ScalingRow, consistency_stats, coverage_stats
from src.graphalign.report import ReportWriter, read_coverage, read_diversity, read_records, read_scaling, write_report
from src.graphalign.se3 import RigidTransform, random_transform


def _records(mode: str = "SeenAlignments"):
    return [
        EvalRecord(11, mode, RigidTransform.identity(), 1.25, 3.5, wall_time=0.2, restarts=4),
        EvalRecord(12, mode, random_transform(0.1, 0.5, 1), 50.0, 180.0, censored=True),
        EvalRecord(13, mode, RigidTransform.identity(), 0.75, 2.0, restarts=4, nearest_mode=1),
    ]


@pytest.fixture
def cells():
    return [
        DiversityCell("low", 2, 5, 1.0, 4.0, (0.5, 1.5), (3.0, 5.0)),
        DiversityCell("low", 5, 5, 0.8, 3.0, (0.4, 1.2), (2.0, 4.0)),
    ]


class TestReportWriter:
    """Tests for ReportWriter.write."""

    def test_writes_expected_files(self, tmp_path):
        """Test that one CSV per (predictor, mode), the summary and the plot appear."""
        files = ReportWriter().write({"model": {"SeenAlignments": _records()}, "icp": {"SeenAlignments": _records()}},
                                     tmp_path)

        assert sorted(p.name for p in files.csv) == ["icp_SeenAlignments.csv", "model_SeenAlignments.csv"]
        assert files.markdown.exists()
        assert [p.name for p in files.plots] == ["errors.svg"]

    def test_output_is_deterministic(self, tmp_path, cells):
        """Test that writing the same results twice gives identical bytes."""
        rows = [ScalingRow(1, 1, 9, 20, 0.001), ScalingRow(2, 1, 13, 40, 0.002)]
        fit = {"slope": 5e-5, "intercept": 0.0, "r2": 1.0}
        first = ReportWriter().write({"model": {"SeenAlignments": _records()}}, tmp_path / "a", cells, rows, fit)
        second = ReportWriter().write({"model": {"SeenAlignments": _records()}}, tmp_path / "b", cells, rows, fit)

        for a, b in zip(first.csv + [first.markdown] + first.plots, second.csv + [second.markdown] + second.plots):
            assert a.read_bytes() == b.read_bytes()

    def test_summary_mentions_modes(self, tmp_path):
        """Test that the markdown summary names each mode and the censored count."""
        files = write_report(_records("UnseenCategories"), tmp_path)
        text = files.markdown.read_text(encoding="utf-8")

        assert "UnseenCategories" in text
        assert "model" in text

    def test_experiment_sections(self, tmp_path):
        """Test that consistency and coverage results get their own sections and CSVs."""
        records = _records("SelfConsistency")
        rows = [CoverageRow(21, (10, 6), 0.5, 2.0, 0.5, 2.0), CoverageRow(22, (16, 0), 1.0, 3.0, 9.0, 170.0)]
        files = ReportWriter().write({}, tmp_path, consistency=(records, consistency_stats(records, (1.0, 5.0))),
                                     coverage=(rows, coverage_stats(rows, 2)))
        text = files.markdown.read_text(encoding="utf-8")

        assert sorted(p.name for p in files.csv) == ["consistency.csv", "coverage.csv"]
        assert "## Self-consistency" in text
        assert "33%" in text
        assert "## Mode coverage" in text
        assert "50%" in text

    def test_records_csv_precision(self, tmp_path):
        """Test that errors are written with four decimals."""
        files = write_report(_records(), tmp_path)
        text = files.csv[0].read_text(encoding="utf-8")

        assert text.splitlines()[0].startswith("sample_id,mode,translation_cm")
        assert "1.2500" in text


class TestReadBack:
    """Tests for reading CSVs back."""

    def test_records_roundtrip(self, tmp_path):
        """Test that records survive the CSV at the written precision."""
        files = write_report(_records(), tmp_path)
        back = read_records(files.csv[0])

        assert [r.sample_id for r in back] == [11, 12, 13]
        assert back[0].translation_cm == pytest.approx(1.25)
        assert back[1].censored
        assert back[2].nearest_mode == 1
        assert back[0].transform.is_identity()

    def test_diversity_roundtrip(self, tmp_path, cells):
        """Test that the diversity grid reads back cell for cell."""
        ReportWriter().write({}, tmp_path, diversity=cells)
        back = read_diversity(tmp_path / "diversity.csv")

        assert [(c.tier, c.n_demos) for c in back] == [("low", 2), ("low", 5)]
        assert back[1].trans_ci == pytest.approx((0.4, 1.2))

    def test_scaling_roundtrip(self, tmp_path):
        """Test that scaling rows read back with integer counts and timings."""
        rows = [ScalingRow(1, 1, 9, 20, 0.001), ScalingRow(2, 16, 13, 400, 0.0125)]
        ReportWriter().write({}, tmp_path, scaling=rows)
        back = read_scaling(tmp_path / "scaling.csv")

        assert [(r.n_demos, r.n_candidates, r.edges) for r in back] == [(1, 1, 20), (2, 16, 400)]
        assert back[1].seconds == pytest.approx(0.0125)

    def test_coverage_roundtrip(self, tmp_path):
        """Test that per-mode hit counts survive the CSV."""
        rows = [CoverageRow(21, (10, 6), 0.5, 2.0, 0.5, 2.0), CoverageRow(22, (0, 0), 50.0, 180.0, 50.0, 180.0)]
        ReportWriter().write({}, tmp_path, coverage=(rows, coverage_stats(rows, 2)))
        back = read_coverage(tmp_path / "coverage.csv")

        assert [r.hits for r in back] == [(10, 6), (0, 0)]
        assert back[1].forced_rot_deg == pytest.approx(180.0)
