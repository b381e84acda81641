"""
Report Module

Writes evaluation results as CSV tables, a markdown summary and SVG plots.

Output is a pure function of the records: no timestamps, fixed float formatting,
and SVGs rendered with a fixed hash salt and without date metadata.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import CoverageRow, DiversityCell, EvalMode, EvalRecord, ScalingRow, summary  # noqa: E402
from .evaluation import scaling_fit as fit_scaling  # noqa: E402
from .se3 import RigidTransform  # noqa: E402

logger = logging.getLogger(__name__)

RECORD_FIELDS = [
    "sample_id", "mode", "translation_cm", "rotation_deg", "wall_time_s",
    "restarts", "censored", "nearest_mode", "transform",
]
DIVERSITY_FIELDS = ["tier", "n_demos", "n", "trans_mean_cm", "trans_ci_lo", "trans_ci_hi",
                    "rot_mean_deg", "rot_ci_lo", "rot_ci_hi"]
SCALING_FIELDS = ["n_demos", "n_candidates", "nodes", "edges", "seconds"]
COVERAGE_FIELDS = ["sample_id", "hits", "nearest_trans_cm", "nearest_rot_deg", "forced_trans_cm", "forced_rot_deg"]

PathLike = Union[str, Path]


def _write_csv(frame: pd.DataFrame, path: Path, float_format: str = "%.4f") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    return path


def records_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    """One row per record; the transform is stored as 12 space-separated numbers."""
    return pd.DataFrame(
        {
            "sample_id": [r.sample_id for r in records],
            "mode": [r.mode for r in records],
            "translation_cm": [r.translation_cm for r in records],
            "rotation_deg": [r.rotation_deg for r in records],
            "wall_time_s": [r.wall_time for r in records],
            "restarts": [r.restarts for r in records],
            "censored": [int(r.censored) for r in records],
            "nearest_mode": [r.nearest_mode for r in records],
            "transform": [" ".join(f"{v:.6f}" for v in r.transform.to_vector12()) for r in records],
        },
        columns=RECORD_FIELDS,
    )


def diversity_frame(cells: Sequence[DiversityCell]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (c.tier, c.n_demos, c.n, c.trans_mean, c.trans_ci[0], c.trans_ci[1], c.rot_mean, c.rot_ci[0], c.rot_ci[1])
            for c in cells
        ],
        columns=DIVERSITY_FIELDS,
    )


def scaling_frame(rows: Sequence[ScalingRow]) -> pd.DataFrame:
    return pd.DataFrame([(r.n_demos, r.n_candidates, r.nodes, r.edges, r.seconds) for r in rows],
                        columns=SCALING_FIELDS)


def coverage_frame(rows: Sequence[CoverageRow]) -> pd.DataFrame:
    """Per-sample restart hits, stored as space-separated counts per mode."""
    return pd.DataFrame(
        [(r.sample_id, " ".join(str(h) for h in r.hits), r.nearest_trans_cm, r.nearest_rot_deg,
          r.forced_trans_cm, r.forced_rot_deg) for r in rows],
        columns=COVERAGE_FIELDS,
    )


def _error_bars(points) -> List[List[float]]:
    """Asymmetric (below, above) bar lengths from (mean, (lo, hi)) pairs."""
    return [[max(0.0, m - ci[0]) for m, ci in points], [max(0.0, ci[1] - m) for m, ci in points]]


def _save_svg(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "graphalign", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


@dataclass
class ReportFiles:
    csv: List[Path]
    markdown: Path
    plots: List[Path]


class ReportWriter:
    """Collects markdown sections and writes every artifact of an evaluation run."""

    def __init__(self, title: str = "Alignment evaluation"):
        self.title = title
        self.sections: List[str] = []

    # -- markdown sections ------------------------------------------------------

    def _add_header(self) -> None:
        self.sections.append(f"# {self.title}")

    def _add_error_table(self, by_predictor: Dict[str, Dict[str, Sequence[EvalRecord]]]) -> None:
        modes = [m.value for m in EvalMode if any(m.value in recs for recs in by_predictor.values())]
        extra = sorted({mode for recs in by_predictor.values() for mode in recs} - set(modes))
        modes += extra
        header = "| Method | " + " | ".join(f"{m} Trans (cm) | {m} Rot (deg)" for m in modes) + " |"
        rule = "|---|" + "---|---|" * len(modes)
        lines = ["## Errors (mean ± std)", "", header, rule]
        for name in sorted(by_predictor):
            cells = []
            for mode in modes:
                records = by_predictor[name].get(mode, [])
                s = summary(records)
                if s["n"] == 0:
                    cells += ["-", "-"]
                else:
                    cells += [f"{s['trans_mean']:.2f} ± {s['trans_std']:.2f}", f"{s['rot_mean']:.2f} ± {s['rot_std']:.2f}"]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        self.sections.append("\n".join(lines))

    def _add_counts(self, by_predictor: Dict[str, Dict[str, Sequence[EvalRecord]]]) -> None:
        lines = ["## Sample counts", "", "| Method | Mode | Samples | Censored |", "|---|---|---|---|"]
        for name in sorted(by_predictor):
            for mode in sorted(by_predictor[name]):
                s = summary(by_predictor[name][mode])
                lines.append(f"| {name} | {mode} | {s['n']} | {s['censored']} |")
        lines.append("")
        lines.append("Censored samples (failed inference) count as 50 cm / 180 deg in the means above.")
        self.sections.append("\n".join(lines))

    def _add_consistency(self, records: Sequence[EvalRecord], stats: Dict[str, float]) -> None:
        self.sections.append(
            "## Self-consistency\n\n"
            "Held-out pair also given as a demonstration.\n\n"
            "| Samples | Censored | Trans (cm) | Rot (deg) | Within tolerance |\n"
            "|---|---|---|---|---|\n"
            f"| {stats['n']} | {stats['censored']} | {stats['trans_mean']:.2f} ± {stats['trans_std']:.2f} "
            f"| {stats['rot_mean']:.2f} ± {stats['rot_std']:.2f} | {100.0 * stats['success_rate']:.0f}% |"
        )

    def _add_coverage(self, rows: Sequence[CoverageRow], stats: Dict[str, float]) -> None:
        self.sections.append(
            "## Mode coverage\n\n"
            f"{stats['n']} multimodal samples; every mode reached in {100.0 * stats['coverage_rate']:.0f}% of them.\n\n"
            "| Scoring | Trans (cm) | Rot (deg) |\n"
            "|---|---|---|\n"
            f"| nearest mode | {stats['nearest_trans_mean']:.2f} | {stats['nearest_rot_mean']:.2f} |\n"
            f"| forced mode 0 | {stats['forced_trans_mean']:.2f} | {stats['forced_rot_mean']:.2f} |"
        )

    def _add_diversity(self, cells: Sequence[DiversityCell]) -> None:
        lines = ["## Demonstration diversity", "", "| Tier | Demos | Trans (cm) | 95% CI | Rot (deg) | 95% CI |",
                 "|---|---|---|---|---|---|"]
        for c in cells:
            lines.append(
                f"| {c.tier} | {c.n_demos} | {c.trans_mean:.2f} | [{c.trans_ci[0]:.2f}, {c.trans_ci[1]:.2f}] "
                f"| {c.rot_mean:.2f} | [{c.rot_ci[0]:.2f}, {c.rot_ci[1]:.2f}] |"
            )
        self.sections.append("\n".join(lines))

    def _add_scaling(self, rows: Sequence[ScalingRow], fit: Dict[str, float]) -> None:
        lines = [
            "## Scaling",
            "",
            f"Forward time vs. edge count: slope {fit['slope']:.3e} s/edge, "
            f"intercept {fit['intercept']:.3e} s, r² {fit['r2']:.3f} over {len(rows)} graphs.",
        ]
        if "r2_demos" in fit:
            lines += [
                "",
                "| Axis | Slope (s per unit) | r² |",
                "|---|---|---|",
                f"| demos N (largest M) | {fit['slope_demos']:.3e} | {fit['r2_demos']:.3f} |",
                f"| candidates M (largest N) | {fit['slope_candidates']:.3e} | {fit['r2_candidates']:.3f} |",
            ]
        self.sections.append("\n".join(lines))

    # -- plots ------------------------------------------------------------------------

    @staticmethod
    def plot_errors(by_predictor: Dict[str, Dict[str, Sequence[EvalRecord]]], path: Path) -> Path:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        names = sorted(by_predictor)
        modes = sorted({m for recs in by_predictor.values() for m in recs})
        width = 0.8 / max(len(names), 1)
        for i, name in enumerate(names):
            t = [summary(by_predictor[name].get(m, []))["trans_mean"] for m in modes]
            r = [summary(by_predictor[name].get(m, []))["rot_mean"] for m in modes]
            xs = [j + i * width for j in range(len(modes))]
            axes[0].bar(xs, t, width, label=name)
            axes[1].bar(xs, r, width, label=name)
        for ax, label in zip(axes, ("translation error (cm)", "rotation error (deg)")):
            ax.set_xticks([j + 0.4 - width / 2 for j in range(len(modes))])
            ax.set_xticklabels(modes, rotation=20, fontsize=8)
            ax.set_ylabel(label)
            ax.legend(fontsize=8)
        fig.tight_layout()
        return _save_svg(fig, path)

    @staticmethod
    def plot_diversity(cells: Sequence[DiversityCell], path: Path) -> Path:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        tiers = []
        for c in cells:
            if c.tier not in tiers:
                tiers.append(c.tier)
        for tier in tiers:
            row = sorted((c for c in cells if c.tier == tier), key=lambda c: c.n_demos)
            xs = [c.n_demos for c in row]
            axes[0].errorbar(xs, [c.trans_mean for c in row], yerr=_error_bars([(c.trans_mean, c.trans_ci) for c in row]),
                             marker="o", capsize=3, label=tier)
            axes[1].errorbar(xs, [c.rot_mean for c in row], yerr=_error_bars([(c.rot_mean, c.rot_ci) for c in row]),
                             marker="o", capsize=3, label=tier)
        axes[0].set_ylabel("translation error (cm)")
        axes[1].set_ylabel("rotation error (deg)")
        for ax in axes:
            ax.set_xlabel("#demos")
            ax.legend(title="diversity", fontsize=8)
        fig.tight_layout()
        return _save_svg(fig, path)

    @staticmethod
    def plot_scaling(rows: Sequence[ScalingRow], path: Path) -> Path:
        fig, ax = plt.subplots(figsize=(5, 4))
        for m in sorted({r.n_candidates for r in rows}):
            sub = [r for r in rows if r.n_candidates == m]
            ax.plot([r.n_demos for r in sub], [1000.0 * r.seconds for r in sub], marker="o", label=f"{m} candidates")
        ax.set_xlabel("#demos")
        ax.set_ylabel("forward time (ms)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        return _save_svg(fig, path)

    # -- entry point -------------------------------------------------------------------

    def write(
        self,
        by_predictor: Dict[str, Dict[str, Sequence[EvalRecord]]],
        out_dir: PathLike,
        diversity: Optional[Sequence[DiversityCell]] = None,
        scaling: Optional[Sequence[ScalingRow]] = None,
        scaling_fit: Optional[Dict[str, float]] = None,
        consistency: Optional[Tuple[Sequence[EvalRecord], Dict[str, float]]] = None,
        coverage: Optional[Tuple[Sequence[CoverageRow], Dict[str, float]]] = None,
    ) -> ReportFiles:
        """Write per-mode CSVs, ``summary.md`` and SVG plots under ``out_dir``.

        Args:
            by_predictor: ``{predictor name: {mode: records}}``.
            out_dir: Output directory (created if missing).
            diversity: Optional diversity grid.
            scaling: Optional scaling-probe rows (with ``scaling_fit``).
            consistency: Optional self-consistency records and stats.
            coverage: Optional mode-coverage rows and stats.

        Returns:
            Paths of everything written.
        """
        out = Path(out_dir)
        self.sections = []
        csv_paths, plots = [], []
        for name in sorted(by_predictor):
            for mode in sorted(by_predictor[name]):
                csv_paths.append(_write_csv(records_frame(by_predictor[name][mode]), out / f"{name}_{mode}.csv"))

        self._add_header()
        if by_predictor:
            self._add_error_table(by_predictor)
            self._add_counts(by_predictor)
            plots.append(self.plot_errors(by_predictor, out / "errors.svg"))
        if consistency is not None:
            self._add_consistency(*consistency)
            csv_paths.append(_write_csv(records_frame(consistency[0]), out / "consistency.csv"))
        if coverage is not None:
            self._add_coverage(*coverage)
            csv_paths.append(_write_csv(coverage_frame(coverage[0]), out / "coverage.csv"))
        if diversity:
            self._add_diversity(diversity)
            csv_paths.append(_write_csv(diversity_frame(diversity), out / "diversity.csv"))
            plots.append(self.plot_diversity(diversity, out / "diversity.svg"))
        if scaling:
            self._add_scaling(scaling, scaling_fit or fit_scaling(scaling))
            csv_paths.append(_write_csv(scaling_frame(scaling), out / "scaling.csv", float_format="%.6f"))
            plots.append(self.plot_scaling(scaling, out / "scaling.svg"))

        markdown = out / "summary.md"
        markdown.parent.mkdir(parents=True, exist_ok=True)
        markdown.write_text("\n\n".join(self.sections) + "\n", encoding="utf-8")
        logger.info("report written to %s (%d csv, %d plots)", out, len(csv_paths), len(plots))
        return ReportFiles(csv_paths, markdown, plots)


def read_records(path: PathLike) -> List[EvalRecord]:
    """Load records written by :meth:`ReportWriter.write` (for re-plotting)."""
    frame = pd.read_csv(path, dtype={"mode": str, "transform": str})
    return [
        EvalRecord(
            sample_id=int(row.sample_id),
            mode=row.mode,
            transform=RigidTransform.from_vector12(np.array(row.transform.split(), dtype=np.float64)),
            translation_cm=float(row.translation_cm),
            rotation_deg=float(row.rotation_deg),
            wall_time=float(row.wall_time_s),
            restarts=int(row.restarts),
            censored=bool(row.censored),
            nearest_mode=int(row.nearest_mode),
        )
        for row in frame.itertuples(index=False)
    ]


def write_report(records: Sequence[EvalRecord], out_dir: PathLike, name: str = "model") -> ReportFiles:
    """Group ``records`` by mode and write the full report for one predictor."""
    frame = records_frame(records)
    grouped = {mode: [records[i] for i in index] for mode, index in frame.groupby("mode").indices.items()}
    return ReportWriter().write({name: grouped}, out_dir)


def read_diversity(path: PathLike) -> List[DiversityCell]:
    frame = pd.read_csv(path, dtype={"tier": str})
    return [
        DiversityCell(
            tier=row.tier,
            n_demos=int(row.n_demos),
            n=int(row.n),
            trans_mean=float(row.trans_mean_cm),
            rot_mean=float(row.rot_mean_deg),
            trans_ci=(float(row.trans_ci_lo), float(row.trans_ci_hi)),
            rot_ci=(float(row.rot_ci_lo), float(row.rot_ci_hi)),
        )
        for row in frame.itertuples(index=False)
    ]


def read_scaling(path: PathLike) -> List[ScalingRow]:
    frame = pd.read_csv(path)
    return [ScalingRow(int(r.n_demos), int(r.n_candidates), int(r.nodes), int(r.edges), float(r.seconds))
            for r in frame.itertuples(index=False)]


def read_coverage(path: PathLike) -> List[CoverageRow]:
    frame = pd.read_csv(path, dtype={"hits": str})
    return [
        CoverageRow(
            sample_id=int(row.sample_id),
            hits=tuple(int(h) for h in row.hits.split()),
            nearest_trans_cm=float(row.nearest_trans_cm),
            nearest_rot_deg=float(row.nearest_rot_deg),
            forced_trans_cm=float(row.forced_trans_cm),
            forced_rot_deg=float(row.forced_rot_deg),
        )
        for row in frame.itertuples(index=False)
    ]
