"""
Command Line Interface Module

Provides the ``graphalign`` entrypoint: one subcommand per pipeline stage, all
driven by the same layered configuration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, GraphAlignError
from .evaluation import EvalMode, alignment_errors
from .pipeline import AlignmentPipeline, load_observation, save_observation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(verbosity: int) -> logging.Handler:
    """Install a single stderr handler on the package logger.

    Args:
        verbosity: -1 for ``--quiet`` (warnings only), 0 for info, 1+ for debug.

    Returns:
        The installed handler. Handlers from earlier calls are removed first.
    """
    package_logger = logging.getLogger(__package__)
    for handler in list(package_logger.handlers):
        if getattr(handler, "_graphalign", False):
            package_logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._graphalign = True
    package_logger.addHandler(handler)
    if verbosity < 0:
        package_logger.setLevel(logging.WARNING)
    elif verbosity == 0:
        package_logger.setLevel(logging.INFO)
    else:
        package_logger.setLevel(logging.DEBUG)
    return handler


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='INI config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override one config value (repeatable)')
    common.add_argument('--seed', type=int, default=None, help='Global seed (run.seed)')
    common.add_argument('--out', type=str, default=None, help='Output directory (run.output_dir)')
    common.add_argument('--jobs', type=int, default=None, help='Worker processes for data generation (run.jobs)')
    common.add_argument('--quiet', action='store_true', default=False, help='Only log warnings and errors')
    common.add_argument('-v', '--verbose', action='count', default=0, help='Debug logging')
    return common


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser for the CLI.

    Returns:
        argparse.ArgumentParser: Parser with the gen-data, pretrain-encoder, train,
            infer, eval and plot subcommands.
    """
    parser = argparse.ArgumentParser(
        prog='graphalign',
        description='graphalign - few-shot object alignment with graph energy models',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    common = _common_parser()
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    gen = subparsers.add_parser('gen-data', parents=[common], help='Generate the synthetic training set')
    gen.add_argument('--count', type=int, default=None, help='Number of samples (default shapes.n_samples)')

    subparsers.add_parser('pretrain-encoder', parents=[common], help='Pretrain the geometry encoder')
    subparsers.add_parser('train', parents=[common], help='Train the rotation and translation energy models')

    infer = subparsers.add_parser('infer', parents=[common], help='Align a test observation to demonstrations')
    infer.add_argument('--demo', dest='demos', action='append', default=[], metavar='NPZ',
                       help='Demonstration observation file (repeatable)')
    infer.add_argument('--test', type=str, default=None, metavar='NPZ', help='Test observation file')
    infer.add_argument('--from-dataset', type=str, default=None, metavar='BIN',
                       help='Take demos and a randomly posed test pair from a dataset sample')
    infer.add_argument('--index', type=int, default=0, help='Sample index for --from-dataset')
    infer.add_argument('--export-dir', type=str, default=None,
                       help='With --from-dataset, also write the observations as npz files here')
    infer.add_argument('--budget-seconds', type=float, default=None, help='Wall-time cap per waypoint')
    infer.add_argument('--report', type=str, default=None, help='JSON report path (default <out>/inference.json)')

    evaluate = subparsers.add_parser('eval', parents=[common], help='Evaluate against baselines')
    evaluate.add_argument('--mode', dest='modes', action='append', default=[],
                          help="Evaluation mode (repeatable) or 'all' (default eval.modes)")
    evaluate.add_argument('--diversity', action='store_true', default=False, help='Also run the diversity grid')
    evaluate.add_argument('--scaling', action='store_true', default=False, help='Also run the scaling probe')
    evaluate.add_argument('--consistency', action='store_true', default=False,
                          help='Also run the self-consistency check (test pair repeated as a demo)')
    evaluate.add_argument('--coverage', action='store_true', default=False,
                          help='Also count the modes reached on multimodal samples')

    subparsers.add_parser('plot', parents=[common], help='Regenerate summary and plots from eval CSVs')
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Resolve the run config: file, then ``--set`` overrides, then the dedicated flags."""
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.output_dir={args.out}")
    if args.jobs is not None:
        overrides.append(f"run.jobs={args.jobs}")
    return load_config(args.config, overrides)


def _verbosity(args: argparse.Namespace) -> int:
    return -1 if args.quiet else args.verbose


def run_gen_data(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    path = pipeline.generate_data(args.count)
    logger.info("dataset written to %s", path)
    return EXIT_OK


def run_pretrain_encoder(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    result = pipeline.pretrain_encoder()
    logger.info("encoder saved to %s (val loss %.4f -> %.4f)", pipeline.encoder_path,
                result.initial_val_loss, result.best_val_loss)
    return EXIT_OK


def run_train(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    result = pipeline.train_models()
    logger.info("selected step %d (smoke score %.3f, initial %.3f)", result.selected_step,
                result.selected_score, result.initial_score)
    return EXIT_OK


def run_infer(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    """Run inference and print each waypoint's transform as 12 numbers (row-major R, then t).

    Returns:
        int: Exit code (0 on success, 2 if the inputs are not specified correctly).
    """
    trial = None
    if args.from_dataset:
        demos, test, trial = pipeline.observation_from_dataset(Path(args.from_dataset), args.index)
        if args.export_dir:
            export = Path(args.export_dir)
            for d, trajectory in enumerate(demos):
                save_observation(export / f"demo_{d}.npz", trajectory)
            save_observation(export / "test.npz", test)
            logger.info("observations exported to %s", export)
    else:
        if not args.demos or not args.test:
            print("error[usage]: infer needs --demo (at least one) and --test, or --from-dataset", file=sys.stderr)
            return EXIT_USAGE
        demos = [load_observation(Path(p)) for p in args.demos]
        test = load_observation(Path(args.test))

    report = Path(args.report) if args.report else None
    results = pipeline.infer(demos, test, budget_seconds=args.budget_seconds, report_path=report)
    for result in results:
        print(" ".join(f"{v:.9g}" for v in result.best_transform.to_vector12()))
        if result.truncated:
            logger.warning("budget reached: best of %d restarts returned", len(result.restarts))
    if trial is not None:
        t_cm, r_deg, _ = alignment_errors(trial.target, results[0].best_transform, trial.initial)
        logger.info("error against ground truth: %.2f cm, %.2f deg", t_cm, r_deg)
    return EXIT_OK


def parse_modes(values: List[str], default: List[str]) -> List[EvalMode]:
    """Evaluation modes from ``--mode`` values; ``all`` selects every mode."""
    values = values or default
    if any(v.lower() == 'all' for v in values):
        return list(EvalMode)
    modes = []
    for value in values:
        mode = EvalMode.parse(value)
        if mode not in modes:
            modes.append(mode)
    return modes


def run_eval(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    try:
        modes = parse_modes(args.modes, list(pipeline.config.eval.modes))
    except ValueError as e:
        raise ConfigError(str(e), "eval.modes") from e
    files = pipeline.evaluate(modes, diversity=args.diversity, scaling=args.scaling,
                              consistency=args.consistency, coverage=args.coverage)
    logger.info("summary written to %s", files.markdown)
    return EXIT_OK


def run_plot(args: argparse.Namespace, pipeline: AlignmentPipeline) -> int:
    files = pipeline.plot()
    logger.info("%d plots written next to %s", len(files.plots), files.markdown)
    return EXIT_OK


COMMANDS = {
    'gen-data': run_gen_data,
    'pretrain-encoder': run_pretrain_encoder,
    'train': run_train,
    'infer': run_infer,
    'eval': run_eval,
    'plot': run_plot,
}


def main(argv: Optional[list] = None) -> int:
    """Main CLI entrypoint.

    Args:
        argv: Command-line arguments. Defaults to None, which causes argparse to
            use sys.argv[1:].

    Returns:
        int: 0 on success, 1 on a runtime failure, 2 on a usage or config error.
    """
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.command is None:
        parser.print_help()
        return EXIT_OK

    configure_logging(_verbosity(args))
    try:
        config = build_config(args)
        pipeline = AlignmentPipeline(config)
        pipeline.record_config()
        return COMMANDS[args.command](args, pipeline)
    except ConfigError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GraphAlignError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
