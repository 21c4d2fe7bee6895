"""Command-line driver: ``run``, ``eval`` and ``synth``.

Exit status is 0 on success, 1 for usage and configuration problems and 2
for missing or malformed data.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from bevloop.config import PRESETS, RunConfig, load_config
from bevloop.dataset import (
    CALIB_FILE,
    generate_sequence,
    read_calib,
    read_poses,
    read_sequence,
    write_sequence,
)
from bevloop.evaluation import (
    Prediction,
    PredictionLog,
    evaluate,
    read_timing_csv,
    write_report,
    write_timing_csv,
)
from bevloop.pipeline import LoopDetector
from bevloop.utils import ConfigError, DataFormatError, setup_logging
from bevloop.version import VERSION

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

PREDICTIONS_FILE = "predictions.csv"
TIMING_FILE = "timing.csv"
CONFIG_FILE = "config.yaml"
PROGRESS_EVERY = 100


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "%s: error: %s\n" % (self.prog, message))


def cmd_run(
    config: RunConfig, dataset_dir: str, out_dir: str, max_scans: Optional[int] = None
):
    """Detect loops over a sequence, query before insert, one CSV row per scan."""
    os.makedirs(out_dir, exist_ok=True)
    config.dump(os.path.join(out_dir, CONFIG_FILE))
    log = PredictionLog()
    timings = []
    with LoopDetector(config.detector) as detector:
        for record in read_sequence(dataset_dir, config.dataset.calib_key):
            if max_scans is not None and record.scan_id >= max_scans:
                break
            report = detector.process(record.scan_id, record.cloud)
            result = report.result
            if result is None:
                log.append(Prediction(record.scan_id))
            else:
                log.append(
                    Prediction(
                        record.scan_id, result.candidate_id, result.score, result.pose
                    )
                )
            timings.append((record.scan_id, report.timings))
            if (record.scan_id + 1) % PROGRESS_EVERY == 0:
                logger.info("processed %d scans", record.scan_id + 1)
    log.write_csv(os.path.join(out_dir, PREDICTIONS_FILE))
    write_timing_csv(os.path.join(out_dir, TIMING_FILE), timings)
    logger.info("wrote %d predictions to %s", len(log), out_dir)
    return log


def cmd_eval(
    config: RunConfig,
    predictions: str,
    poses: str,
    out_dir: str,
    calib: Optional[str] = None,
    timing: Optional[str] = None,
):
    if calib is None:
        calib = os.path.join(os.path.dirname(os.path.abspath(poses)), CALIB_FILE)
    gt_poses = read_poses(poses, read_calib(calib, config.dataset.calib_key))
    log = PredictionLog.read_csv(predictions)
    if not len(log):
        raise DataFormatError(
            "prediction file %s has no rows" % predictions, predictions
        )
    timing_rows = read_timing_csv(timing) if timing else None
    try:
        report = evaluate(log, gt_poses, config.eval, timing_rows)
    except DataFormatError as e:
        raise DataFormatError(
            "%s (predictions %s, poses %s)" % (e, predictions, poses)
        ) from e
    write_report(report, out_dir)
    return report


def cmd_synth(config: RunConfig, seed: int, out_dir: str):
    sequence = generate_sequence(seed, config.synth)
    write_sequence(out_dir, sequence, seed, config.synth)
    return sequence


def _add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable, value parsed as YAML)",
    )
    parser.add_argument("--preset", choices=sorted(PRESETS), help="sensor preset")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default: INFO)",
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="bevloop", description="BEV contour loop closure detection"
    )
    parser.add_argument("--version", action="version", version="%(prog)s " + VERSION)
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    run = subparsers.add_parser("run", help="detect loops over a KITTI-layout sequence")
    run.add_argument(
        "--dataset", required=True, help="sequence directory (velodyne/, poses.txt)"
    )
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--max-scans", type=int, help="stop after this many scans")
    run.add_argument(
        "--exclusion-window",
        type=int,
        help="frames right before a query that are never candidates",
    )
    run.add_argument(
        "--parallel-candidates",
        action="store_true",
        default=None,
        help="check and refine candidates of one scan concurrently",
    )
    _add_config_arguments(run)

    ev = subparsers.add_parser(
        "eval", help="evaluate a prediction CSV against GT poses"
    )
    ev.add_argument("--predictions", required=True, help="predictions.csv from run")
    ev.add_argument("--poses", required=True, help="KITTI poses.txt")
    ev.add_argument("--calib", help="calib.txt (default: next to the poses file)")
    ev.add_argument("--timing", help="timing.csv from run, summarized into the report")
    ev.add_argument("--out", required=True, help="report directory")
    ev.add_argument("--l3", type=float, help="TP distance bound in meters")
    ev.add_argument(
        "--exclusion-window", type=int, help="frames excluded before each query"
    )
    _add_config_arguments(ev)

    synth = subparsers.add_parser("synth", help="write a synthetic revisit sequence")
    synth.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    synth.add_argument("--out", required=True, help="sequence directory to create")
    _add_config_arguments(synth)
    return parser


def _flags(args) -> Dict:
    flags = {}  # type: Dict
    if args.preset:
        flags["preset"] = args.preset
    window = getattr(args, "exclusion_window", None)
    if window is not None:
        flags.setdefault("pipeline", {})["exclusion_window"] = window
    if getattr(args, "parallel_candidates", None):
        flags.setdefault("pipeline", {})["parallel_candidates"] = True
    if getattr(args, "l3", None) is not None:
        flags.setdefault("eval", {})["l3"] = args.l3
    return flags


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
        config = load_config(args.config, args.overrides, _flags(args))
        if args.command == "run":
            cmd_run(config, args.dataset, args.out, args.max_scans)
        elif args.command == "eval":
            cmd_eval(
                config, args.predictions, args.poses, args.out, args.calib, args.timing
            )
        else:
            cmd_synth(config, args.seed, args.out)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (DataFormatError, OSError) as e:
        logger.error("%s", e)
        return EXIT_DATA
    return EXIT_OK


def entrypoint():
    sys.exit(main())
