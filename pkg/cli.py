"""tailsmooth command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Diagnostics go to standard error; data goes to the
--out file or standard output.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from calibration import BinningConfig, Grouping, calibration_report
from core_data import (
    MAX_CLASSES, LabelSet, MatrixFormat, infer_format, matrix_to_csv, one_hot, read_counts, read_labels, read_matrix,
    write_counts, write_matrix,
)
from distill_harness import ExperimentConfig, Variant, apply_overrides, load_experiment_config, run_ablation
from errors import NumericalError, TailSmoothError, ValidationError
from label_smoothing import Orientation, SmoothingConfig, SmoothingMode, smooth_targets
from prototype_similarity import PrototypeSet, SimilarityMatrix, compute_prototypes, cosine_similarity, modulate_similarity
from pseudo_labeling import CorrectionConfig, Repair, apply_correction, filter_by_confidence, retrieve_unlabeled
from reporting import AblationReport, write_json

logger = logging.getLogger(__name__)

VERSION = '0.1.0'
LOG_LEVEL_ENV = 'TAILSMOOTH_LOG_LEVEL'
FLOAT32_ROW_ATOL = 1e-6

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
HELP_EPILOG = (
    f"Set {LOG_LEVEL_ENV}=DEBUG|INFO|WARNING|ERROR to choose the log level; -v flags take precedence. "
    "Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numerical."
)


class UsageError(Exception):
    """A flag combination argparse cannot express was rejected."""


class ToolArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(verbosity: int = 0) -> None:
    """One stderr handler; -v/-vv beat TAILSMOOTH_LOG_LEVEL, which beats WARNING."""
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.getLevelName(os.environ.get(LOG_LEVEL_ENV, 'WARNING').upper())
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


# flag types; argparse reports their messages against the flag name

def _number(kind: Callable, text: str):
    try:
        return kind(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")


def nonnegative_float(text: str) -> float:
    value = _number(float, text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def positive_float(text: str) -> float:
    value = _number(float, text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def unit_interval(text: str) -> float:
    value = _number(float, text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def positive_int(text: str) -> int:
    value = _number(int, text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def class_count(text: str) -> int:
    value = positive_int(text)
    if value > MAX_CLASSES:
        raise argparse.ArgumentTypeError(f"must be <= {MAX_CLASSES}, got {text}")
    return value


def nonnegative_int(text: str) -> int:
    value = _number(int, text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def comma_list(kind: Callable) -> Callable[[str], List]:
    def parse(text: str) -> List:
        items = [item.strip() for item in text.split(',') if item.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma-separated list")
        return [kind(item) for item in items]
    return parse


# input / output helpers

def load_matrix(path: str, fmt: Optional[str], name: str) -> np.ndarray:
    matrix = read_matrix(path, fmt)
    if matrix.size == 0:
        raise ValidationError(f"{name} matrix {path} is empty")
    return matrix


def load_distributions(path: str, fmt: Optional[str], name: str) -> np.ndarray:
    """Score or target rows; binary files are float32, so rows are renormalized in float64."""
    matrix = load_matrix(path, fmt, name)
    resolved = MatrixFormat(fmt) if fmt is not None else infer_format(Path(path))
    if resolved is MatrixFormat.BINARY:
        sums = matrix.sum(axis=1, keepdims=True)
        if np.all(np.abs(sums - 1.0) <= FLOAT32_ROW_ATOL):
            matrix = matrix / sums
    return matrix


def load_labels(path: str, num_classes: Optional[int]) -> LabelSet:
    labels = read_labels(path, num_classes)
    if len(labels) == 0:
        raise ValidationError(f"label file {path} is empty")
    return labels


def load_delta(path: str, fmt: Optional[str]) -> np.ndarray:
    """A 1xC or Cx1 matrix, or the delta field of a calibrate report (.json)."""
    if Path(path).suffix.lower() == '.json':
        try:
            with open(path, encoding='utf-8') as handle:
                report = json.load(handle)
            delta = np.asarray(report['delta'], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: not a calibration report with a delta field ({exc})")
        if delta.ndim != 1 or not np.isfinite(delta).all():
            raise ValidationError(f"{path}: delta must be a finite vector")
        return delta
    matrix = load_matrix(path, fmt, "delta")
    if 1 not in matrix.shape:
        raise ValidationError(f"delta matrix {path} must be 1xC or Cx1, got {matrix.shape}")
    return matrix.ravel()


def emit_matrix(matrix: np.ndarray, out: Optional[str], fmt: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(matrix_to_csv(matrix))
        sys.stdout.flush()
    else:
        write_matrix(matrix, out, fmt)


def emit_indices(indices: np.ndarray, out: Optional[str]) -> None:
    text = ''.join(f"{int(i)}\n" for i in indices)
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(out, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(text)


# subcommands

def cmd_prototypes(args) -> int:
    embeddings = load_matrix(args.embeddings, args.format, "embeddings")
    labels = load_labels(args.labels, args.num_classes)
    protos = compute_prototypes(embeddings, labels)
    if args.drop_invalid:
        protos, kept = protos.drop_invalid()
        logger.info("prototypes_kept | classes=%s", kept.tolist())
    emit_matrix(protos.vectors, args.out, args.format)
    if args.counts_out:
        write_counts(protos.counts, args.counts_out)
    return EXIT_OK


def prototypes_from_matrix(vectors: np.ndarray, counts: Optional[np.ndarray]) -> PrototypeSet:
    num_classes = vectors.shape[0]
    if counts is None:
        counts = np.ones(num_classes, dtype=np.int64)
    if counts.shape != (num_classes,):
        raise ValidationError(f"{counts.size} counts for {num_classes} prototypes")
    valid = (counts > 0) & np.any(vectors != 0.0, axis=1)
    return PrototypeSet(vectors, valid, counts, np.arange(num_classes))


def cmd_similarity(args) -> int:
    vectors = load_matrix(args.prototypes, args.format, "prototypes")
    counts = read_counts(args.counts) if args.counts else None
    if counts is None and args.gamma != 0:
        raise UsageError("--counts is required when --gamma is not 0")
    sim = cosine_similarity(prototypes_from_matrix(vectors, counts))
    if args.raw_out:
        write_matrix(sim.raw, args.raw_out, args.format)
    if counts is None:
        counts = np.ones(sim.num_classes, dtype=np.int64)
    sim = modulate_similarity(sim, counts, args.gamma)
    emit_matrix(sim.modulated, args.out, args.format)
    return EXIT_OK


def cmd_smooth(args) -> int:
    if args.labels:
        targets = one_hot(load_labels(args.labels, args.num_classes))
    else:
        targets = load_distributions(args.targets, args.format, "targets")
    cfg = SmoothingConfig(epsilon=args.epsilon, mode=args.mode, orientation=args.orientation)
    sim = None
    if cfg.mode is SmoothingMode.SIMILARITY:
        if not args.similarity:
            raise UsageError("--similarity is required in similarity mode")
        modulated = load_matrix(args.similarity, args.format, "similarity")
        sim = SimilarityMatrix(raw=modulated, modulated=modulated)
    emit_matrix(smooth_targets(targets, cfg, sim), args.out, args.format)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    scores = load_distributions(args.scores, args.format, "scores")
    labels = load_labels(args.labels, args.num_classes or scores.shape[1])
    report = calibration_report(scores, labels, BinningConfig(args.bins), args.grouping)
    write_json(report.to_dict(), args.out)
    if args.delta_out:
        write_matrix(report.delta[None, :], args.delta_out, args.format)
    return EXIT_OK


def cmd_correct(args) -> int:
    scores = load_distributions(args.scores, args.format, "scores")
    delta = load_delta(args.delta, args.format)
    result = apply_correction(scores, delta, CorrectionConfig(lambda_=args.lambda_, repair=args.repair))
    emit_matrix(result.values, args.out, args.format)
    return EXIT_OK


def cmd_filter(args) -> int:
    scores = load_distributions(args.scores, args.format, "scores")
    batch = filter_by_confidence(scores, args.threshold)
    emit_matrix(batch.kept(), args.out, args.format)
    if args.indices_out:
        emit_indices(batch.kept_indices(), args.indices_out)
    logger.info("filter_done | kept=%d | total=%d", batch.kept_indices().size, batch.keep_mask.size)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    pool = load_matrix(args.pool, args.format, "pool")
    queries = load_matrix(args.queries, args.format, "queries")
    emit_indices(retrieve_unlabeled(pool, queries, args.k), args.out)
    return EXIT_OK


SIMULATE_FLAGS = {
    'epsilon': 'epsilon',
    'gamma': 'gamma',
    'lambda_': 'lambda',
    'threshold': 'threshold',
    'bins': 'num_bins',
    'k': 'retrieval_k',
    'teacher': 'teacher',
    'temperature': 'teacher_temperature',
    'distill_epochs': 'distill_epochs',
    'min_support': 'min_delta_support',
    'epochs': 'epochs',
    'seed': 'seed',
    'seeds': 'seeds',
    'fractions': 'label_fractions',
    'variants': 'variants',
}


def simulate_config(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    overrides: Dict[str, str] = {}
    for flag, key in SIMULATE_FLAGS.items():
        value = getattr(args, flag)
        if value is None:
            continue
        overrides[key] = ','.join(str(v) for v in value) if isinstance(value, list) else str(value)
    if args.recompute_delta:
        overrides['recompute_delta'] = 'true'
    return apply_overrides(cfg, overrides)


def cmd_simulate(args) -> int:
    cfg = simulate_config(args)
    logger.info(
        "simulate_start | seeds=%s | fractions=%s | variants=%d",
        list(cfg.seeds), list(cfg.label_fractions), len(cfg.variants)
    )
    report = AblationReport(run_ablation(cfg))
    write_json(report.to_dict(cfg), args.out)
    if args.csv_out:
        report.write_csv(args.csv_out)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, with_format: bool = True) -> None:
    parser.add_argument('--version', action='version', version=f"tailsmooth {VERSION}")
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')
    if with_format:
        parser.add_argument(
            '--format', choices=[f.value for f in MatrixFormat], default=None,
            help='matrix file format (default: inferred from the suffix, .bin/.csls are binary)'
        )


def _add_num_classes(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--num-classes', type=class_count, default=None,
                        help='number of classes (default: max label + 1)')


def build_parser() -> argparse.ArgumentParser:
    parser = ToolArgumentParser(
        prog='tailsmooth',
        description='Class-similarity label smoothing and calibrated pseudo-labels for long-tailed data.',
        epilog=HELP_EPILOG,
    )
    parser.add_argument('--version', action='version', version=f"tailsmooth {VERSION}")
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    p = commands.add_parser('prototypes', epilog=HELP_EPILOG, help='per-class mean embeddings')
    _add_common(p)
    p.add_argument('--embeddings', required=True)
    p.add_argument('--labels', required=True)
    _add_num_classes(p)
    p.add_argument('--drop-invalid', action='store_true', help='drop classes without instances and reindex')
    p.add_argument('--out')
    p.add_argument('--counts-out', help='write per-class instance counts, one per line')
    p.set_defaults(handler=cmd_prototypes)

    p = commands.add_parser('similarity', epilog=HELP_EPILOG, help='cosine similarity of prototypes, frequency modulated')
    _add_common(p)
    p.add_argument('--prototypes', required=True)
    p.add_argument('--counts', help='per-class instance counts, one per line')
    p.add_argument('--gamma', type=nonnegative_float, default=1.5)
    p.add_argument('--out')
    p.add_argument('--raw-out', help='also write the unmodulated cosine similarity')
    p.set_defaults(handler=cmd_similarity)

    p = commands.add_parser('smooth', epilog=HELP_EPILOG, help='smoothed training targets')
    _add_common(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--labels', help='label indices, one per line')
    source.add_argument('--targets', help='one-hot target matrix')
    _add_num_classes(p)
    p.add_argument('--similarity', help='modulated similarity matrix')
    p.add_argument('--epsilon', type=unit_interval, default=0.1)
    p.add_argument('--mode', choices=[m.value for m in SmoothingMode], default=SmoothingMode.SIMILARITY.value)
    p.add_argument('--orientation', choices=[o.value for o in Orientation], default=Orientation.ROW.value)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_smooth)

    p = commands.add_parser('calibrate', epilog=HELP_EPILOG, help='reliability bins, ECE and per-class signed calibration error')
    _add_common(p)
    p.add_argument('--scores', required=True)
    p.add_argument('--labels', required=True)
    _add_num_classes(p)
    p.add_argument('--bins', type=positive_int, default=10)
    p.add_argument('--grouping', choices=[g.value for g in Grouping], default=Grouping.PREDICTED_CLASS.value)
    p.add_argument('--out', help='JSON report (default: standard output)')
    p.add_argument('--delta-out', help='also write the signed errors as a 1xC matrix')
    p.set_defaults(handler=cmd_calibrate)

    p = commands.add_parser('correct', epilog=HELP_EPILOG, help='calibration-corrected teacher scores')
    _add_common(p)
    p.add_argument('--scores', required=True)
    p.add_argument('--delta', required=True, help='1xC matrix or a calibrate JSON report')
    p.add_argument('--lambda', dest='lambda_', type=nonnegative_float, default=2.0)
    p.add_argument('--repair', choices=[r.value for r in Repair], default=Repair.CLAMP_RENORMALIZE.value)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_correct)

    p = commands.add_parser('filter', epilog=HELP_EPILOG, help='keep pseudo-labels whose confidence reaches the threshold')
    _add_common(p)
    p.add_argument('--scores', required=True)
    p.add_argument('--threshold', type=unit_interval, default=0.5)
    p.add_argument('--out', help='kept rows')
    p.add_argument('--indices-out', help='kept row indices, one per line')
    p.set_defaults(handler=cmd_filter)

    p = commands.add_parser('retrieve', epilog=HELP_EPILOG, help='exact cosine k-NN of queries in an unlabeled pool')
    _add_common(p)
    p.add_argument('--pool', required=True)
    p.add_argument('--queries', required=True)
    p.add_argument('--k', type=positive_int, required=True)
    p.add_argument('--out', help='retrieved pool indices, one per line')
    p.set_defaults(handler=cmd_retrieve)

    p = commands.add_parser('simulate', epilog=HELP_EPILOG, help='synthetic long-tail distillation ablation')
    _add_common(p, with_format=False)
    p.add_argument('--config', help='key = value experiment file')
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument('--seed', type=nonnegative_int)
    seeds.add_argument('--seeds', type=comma_list(int))
    p.add_argument('--fractions', type=comma_list(float))
    p.add_argument('--variants', type=comma_list(str),
                   help='comma-separated subset of: ' + ', '.join(v.value for v in Variant))
    p.add_argument('--epsilon', type=unit_interval)
    p.add_argument('--gamma', type=nonnegative_float)
    p.add_argument('--lambda', dest='lambda_', type=nonnegative_float)
    p.add_argument('--threshold', type=unit_interval)
    p.add_argument('--bins', type=positive_int)
    p.add_argument('--k', type=nonnegative_int, help='retrieve k unlabeled neighbours per rare instance (0: whole pool)')
    p.add_argument('--epochs', type=nonnegative_int)
    p.add_argument('--teacher', choices=[v.value for v in Variant if v.is_supervised],
                   help='supervised variant the semi-supervised students distill from')
    p.add_argument('--temperature', type=positive_float, help='teacher logit temperature for pseudo-labels')
    p.add_argument('--distill-epochs', type=nonnegative_int)
    p.add_argument('--min-support', type=positive_int,
                   help='validation predictions a class needs before its delta is used')
    p.add_argument('--recompute-delta', action='store_true')
    p.add_argument('--out', help='JSON results (default: standard output)')
    p.add_argument('--csv-out', help='flattened per-run CSV')
    p.set_defaults(handler=cmd_simulate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tailsmooth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.error("numerical_failure | command=%s | error=%s", args.command, exc)
        print(f"tailsmooth {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (TailSmoothError, OSError) as exc:
        print(f"tailsmooth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
