import argparse
import logging
import os
import signal
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

import engine
from config_manager import (ConfigurationError, ExperimentConfig, LoggingConfig, SweepSpec, config_to_text,
                            load_config, load_sweep_spec, sweep_points)
from datasets import LabelDomainError, ParseError
from engine import NonFiniteIterate, RunReport
from helpers import LOG_FORMAT, ModelKindMismatch, SimulationError, format_number
from losses import DimensionMismatch, EmptyShard
from metrics import (FLOAT_FORMAT, FLOOR_FRACTION, DegenerateWindow, MetricsTrace, disagreement_scaling, estimate_h,
                     fit_rate, floor_estimate, floor_ratio, steady_state_mean)
from topology import (NotLeftStochastic, NotPrimitive, NotStronglyConnected, TopologyFormatError, WeightMismatch,
                      describe_topology, generate_topology, load_combination_matrix, perron_vector)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

TRACE_FILE = 'trace.csv'
REPORT_FILE = 'report.txt'
PLOT_FILE = 'plot.csv'
PARTIAL_MARKER = 'PARTIAL'
SUMMARY_FILE = 'summary.csv'

# Errors raised while building a run from its inputs; anything else during a run is a runtime abort.
SETUP_ERRORS = (ConfigurationError, ParseError, LabelDomainError, NotLeftStochastic, NotStronglyConnected,
                NotPrimitive, WeightMismatch, TopologyFormatError, DimensionMismatch, EmptyShard,
                ModelKindMismatch, OSError)

# Global event for graceful shutdown
shutdown_event = threading.Event()
_installed_handlers: List[logging.Handler] = []

logger = logging.getLogger(__name__)


def setup_logging(config: Optional[LoggingConfig] = None) -> None:
    config = config or LoggingConfig(level=os.getenv('DIFFUSION_LOG_LEVEL', 'INFO'),
                                     file_path=os.getenv('DIFFUSION_LOG_FILE', LoggingConfig.file_path))
    log_formatter = logging.Formatter(LOG_FORMAT)
    root_logger = logging.getLogger()
    root_logger.setLevel(config.level.upper())
    for handler in _installed_handlers:
        root_logger.removeHandler(handler)
        handler.close()
    _installed_handlers.clear()

    log_dir = os.path.dirname(config.file_path)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    file_handler = RotatingFileHandler(config.file_path, maxBytes=config.max_file_size,
                                       backupCount=config.backup_count)
    file_handler.setFormatter(log_formatter)
    root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(log_formatter)
    root_logger.addHandler(console_handler)
    _installed_handlers.extend([file_handler, console_handler])


def signal_handler(signum, frame):
    logging.info(f"Received signal {signum}. Flushing the partial run...")
    shutdown_event.set()


def analyse_trace(trace: MetricsTrace, mu_o: float) -> Dict[str, Any]:
    """Rate fit, h and floor estimates for the report; a degenerate window is reported, not raised."""
    results: Dict[str, Any] = {'rows': len(trace)}
    if len(trace) == 0:
        return results
    results['floor'] = floor_estimate(trace)
    results['h'] = estimate_h(trace, mu_o)
    results['disagreement'] = steady_state_mean(trace, 'disagreement')
    try:
        results['fit'] = fit_rate(trace)
    except DegenerateWindow as e:
        logger.warning(f"Rate fit unavailable: {e}")
        results['fit_error'] = str(e)
    return results


def report_text(report: RunReport, reason: str = "") -> str:
    """Config echo followed by `#` result lines, so the file itself loads as a config."""
    results = analyse_trace(report.trace, report.config_echo.run.mu_o)
    lines = []
    if report.partial:
        lines.append(f"# {PARTIAL_MARKER}: {reason or 'run interrupted'}")
    lines.append(config_to_text(report.config_echo).rstrip('\n'))
    lines.append(f"# theta = {report.theta!r}")
    if report.prediction is not None:
        lines.append(f"# alpha_predicted = {report.prediction.alpha!r}")
        low, high = report.prediction.risk_decay_bracket
        lines.append(f"# alpha_hat_bracket = {low!r}, {high!r}")
    else:
        lines.append("# alpha_predicted = unavailable (unstable configuration)")
    if report.optimum is not None:
        lines.append(f"# optimum = {report.optimum.method.value}, risk {report.optimum.risk_star!r}")
    if 'fit' in results:
        fit = results['fit']
        lines.append(f"# rate_fit = alpha_hat {fit.alpha_hat!r}, r_squared {format_number(fit.r_squared)}, "
                     f"window {fit.fit_window[0]}..{fit.fit_window[1]}")
    elif 'fit_error' in results:
        lines.append(f"# rate_fit = unavailable ({results['fit_error']})")
    if 'h' in results:
        lines.append(f"# h_estimate = {format_number(results['h'])}")
        lines.append(f"# floor_estimate = {results['floor']!r} (mean of trailing {FLOOR_FRACTION:.0%} "
                     f"of excess_risk_smoothed)")
        lines.append(f"# disagreement_steady_state = {results['disagreement']!r}")
    if report.test_accuracy is not None:
        lines.append(f"# test_accuracy = {format_number(report.test_accuracy, 4)}%")
    if report.split:
        lines.append(f"# test_split = {report.split}")
    lines.append(f"# seeds = {', '.join(str(s) for s in report.seeds)}")
    lines.append(f"# recorded_rows = {results['rows']}")
    lines.append(f"# wall_time_seconds = {format_number(report.wall_time, 4)}")
    return '\n'.join(lines) + '\n'


def write_artifacts(report: RunReport, directory: str, reason: str = "") -> None:
    os.makedirs(directory, exist_ok=True)
    report.trace.to_csv(os.path.join(directory, TRACE_FILE))
    plot = report.trace.frame[['iteration', 'excess_risk_smoothed']]
    plot.to_csv(os.path.join(directory, PLOT_FILE), index=False, float_format=FLOAT_FORMAT)
    with open(os.path.join(directory, REPORT_FILE), 'w') as f:
        f.write(report_text(report, reason))
    marker = os.path.join(directory, PARTIAL_MARKER)
    if report.partial:
        with open(marker, 'w') as f:
            f.write(f"{reason or 'run interrupted'}\n")
    elif os.path.exists(marker):
        os.remove(marker)
    logger.info(f"Artifacts written to {directory}")


def execute(config: ExperimentConfig, directory: str,
            stop_event: Optional[threading.Event] = None) -> Tuple[int, Optional[RunReport]]:
    """Run one config and write its artifacts; returns (exit status, report)."""
    try:
        report = engine.run(config, stop_event=stop_event)
    except NonFiniteIterate as e:
        if e.report is not None:
            write_artifacts(e.report, directory, reason=str(e))
        return EXIT_RUNTIME, e.report
    except SETUP_ERRORS as e:
        logger.error(f"Cannot set up run: {e}")
        return EXIT_CONFIG, None
    except SimulationError as e:
        logger.error(f"Run aborted: {e}")
        return EXIT_RUNTIME, None
    write_artifacts(report, directory)
    return (EXIT_RUNTIME if report.partial else EXIT_OK), report


def run_experiment(config: ExperimentConfig, directory: Optional[str] = None,
                   stop_event: Optional[threading.Event] = None) -> int:
    status, _ = execute(config, directory or config.output.directory, stop_event)
    return status


def _sweep_point(index: int, overrides: Dict[str, str], config: ExperimentConfig, directory: str,
                 stop_event: Optional[threading.Event]) -> Tuple[Dict[str, Any], Optional[MetricsTrace]]:
    point_dir = os.path.join(directory, f"point_{index:03d}")
    logger.info(f"Sweep point {index}: {overrides}")
    status, report = execute(config, point_dir, stop_event)
    row: Dict[str, Any] = {'point': index, **overrides, 'status': status, 'directory': point_dir}
    if report is None or len(report.trace) == 0:
        return row, None
    results = analyse_trace(report.trace, config.run.mu_o)
    row['floor'] = results['floor']
    row['disagreement'] = results['disagreement']
    row['alpha_hat'] = results['fit'].alpha_hat if 'fit' in results else float('nan')
    return row, report.trace


def run_sweep(spec: SweepSpec, directory: str, stop_event: Optional[threading.Event] = None) -> int:
    """One run directory per point plus a summary with floor and disagreement ratios against the first point."""
    points = sweep_points(spec)
    os.makedirs(directory, exist_ok=True)
    logger.info(f"Sweep over {[name for name, _ in spec.parameters]}: {len(points)} points "
                f"({spec.mode}, {spec.workers} worker(s))")
    with ThreadPoolExecutor(max_workers=spec.workers) as executor:
        futures = [executor.submit(_sweep_point, j, overrides, config, directory, stop_event)
                   for j, (overrides, config) in enumerate(points)]
        results = [future.result() for future in futures]
    reference = results[0][1]
    for row, trace in results:
        usable = reference is not None and trace is not None
        row['floor_ratio'] = floor_ratio(reference, trace) if usable else float('nan')
        row['disagreement_ratio'] = disagreement_scaling(reference, trace) if usable else float('nan')
    summary = pd.DataFrame([row for row, _ in results])
    summary.to_csv(os.path.join(directory, SUMMARY_FILE), index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Sweep summary written to {os.path.join(directory, SUMMARY_FILE)}")
    return max(int(status) for status in summary['status'])


def inspect_topology(args: argparse.Namespace) -> int:
    try:
        if args.file:
            matrix = load_combination_matrix(args.file)
        else:
            matrix = generate_topology(args.generator, args.agents, args.radius, args.seed)
        text = describe_topology(matrix, perron_vector(matrix))
    except SETUP_ERRORS as e:
        logger.error(f"Invalid topology: {e}")
        return EXIT_CONFIG
    except SimulationError as e:
        logger.error(f"Topology inspection failed: {e}")
        return EXIT_RUNTIME
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Diffusion stochastic subgradient experiments over networks")
    verbs = parser.add_subparsers(dest='command', required=True)

    run_parser = verbs.add_parser('run', help="run one experiment config")
    run_parser.add_argument('config')
    run_parser.add_argument('--output', default=None, help="artifact directory (default: output.directory)")

    sweep_parser = verbs.add_parser('sweep', help="run every point of a sweep spec")
    sweep_parser.add_argument('spec')
    sweep_parser.add_argument('--output', default=None)

    validate_parser = verbs.add_parser('validate', help="load, resolve and echo a config")
    validate_parser.add_argument('config')

    topology_parser = verbs.add_parser('inspect-topology', help="summarize a combination matrix")
    topology_parser.add_argument('file', nargs='?', default='')
    topology_parser.add_argument('--generator', default='geometric', choices=['geometric', 'ring', 'complete'])
    topology_parser.add_argument('--agents', type=int, default=20)
    topology_parser.add_argument('--radius', type=float, default=0.3)
    topology_parser.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()

    if args.command == 'inspect-topology':
        return inspect_topology(args)

    try:
        if args.command == 'sweep':
            spec = load_sweep_spec(args.spec)
            config = spec.base
        else:
            config = load_config(args.config)
    except (ConfigurationError, OSError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    setup_logging(config.logging)
    logging.info(f"Resolved configuration\n{config_to_text(config)}")

    if args.command == 'validate':
        print(config_to_text(config), end='')
        return EXIT_OK

    shutdown_event.clear()
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for signum in (signal.SIGINT, signal.SIGTERM):
            previous[signum] = signal.signal(signum, signal_handler)
    try:
        if args.command == 'sweep':
            try:
                return run_sweep(spec, args.output or config.output.directory, shutdown_event)
            except ConfigurationError as e:
                logger.error(f"Invalid sweep: {e}")
                return EXIT_CONFIG
        return run_experiment(config, args.output, shutdown_event)
    finally:
        for signum, handler in previous.items():
            signal.signal(signum, handler)


if __name__ == "__main__":
    sys.exit(main())
