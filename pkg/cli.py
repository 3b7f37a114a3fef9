"""Command-line entry point: ``microgrid-sim simulate|analyze|certify|sweep``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 certificate unavailable.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from analysis import AnalysisConfig, CertificateUnavailableError, transition_certificate
from logging_utils import configure_logging, get_logger
from numerics import ContractViolationError, IntegrationDivergedError, LyapunovNoSolutionError
from plant import NetworkConfigError
from reports import analysis_report, certificate_report, metrics_report, render_report, write_text, write_trace
from scenarios import (
    OMEGA_LPF_SWEEP,
    RocofWindowError,
    ScenarioFailedError,
    SettlingError,
    build_scenario,
    load_scenario_document,
    run_fast_load_step,
    run_power_tracking,
    run_slow_load_ramp,
    run_transition,
    scenario_metrics,
    simulate,
    tracking_errors,
)
from settings import ConfigError, apply_overrides, get_settings, parse_angular

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CERTIFICATE = 4

EXPERIMENTS = ("power_tracking", "fast_load_step", "slow_load_ramp", "transition")
METHOD_SHAPES = {"smooth": "linear", "smoothstep": "smoothstep", "sudden": "jump"}


def _angular(text: str) -> float:
    try:
        return parse_angular(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an angular frequency: {text!r}") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted override, e.g. control.omega_lpf=20pi (repeatable)",
    )
    parser.add_argument("--output-dir", type=Path, default=None, help="default: $MICROGRID_OUTPUT_DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microgrid-sim", description="Microgrid inverter simulation and analysis")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="run one scenario and write trace.csv and metrics.txt")
    sim.add_argument("--scenario", required=True, help="bundled scenario name or JSON path")
    sim.add_argument("--wlpf", type=_angular, default=None, help="power filter cut-off, e.g. 20pi")
    sim.add_argument("--method", choices=sorted(METHOD_SHAPES), default=None, help="GFL to GFM transition method")
    sim.add_argument("--dt", type=float, default=None)
    _add_common(sim)

    ana = commands.add_parser("analyze", help="closed-loop polynomials, poles, gains and VSG equivalence")
    ana.add_argument("--epsilon", type=float, default=None)
    ana.add_argument("--wlpf", type=_angular, default=None)
    _add_common(ana)

    cert = commands.add_parser("certify", help="Lyapunov certificate of an epsilon transition")
    cert.add_argument("--eps-max", type=float, default=None)
    cert.add_argument("--ramp-rate", type=float, default=None)
    cert.add_argument("--channel", choices=("active", "reactive"), default="active")
    cert.add_argument("--grid-points", type=int, default=None)
    cert.add_argument("--wlpf", type=_angular, default=None)
    _add_common(cert)

    sweep = commands.add_parser("sweep", help="reproduce the bundled experiments")
    sweep.add_argument("--experiment", choices=(*EXPERIMENTS, "all"), default="all")
    sweep.add_argument("--jobs", type=int, default=None)
    sweep.add_argument("--dt", type=float, default=None)
    _add_common(sweep)
    return parser


def _output_dir(args: argparse.Namespace) -> Path:
    return args.output_dir if args.output_dir is not None else get_settings().output_dir


def _validated(model: Callable[[Dict[str, Any]], Any], document: Dict[str, Any]) -> Any:
    try:
        return model(document)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or None
        logger.warning("config_invalid", extra={"key": key, "detail": first["msg"]})
        raise ConfigError(first["msg"], key=key) from exc


def _analysis_config(args: argparse.Namespace, extra: Sequence[str] = ()) -> AnalysisConfig:
    overrides = list(args.overrides)
    if args.wlpf is not None:
        overrides.append(f"control.omega_lpf={args.wlpf!r}")
    overrides.extend(extra)
    document = apply_overrides({}, overrides)
    return _validated(AnalysisConfig.model_validate, document)


def cmd_simulate(args: argparse.Namespace) -> int:
    document = load_scenario_document(args.scenario)
    overrides = list(args.overrides)
    if args.wlpf is not None:
        overrides.append(f"control.omega_lpf={args.wlpf!r}")
    if args.dt is not None:
        overrides.append(f"dt={args.dt!r}")
    if args.method is not None:
        shape = METHOD_SHAPES[args.method]
        for index, event in enumerate(document.get("events", [])):
            schedule = event.get("schedule") or {}
            if event.get("kind") == "transition" and schedule.get("direction", "gfl_to_gfm") == "gfl_to_gfm":
                overrides.append(f"events.{index}.schedule.shape={shape}")
    apply_overrides(document, overrides)
    scenario = build_scenario(document)

    trace = simulate(scenario)
    metrics = scenario_metrics(trace, scenario)
    extra: Dict[str, Any] = {}
    if args.method is not None:
        extra["method"] = args.method
    report = metrics_report(scenario, metrics, extra)

    directory = _output_dir(args) / scenario.name
    write_trace(trace, directory)
    write_text(directory / "metrics.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    extra = [f"epsilon={args.epsilon!r}"] if args.epsilon is not None else []
    config = _analysis_config(args, extra)
    report = analysis_report(config)
    if args.output_dir is not None:
        write_text(args.output_dir / "analysis.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_certify(args: argparse.Namespace) -> int:
    extra: List[str] = []
    if args.eps_max is not None:
        extra.append(f"schedule.eps_max={args.eps_max!r}")
        # the controller limit follows the requested travel
        extra.append(f"control.eps_max={args.eps_max!r}")
    if args.ramp_rate is not None:
        extra.append(f"schedule.ramp_rate={args.ramp_rate!r}")
    if args.grid_points is not None:
        extra.append(f"grid_points={args.grid_points}")
    config = _analysis_config(args, extra)
    certificate = transition_certificate(
        config.plant,
        config.proposed(),
        config.schedule,
        channel=args.channel,
        grid_points=config.grid_points,
    )
    report = certificate_report(certificate)
    if args.output_dir is not None:
        write_text(args.output_dir / "certificate.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def _sweep_power_tracking(args: argparse.Namespace, root: Path) -> Dict[str, Any]:
    results = run_power_tracking(OMEGA_LPF_SWEEP, dt=args.dt, jobs=args.jobs)
    summary: Dict[str, Any] = {}
    for label, (scenario, trace) in results.items():
        write_trace(trace, root / "power_tracking", stem=label)
        rows = tracking_errors(trace, scenario)
        summary[f"{label}.worst_error"] = max(max(row["error_P"], row["error_Q"]) for row in rows)
    return summary


def _sweep_fast_load_step(args: argparse.Namespace, root: Path) -> Dict[str, Any]:
    result = run_fast_load_step(OMEGA_LPF_SWEEP, dt=args.dt, jobs=args.jobs)
    summary: Dict[str, Any] = {}
    for label, trace in result.traces.items():
        write_trace(trace, root / "fast_load_step", stem=label)
        summary[f"{label}.rocof_max"] = result.metrics[label].rocof_max
    for label, ratio in result.rocof_ratio.items():
        summary[f"{label}.rocof_ratio"] = ratio
    return summary


def _sweep_slow_load_ramp(args: argparse.Namespace, root: Path) -> Dict[str, Any]:
    result = run_slow_load_ramp(dt=args.dt)
    write_trace(result.trace, root / "slow_load_ramp")
    return {
        "gfl_max_deviation": result.gfl_max_deviation,
        "gfm_rise": result.gfm_rise,
        "load_rise": result.load_rise,
    }


def _sweep_transition(args: argparse.Namespace, root: Path) -> Dict[str, Any]:
    result = run_transition(dt=args.dt, jobs=args.jobs)
    summary: Dict[str, Any] = {}
    for label, trace in result.traces.items():
        write_trace(trace, root / "transition", stem=label)
        summary[f"{label}.overshoot_P"] = result.overshoot_P[label]
        summary[f"{label}.overshoot_Q"] = result.overshoot_Q[label]
        summary[f"{label}.return_transient_P"] = result.return_transient_P[label]
    summary["overshoot_ratio_P"] = result.overshoot_ratio_P
    return summary


SWEEPS: Dict[str, Callable[[argparse.Namespace, Path], Dict[str, Any]]] = {
    "power_tracking": _sweep_power_tracking,
    "fast_load_step": _sweep_fast_load_step,
    "slow_load_ramp": _sweep_slow_load_ramp,
    "transition": _sweep_transition,
}


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.overrides:
        raise ConfigError("sweep runs the bundled experiments and takes no overrides", key="--set")
    root = _output_dir(args)
    names = EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    sections = {name: SWEEPS[name](args, root) for name in names}
    report = render_report("experiment sweep", sections)
    write_text(root / "summary.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "certify": cmd_certify,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        configure_logging(args.log_level, force=True)
    try:
        return COMMANDS[args.command](args)
    except CertificateUnavailableError as exc:
        logger.error("certificate_unavailable", extra={"epsilon": exc.epsilon})
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CERTIFICATE
    except (ConfigError, ValidationError, ContractViolationError, NetworkConfigError) as exc:
        logger.error("command_config_error", extra={"command": args.command, "error": str(exc)})
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (
        ScenarioFailedError,
        IntegrationDivergedError,
        LyapunovNoSolutionError,
        SettlingError,
        RocofWindowError,
        ArithmeticError,
    ) as exc:
        logger.error("command_numerical_failure", extra={"command": args.command, "error": str(exc)})
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
