"""Plain-text reports, CSV traces and gnuplot scripts."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np

from analysis import (
    AnalysisConfig,
    TransitionCertificate,
    active_power_cltf,
    char_poly_active,
    char_poly_reactive,
    conventional_gfl_sensitivity,
    current_loop_tf,
    mode_equivalence_mismatch,
    proposed_sensitivity,
    reactive_power_cltf,
    stability_margin,
    voltage_loop_tf,
    vsg_equivalence,
)
from logging_utils import get_logger
from numerics import is_hurwitz_polynomial
from scenarios import Metrics, Scenario, Trace

logger = get_logger(__name__)

Sections = Dict[str, Dict[str, Any]]


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{float(value):.10g}"
    if isinstance(value, complex):
        return f"{value.real:.10g}{value.imag:+.10g}j"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(format_value(item) for item in value) + "]"
    return str(value)


def render_report(title: str, sections: Mapping[str, Mapping[str, Any]]) -> str:
    """``[section]`` blocks of ``key = value`` lines."""

    lines = [f"# {title}"]
    for name, entries in sections.items():
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {format_value(value)}" for key, value in entries.items())
    return "\n".join(lines) + "\n"


def render_table(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    header = "  ".join(f"{column:>14}" for column in columns)
    body = ["  ".join(f"{format_value(value):>14}" for value in row) for row in rows]
    return "\n".join([header, *body]) + "\n"


def _sorted_roots(roots: np.ndarray) -> List[complex]:
    return sorted((complex(root) for root in roots), key=lambda r: (round(r.real, 9), round(r.imag, 9)))


# ---------------------------------------------------------------------------
# analysis and certificate


def analysis_sections(config: AnalysisConfig) -> Sections:
    params = config.plant
    cfg = config.proposed()
    eps = config.epsilon
    frequency = config.sensitivity_frequency or cfg.omega_lpf
    sections: Sections = {}

    for channel, poly_fn, cltf_fn in (
        ("active", char_poly_active, active_power_cltf),
        ("reactive", char_poly_reactive, reactive_power_cltf),
    ):
        poly = poly_fn(params, cfg, eps)
        reference, disturbance = cltf_fn(params, cfg, eps)
        sections[channel] = {
            "epsilon": eps,
            "char_poly_ascending": list(poly.coef),
            "routh_hurwitz": "stable" if is_hurwitz_polynomial(poly) else "unstable",
            "poles": _sorted_roots(reference.poles()),
            "dc_gain_reference": reference.dc_gain(),
            "dc_gain_disturbance": disturbance.dc_gain(),
            "margin_omega_lpf_minus_ki_over_kp": stability_margin(cfg, channel),
        }

    voltage_conv, frequency_conv = conventional_gfl_sensitivity(params, config.control.pll)
    voltage_prop, frequency_prop = proposed_sensitivity(cfg, eps)
    sections["sensitivity"] = {
        "sensitivity_frequency": frequency,
        "conventional_voltage_gain": float(voltage_conv.magnitude(np.array([frequency]))[0]),
        "proposed_voltage_gain": float(voltage_prop.magnitude(np.array([frequency]))[0]),
        "conventional_frequency_gain": float(frequency_conv.magnitude(np.array([frequency]))[0]),
        "proposed_frequency_gain": float(frequency_prop.magnitude(np.array([frequency]))[0]),
        "droop_mismatch_at_eps_max": mode_equivalence_mismatch(cfg),
    }

    vsg = vsg_equivalence(config.vsg)
    sections["vsg"] = {
        "J": config.vsg.J,
        "H": config.vsg.H,
        "D": config.vsg.D,
        "k_omega": config.vsg.k_omega,
        "mismatch_h_reading": vsg.mismatch_h,
        "mismatch_j_reading": vsg.mismatch_j,
    }

    inner = config.control.inner
    voltage_loop = voltage_loop_tf(params, inner)
    sections["inner"] = {
        "tau_c": inner.tau_c,
        "k_pV": inner.k_pV,
        "k_iV": inner.k_iV,
        "current_loop_pole": _sorted_roots(current_loop_tf(inner).poles()),
        "voltage_loop_poles": _sorted_roots(voltage_loop.poles()),
        "voltage_loop_dc_gain": voltage_loop.dc_gain(),
        "voltage_loop": "stable" if voltage_loop.is_stable() else "unstable",
    }
    return sections


def analysis_report(config: AnalysisConfig) -> str:
    return render_report("power loop analysis", analysis_sections(config))


def certificate_report(certificate: TransitionCertificate) -> str:
    summary = render_report(
        "transition certificate",
        {
            "certificate": {
                "channel": certificate.channel,
                "eps_max": certificate.eps_max,
                "log_alpha": certificate.log_alpha,
                "alpha_bound": certificate.alpha_bound,
                "state_norm_gain": certificate.state_norm_gain,
                "log_alpha_pointwise": certificate.log_alpha_pointwise,
                "alpha_pointwise": certificate.alpha_pointwise,
                "state_norm_gain_pointwise": certificate.state_norm_gain_pointwise,
                "dwell_time": certificate.dwell_time,
                "lambda_min": certificate.lambda_min,
                "lambda_max": certificate.lambda_max,
                "max_dW_norm": certificate.max_dW_norm,
            }
        },
    )
    table = render_table(
        ("epsilon", "lambda_min", "lambda_max", "dW_norm"),
        ((p.epsilon, p.lambda_min, p.lambda_max, p.dW_norm) for p in certificate.points),
    )
    return summary + "\n[grid]\n" + table


# ---------------------------------------------------------------------------
# scenarios


def metrics_report(scenario: Scenario, metrics: Metrics, extra: Mapping[str, Any] | None = None) -> str:
    sections: Sections = {
        "scenario": {
            "name": scenario.name,
            "topology": scenario.topology,
            "unit_under_test": scenario.unit_under_test.name,
            "omega_lpf": scenario.control.omega_lpf,
            "dt": scenario.dt,
            "duration": scenario.duration,
        },
        "metrics": metrics.as_dict(),
    }
    if extra:
        sections["extra"] = dict(extra)
    return render_report("scenario metrics", sections)


def gnuplot_script(csv_name: str, columns: Sequence[str], title: str) -> str:
    """Script plotting power and frequency panels from ``csv_name``."""

    index = {name: k + 1 for k, name in enumerate(columns)}
    power = [name for name in columns if name.endswith((".P", ".Q")) and not name.startswith("line_loss")]
    frequency = [name for name in columns if name.endswith(".omega")]
    lines = [
        f"# {title}",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set terminal pngcairo size 1200,900",
        f"set output '{Path(csv_name).with_suffix('.png').name}'",
        "set multiplot layout 2,1",
        "set xlabel 't [s]'",
        "set ylabel 'power [W, VAR]'",
        "plot " + ", ".join(f"'{csv_name}' using 1:{index[name]} with lines" for name in power),
        "set ylabel 'omega [rad/s]'",
        "plot " + ", ".join(f"'{csv_name}' using 1:{index[name]} with lines" for name in frequency),
        "unset multiplot",
    ]
    return "\n".join(lines) + "\n"


def write_trace(trace: Trace, directory: Path, stem: str = "trace") -> List[Path]:
    """Write ``<stem>.csv`` and its plotting script ``<stem>.gp``."""

    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    script_path = directory / f"{stem}.gp"
    trace.write_csv(csv_path)
    script_path.write_text(gnuplot_script(csv_path.name, list(trace.columns), trace.name))
    logger.info("trace_written", extra={"path": str(csv_path), "rows": len(trace)})
    return [csv_path, script_path]


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info("report_written", extra={"path": str(path)})
    return path
