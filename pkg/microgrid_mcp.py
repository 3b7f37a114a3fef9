"""FastMCP service exposing the analysis functions and bundled scenarios."""
from __future__ import annotations

from typing import Any, Dict, Iterable, List

from fastmcp.server import FastMCP
from pydantic import ValidationError
from starlette.requests import Request
from starlette.responses import JSONResponse

from analysis import AnalysisConfig, transition_certificate
from logging_utils import get_logger
from reports import analysis_sections
from scenarios import bundled_scenarios, load_scenario
from settings import ConfigError, MicrogridSettings, apply_overrides, get_settings

logger = get_logger(__name__)

_HANDSHAKE_PATHS: tuple[str, ...] = ("/handshake", "/mcp/handshake")
_TOOL_LIST_PATHS: tuple[str, ...] = ("/list", "/mcp/list")


def _serialise_tools(tools: Dict[str, Any]) -> List[Dict[str, str]]:
    return [
        {"name": str(name), "description": str(getattr(tool, "description", "") or "").strip()}
        for name, tool in sorted(tools.items())
    ]


def _register_routes(server: FastMCP, paths: Iterable[str], handler: Any) -> None:
    for path in paths:
        server.custom_route(path, methods=["GET"])(handler)


def register_metadata_routes(server: FastMCP) -> None:
    """Expose handshake metadata, the tool listing and bundled scenario names over HTTP."""

    async def handshake(_: Request) -> JSONResponse:
        tools = _serialise_tools(await server.get_tools())
        payload = {
            "name": server.name,
            "instructions": server.instructions,
            "endpoints": {"mcp": "/mcp", "list": "/list"},
            "tools": tools,
            "scenarios": bundled_scenarios(),
        }
        logger.info("handshake_served", extra={"tool_count": len(tools), "server_name": server.name})
        return JSONResponse(payload)

    async def list_tools(_: Request) -> JSONResponse:
        tools = _serialise_tools(await server.get_tools())
        logger.info("tool_list_served", extra={"tool_count": len(tools), "server_name": server.name})
        return JSONResponse({"tools": tools})

    _register_routes(server, _HANDSHAKE_PATHS, handshake)
    _register_routes(server, _TOOL_LIST_PATHS, list_tools)


def _config(overrides: List[str] | None) -> AnalysisConfig:
    document = apply_overrides({}, overrides or [])
    try:
        return AnalysisConfig.model_validate(document)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], key=".".join(str(p) for p in first["loc"]) or None) from exc


def _jsonable(value: Any) -> Any:
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, float):
        return value if value == value and abs(value) != float("inf") else str(value)
    return value


def create_server(settings: MicrogridSettings | None = None) -> FastMCP:
    settings = settings or get_settings()
    mcp = FastMCP(name=settings.service_name, instructions=settings.service_instructions)

    @mcp.tool()
    async def analyze(overrides: List[str] | None = None, epsilon: float = 0.0):
        """Characteristic polynomials, poles, DC gains, sensitivities and VSG equivalence."""
        try:
            config = _config([*(overrides or []), f"epsilon={epsilon!r}"])
            sections = analysis_sections(config)
        except ValueError as exc:
            logger.warning("tool_analyze_failed", extra={"error": str(exc)})
            raise
        logger.info("tool_analyze_succeeded", extra={"epsilon": epsilon})
        return {
            section: {key: _jsonable(value) for key, value in entries.items()}
            for section, entries in sections.items()
        }

    @mcp.tool()
    async def certify(overrides: List[str] | None = None, channel: str = "active"):
        """Lyapunov certificate (alpha bound, state-norm gain, dwell time) of an epsilon transition."""
        if channel not in ("active", "reactive"):
            logger.warning("tool_certify_failed", extra={"error": "unknown channel", "channel": channel})
            raise ValueError(f"unknown channel: {channel!r}")
        try:
            config = _config(overrides)
            certificate = transition_certificate(
                config.plant,
                config.proposed(),
                config.schedule,
                channel=channel,  # type: ignore[arg-type]
                grid_points=config.grid_points,
            )
        except ValueError as exc:
            logger.warning("tool_certify_failed", extra={"error": str(exc), "channel": channel})
            raise
        logger.info("tool_certify_succeeded", extra={"log_alpha": certificate.log_alpha})
        return {
            "channel": certificate.channel,
            "eps_max": certificate.eps_max,
            "log_alpha": certificate.log_alpha,
            "alpha_bound": _jsonable(certificate.alpha_bound),
            "state_norm_gain": _jsonable(certificate.state_norm_gain),
            "log_alpha_pointwise": certificate.log_alpha_pointwise,
            "alpha_pointwise": _jsonable(certificate.alpha_pointwise),
            "state_norm_gain_pointwise": _jsonable(certificate.state_norm_gain_pointwise),
            "dwell_time": certificate.dwell_time,
        }

    @mcp.tool()
    async def list_scenarios():
        """Bundled scenarios with their topology, units and event count."""
        listing = []
        for name in bundled_scenarios():
            scenario = load_scenario(name)
            listing.append(
                {
                    "name": name,
                    "topology": scenario.topology,
                    "duration": scenario.duration,
                    "units": [{"name": unit.name, "kind": unit.kind} for unit in scenario.units],
                    "events": len(scenario.events),
                }
            )
        logger.info("tool_list_scenarios_succeeded", extra={"count": len(listing)})
        return {"scenarios": listing}

    register_metadata_routes(mcp)

    return mcp


if __name__ == "__main__":
    create_server().run(transport="sse", host="127.0.0.1", port=8000)
