"""Cockpit simulator MCP server: one live cockpit world exposed as agent tools."""

import asyncio
import json
import logging
import os
from typing import Any, Callable, Dict, List, Optional

import mcp.server.stdio
from mcp.server import Server
from mcp.types import TextContent, Tool

from . import __version__
from .calls import ApiCall, parse_call
from .cli import configure_logging
from .config import load_environment
from .errors import CockpitError, EndpointError
from .executor import StatePatch, execute_fc, execute_sfc, project_snapshot
from .registry import default_registry
from .state import COMPACT, FULL, serialize_snapshot
from .world import World

logger = logging.getLogger(__name__)

SERVER_VERSION = __version__

app = Server("cockpit-sim")

# Global world instance
_world: Optional[World] = None


def get_world() -> World:
    """Get or create the server's world."""
    global _world
    if _world is None:
        strict = os.getenv("COCKPIT_STRICT", "false").lower() in ("true", "1", "yes")
        _world = World(default_registry(), strict=strict)
        logger.info("world created with %d devices (strict=%s)", len(_world.device_ids), strict)
    return _world


def reset_world() -> World:
    global _world
    _world = None
    return get_world()


def format_error(error: Exception) -> str:
    """Format an error message for display."""
    if isinstance(error, EndpointError):
        msg = f"Error {error.status_code}: {error.message}"
        if error.response:
            msg += f"\nDetails: {error.response}"
        return msg
    return str(error)


def format_response(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False)


_DEVICES_PROPERTY = {
    "type": "array",
    "items": {"type": "string"},
    "description": "Device ids to include (the environment is always included). Omit for all devices.",
}

TOOLS = [
    Tool(
        name="search_module",
        description="List every device in the cockpit with a one-line description and its domain.",
        inputSchema={"type": "object", "properties": {}},
    ),
    Tool(
        name="search_api",
        description="List the APIs of one device: names, parameters, required parameters and descriptions.",
        inputSchema={
            "type": "object",
            "properties": {"device_id": {"type": "string", "description": "Device id from search_module"}},
            "required": ["device_id"],
        },
    ),
    Tool(
        name="invoke_api",
        description=(
            "Call one device API. Pass either 'call' as a call expression, e.g. "
            "'airconditioner_temperature_set(value=20)', or 'api_name' plus an 'args' object."
        ),
        inputSchema={
            "type": "object",
            "properties": {
                "call": {"type": "string", "description": "Call expression api_name(arg=value, ...)"},
                "api_name": {"type": "string"},
                "args": {"type": "object", "description": "Keyword arguments"},
            },
        },
    ),
    Tool(
        name="get_world_state",
        description="Serialized cockpit state: full (description, type, value per attribute) or compact (values only).",
        inputSchema={
            "type": "object",
            "properties": {
                "mode": {"type": "string", "enum": [FULL, COMPACT], "default": FULL},
                "devices": _DEVICES_PROPERTY,
            },
        },
    ),
    Tool(
        name="apply_state_patch",
        description=(
            "Write target attribute values directly, e.g. {\"door.is_locked\": true}. Paths are "
            "'device.attribute'; each path succeeds or fails on its own. Returns per-path results "
            "and the resulting device states."
        ),
        inputSchema={
            "type": "object",
            "properties": {
                "patch": {"type": "object", "description": "Map of attribute path to target value"},
                "devices": _DEVICES_PROPERTY,
            },
            "required": ["patch"],
        },
    ),
    Tool(
        name="init_device",
        description="Reset one device to a named preset ('default' restores the declared defaults).",
        inputSchema={
            "type": "object",
            "properties": {
                "device_id": {"type": "string"},
                "preset": {"type": "string", "default": "default"},
            },
            "required": ["device_id"],
        },
    ),
    Tool(
        name="reset_world",
        description="Discard the current world and start again from every device's defaults.",
        inputSchema={"type": "object", "properties": {}},
    ),
    Tool(
        name="get_server_version",
        description="Get the server version.",
        inputSchema={"type": "object", "properties": {}},
    ),
]


def _invoke(world: World, arguments: Dict[str, Any]) -> Dict[str, Any]:
    if arguments.get("call"):
        call = parse_call(arguments["call"])
    elif arguments.get("api_name"):
        call = ApiCall(arguments["api_name"], arguments.get("args") or {})
    else:
        raise CockpitError("invoke_api needs 'call' or 'api_name'")
    feedback = execute_fc(world, [call])
    return feedback.results[0].to_dict()


def _state(world: World, arguments: Dict[str, Any]) -> str:
    mode = arguments.get("mode", FULL)
    if mode not in (FULL, COMPACT):
        raise CockpitError(f"mode must be {FULL!r} or {COMPACT!r}")
    devices = arguments.get("devices")
    if devices is None:
        return serialize_snapshot(world.snapshot(), mode)
    return project_snapshot(world, devices, mode)


def _patch(world: World, arguments: Dict[str, Any]) -> Dict[str, Any]:
    patch = StatePatch(
        {path: tuple(v) if isinstance(v, list) else v for path, v in (arguments.get("patch") or {}).items()}
    )
    feedback = execute_sfc(world, patch, visible=arguments.get("devices"))
    assert feedback.post_state is not None
    return {
        "success": feedback.success,
        "results": [outcome.to_dict() for outcome in feedback.results],
        "state": json.loads(serialize_snapshot(feedback.post_state, FULL)),
    }


def _init(world: World, arguments: Dict[str, Any]) -> Dict[str, Any]:
    device_id = arguments["device_id"]
    preset = arguments.get("preset", "default")
    world.registry.init_device(world, device_id, preset)
    return {"device_id": device_id, "preset": preset, "state": world.device_state(device_id).values()}


_HANDLERS: Dict[str, Callable[[World, Dict[str, Any]], Any]] = {
    "search_module": lambda world, args: [m.model_dump() for m in world.registry.search_module()],
    "search_api": lambda world, args: [a.describe() for a in world.registry.search_api(args["device_id"])],
    "invoke_api": _invoke,
    "get_world_state": _state,
    "apply_state_patch": _patch,
    "init_device": _init,
}


def handle_tool(name: str, arguments: Optional[Dict[str, Any]]) -> str:
    """Run one tool and render its text result; errors come back as text, never raised."""
    arguments = dict(arguments or {})
    try:
        if name == "get_server_version":
            return format_response({"version": SERVER_VERSION, "devices": len(get_world().device_ids)})
        if name == "reset_world":
            world = reset_world()
            return format_response({"reset": True, "devices": world.device_ids})
        handler = _HANDLERS.get(name)
        if handler is None:
            return f"Unknown tool: {name}"
        result = handler(get_world(), arguments)
        return result if isinstance(result, str) else format_response(result)
    except KeyError as e:
        return f"Error: missing argument {e}"
    except Exception as e:
        logger.debug("tool %s failed", name, exc_info=True)
        return f"Error: {format_error(e)}"


@app.list_tools()
async def list_tools() -> List[Tool]:
    """List all available tools."""
    return TOOLS


@app.call_tool()
async def call_tool(name: str, arguments: Any) -> List[TextContent]:
    """Handle tool calls."""
    return [TextContent(type="text", text=handle_tool(name, arguments))]


async def async_main() -> None:
    """Run the MCP server."""
    async with mcp.server.stdio.stdio_server() as (read_stream, write_stream):
        await app.run(
            read_stream,
            write_stream,
            app.create_initialization_options(),
        )


def main() -> None:
    """Entry point for the MCP server."""
    load_environment()
    configure_logging(verbose=os.getenv("COCKPIT_VERBOSE", "").lower() in ("true", "1", "yes"))
    logger.info("starting version %s with %d tools", SERVER_VERSION, len(TOOLS))
    asyncio.run(async_main())


if __name__ == "__main__":
    main()
