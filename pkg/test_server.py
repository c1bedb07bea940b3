"""Tests for the MCP tool handlers (no client connection required)."""

import json

import pytest

from src.cockpit_sim import __version__, server


@pytest.fixture(autouse=True)
def fresh_world():
    server.reset_world()
    yield
    server.reset_world()


def call(name, **arguments):
    return server.handle_tool(name, arguments)


def test_tool_list():
    names = [tool.name for tool in server.TOOLS]
    assert names == [
        "search_module",
        "search_api",
        "invoke_api",
        "get_world_state",
        "apply_state_patch",
        "init_device",
        "reset_world",
        "get_server_version",
    ]


def test_server_version():
    data = json.loads(call("get_server_version"))
    assert data == {"version": __version__, "devices": 11}


def test_discovery_tools():
    modules = json.loads(call("search_module"))
    assert len(modules) == 12
    assert {"device_id", "description", "domain"} <= set(modules[0])
    apis = json.loads(call("search_api", device_id="door"))
    assert [a["api_name"] for a in apis] == ["door_lock_switch", "door_status_set", "door_state_view"]
    assert call("search_api") == "Error: missing argument 'device_id'"
    assert call("search_api", device_id="toaster").startswith("Error: ")


def test_invoke_api():
    result = json.loads(call("invoke_api", call="door_lock_switch(switch=true)"))
    assert result["success"] is True
    assert result["touched_paths"] == ["door.is_locked"]
    assert server.get_world().get("door.is_locked") is True

    failed = json.loads(call("invoke_api", api_name="conversation_phone_call", args={"contact": "Zed"}))
    assert failed == {"api": "conversation_phone_call", "success": False, "message": "Contact not found"}
    assert call("invoke_api").startswith("Error: invoke_api needs")
    assert call("invoke_api", call="door_lock_switch(").startswith("Error: ")


def test_world_state():
    compact = json.loads(call("get_world_state", mode="compact", devices=["door"]))
    assert "door" in compact and "environment" in compact and "music" not in compact
    assert compact["environment"]["volume"] == 50
    full = json.loads(call("get_world_state"))
    assert full["door"]["is_locked"]["type"] == "boolean"
    assert call("get_world_state", mode="tiny").startswith("Error: mode must be")


def test_apply_state_patch():
    result = json.loads(call(
        "apply_state_patch",
        patch={"door.is_locked": True, "door.colour": "red", "music.favorites": ["Imagine"]},
        devices=["door"],
    ))
    assert result["success"] is False
    outcomes = {r["path"]: r for r in result["results"]}
    assert outcomes["door.is_locked"]["success"] is True
    assert outcomes["door.colour"]["message"] == "unknown attribute"
    assert outcomes["music.favorites"]["value"] == ["Imagine"]
    assert "door" in result["state"] and "music" not in result["state"]
    assert server.get_world().get("music.favorites") == ("Imagine",)
    assert call("apply_state_patch", patch={"volume": 1}).startswith("Error: ")


def test_init_and_reset():
    data = json.loads(call("init_device", device_id="music", preset="playing"))
    assert data["state"]["is_playing"] is True
    assert server.get_world().get("environment.sound_channel") == "music"
    assert call("init_device", device_id="music", preset="loud").startswith("Error: ")

    reset = json.loads(call("reset_world"))
    assert reset["reset"] is True
    assert len(reset["devices"]) == 11
    assert server.get_world().get("environment.sound_channel") == "none"


def test_unknown_tool():
    assert call("launch_rockets") == "Unknown tool: launch_rockets"
