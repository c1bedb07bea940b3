"""Execution paradigms: function calls (FC), state patches (SFC) and the hybrid of the two.

Agents express actions as the body of an ``action`` fenced block:

    fc: [door_lock_switch(switch=true), door_status_set(status="closed")]
    sfc: {"door.is_locked": true, "door.status": "closed"}
    select: ["door", "airConditioner"]
    done

``fc:`` also accepts one call per line after the prefix. ``sfc:`` takes a JSON object
mapping attribute paths to target values. ``select:`` takes a list of device ids.
"""

import json
import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from .calls import ApiCall, ApiResult, format_literal, parse_call_list, render_call
from .errors import ActionParseError, CockpitError, PatchError, ScopeError, UnknownDeviceError
from .state import (
    ENVIRONMENT_ID,
    FULL,
    StateDiff,
    Value,
    WorldSnapshot,
    serialize_snapshot,
    split_path,
    values_equal,
)
from .world import World

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class StatePatch:
    """Target values per attribute path."""

    assignments: Mapping[str, Value] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.assignments, Mapping):
            raise PatchError("patch must map attribute paths to values")
        for path in self.assignments:
            if not isinstance(path, str) or "." not in path:
                raise PatchError(f"patch key {path!r} is not an attribute path")
        object.__setattr__(self, "assignments", MappingProxyType(dict(self.assignments)))

    @classmethod
    def from_diff(cls, diff: StateDiff) -> "StatePatch":
        return cls(diff.as_patch())

    @classmethod
    def from_json(cls, text: str) -> "StatePatch":
        """
        Raises:
            PatchError: If the text is not a JSON object of path -> value
        """
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise PatchError(f"patch is not valid JSON: {e.msg} (line {e.lineno}, column {e.colno})") from e
        if not isinstance(data, dict):
            raise PatchError("patch must be a JSON object")
        return cls({path: tuple(v) if isinstance(v, list) else v for path, v in data.items()})

    def to_json(self) -> str:
        data = {path: list(v) if isinstance(v, tuple) else v for path, v in self.assignments.items()}
        return json.dumps(data, sort_keys=True, ensure_ascii=False)

    def __len__(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class FCAction:
    calls: Tuple[ApiCall, ...]

    def __post_init__(self) -> None:
        if not self.calls:
            raise ActionParseError("fc action needs at least one call")


@dataclass(frozen=True)
class SFCAction:
    patch: StatePatch

    def __post_init__(self) -> None:
        if not len(self.patch):
            raise ActionParseError("sfc action needs a non-empty patch")


@dataclass(frozen=True)
class SelectionAction:
    device_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.device_ids:
            raise ActionParseError("select action needs at least one device")


@dataclass(frozen=True)
class DoneAction:
    pass


Action = Union[FCAction, SFCAction, SelectionAction, DoneAction]


def _split_names(body: str) -> Tuple[str, ...]:
    body = body.strip()
    if body.startswith("["):
        if not body.endswith("]"):
            raise ActionParseError("select list is missing its closing ']'")
        body = body[1:-1]
    names = [part.strip().strip("\"'") for part in body.replace("\n", ",").split(",")]
    return tuple(name for name in names if name)


def parse_action(body: str) -> Action:
    """
    Parse the body of an ``action`` block.

    Raises:
        ActionParseError: If the body matches none of the forms or its payload is malformed
    """
    text = body.strip()
    head, sep, rest = text.partition(":")
    kind = head.strip().lower()
    if not sep:
        if kind == "done":
            return DoneAction()
        raise ActionParseError("action must start with 'fc:', 'sfc:', 'select:' or be 'done'")
    if kind == "fc":
        return FCAction(tuple(parse_call_list(rest)))
    if kind == "sfc":
        try:
            return SFCAction(StatePatch.from_json(rest))
        except PatchError as e:
            raise ActionParseError(str(e)) from e
    if kind == "select":
        return SelectionAction(_split_names(rest))
    raise ActionParseError(f"unknown action kind {head.strip()!r}")


def render_action(action: Action) -> str:
    """Inverse of ``parse_action``."""
    if isinstance(action, FCAction):
        return "fc: [" + ", ".join(render_call(call) for call in action.calls) + "]"
    if isinstance(action, SFCAction):
        return "sfc: " + action.patch.to_json()
    if isinstance(action, SelectionAction):
        return "select: [" + ", ".join(format_literal(d) for d in action.device_ids) + "]"
    return "done"


# ---------------------------------------------------------------------------
# feedback


@dataclass(frozen=True)
class PatchOutcome:
    path: str
    success: bool
    message: str
    value: Value = None

    def to_dict(self) -> Dict[str, Any]:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"path": self.path, "success": self.success, "message": self.message, "value": value}


Outcome = Union[ApiResult, PatchOutcome]


@dataclass(frozen=True)
class ExecutionFeedback:
    results: Tuple[Outcome, ...]
    logs: Tuple[str, ...] = ()
    # device blocks visible to the agent after the action; SFC only
    post_state: Optional[WorldSnapshot] = None

    @property
    def success(self) -> bool:
        return all(result.success for result in self.results)

    @property
    def failures(self) -> List[Outcome]:
        return [result for result in self.results if not result.success]


# ---------------------------------------------------------------------------
# paradigms


def execute_fc(world: World, calls: Sequence[ApiCall]) -> ExecutionFeedback:
    """
    Execute calls in order. Failed calls are reported and execution continues.
    """
    results: List[ApiResult] = []
    logs: List[str] = []
    for call in calls:
        result = world.registry.invoke(world, call)
        results.append(result)
        status = "ok" if result.success else "error"
        logs.append(f"{render_call(call)} -> {status}: {result.message}")
        if not result.success:
            logger.debug("fc call failed: %s (%s)", call, result.message)
    return ExecutionFeedback(tuple(results), tuple(logs))


def execute_sfc(
    world: World, patch: StatePatch, visible: Optional[Iterable[str]] = None
) -> ExecutionFeedback:
    """
    Apply a state patch through the same setter layer the APIs use.

    Paths are applied one at a time in sorted order. A rejected path (unknown, read-only,
    wrong type or out of range) is reported and leaves its attribute untouched; the other
    paths still apply.

    Args:
        world: World to mutate
        patch: Target values
        visible: Devices included in ``post_state``; all devices when omitted
    """
    writable = world.registry.writable_paths()
    results: List[PatchOutcome] = []
    logs: List[str] = []
    for path in sorted(patch.assignments):
        value = patch.assignments[path]
        if not world.has_path(path):
            outcome = PatchOutcome(path, False, "unknown attribute", value)
        elif path not in writable and not values_equal(world.get(path), value):
            outcome = PatchOutcome(path, False, "read-only attribute (no API can set it)", value)
        else:
            try:
                world.set(path, value)
                outcome = PatchOutcome(path, True, "ok", value)
            except CockpitError as e:
                outcome = PatchOutcome(path, False, str(e), value)
        results.append(outcome)
        logs.append(f"{path} = {format_literal(value)} -> {'ok' if outcome.success else 'error: ' + outcome.message}")
    post_state = world.snapshot(device_ids=visible)
    return ExecutionFeedback(tuple(results), tuple(logs), post_state)


def project_snapshot(world: World, device_ids: Iterable[str], mode: str = FULL) -> str:
    """
    Serialized snapshot restricted to the given devices plus the environment.

    Raises:
        UnknownDeviceError: If a device id is not registered
    """
    ids = list(device_ids)
    for device_id in ids:
        if device_id != ENVIRONMENT_ID and device_id not in world.device_ids:
            raise UnknownDeviceError(device_id)
    return serialize_snapshot(world.snapshot(device_ids=ids), mode)


def _outside_scope(world: World, result: ApiResult, scope: Set[str]) -> List[str]:
    """Changed paths owned by devices outside ``scope``; linked views of the environment excluded."""
    outside = []
    for path in (*result.touched_paths, *result.side_effects):
        device_id, name = split_path(path)
        if device_id == ENVIRONMENT_ID or device_id in scope:
            continue
        attr = world.definition(device_id).attribute(name)
        if attr is not None and attr.linked:
            continue
        outside.append(path)
    return outside


def execute_hybrid(world: World, selection: Sequence[str], calls: Sequence[ApiCall]) -> ExecutionFeedback:
    """
    Execute calls like ``execute_fc``, never changing a device outside the selection.

    A call is rejected when its API belongs to an unselected device, or when running it
    would change an unselected device through a side effect such as taking the sound
    channel from it. Each call is tried on a clone first, so a rejected call leaves the
    world untouched. The environment and the discovery APIs are always in scope.

    Raises:
        ScopeError: If the selection is empty
        UnknownDeviceError: If the selection names an unregistered device
    """
    if not selection:
        raise ScopeError("device selection must not be empty")
    scope = set(selection)
    for device_id in scope:
        if device_id != ENVIRONMENT_ID and device_id not in world.device_ids:
            raise UnknownDeviceError(device_id)

    results: List[ApiResult] = []
    logs: List[str] = []
    for call in calls:
        owner = world.registry.device_of(call.api_name) if world.registry.has_api(call.api_name) else None
        error: Optional[ScopeError] = None
        if owner is not None and owner != ENVIRONMENT_ID and owner not in scope:
            error = ScopeError(f"{call.api_name} belongs to {owner!r}, outside the selected devices {sorted(scope)}")
        elif owner is not None:
            trial = world.registry.invoke(world.clone(), call)
            outside = _outside_scope(world, trial, scope) if trial.success else []
            if outside:
                error = ScopeError(
                    f"{call.api_name} would change {outside}, outside the selected devices {sorted(scope)}"
                )
        if error is not None:
            result = ApiResult.failure(call.api_name, str(error))
            logger.debug("hybrid scope rejection: %s", error)
        else:
            result = world.registry.invoke(world, call)
        results.append(result)
        status = "ok" if result.success else "error"
        logs.append(f"{render_call(call)} -> {status}: {result.message}")
    return ExecutionFeedback(tuple(results), tuple(logs))
