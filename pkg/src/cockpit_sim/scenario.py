"""Scenario DSL parsing, truth execution, validation and record persistence.

A scenario file looks like::

    <scenario id="ac-door" domain="car_control" category="S-M">
      <inits>
        door.open_unlocked
        airconditioner_temperature_set(value=24)
      </inits>
      <query>Turn on the air conditioner and lower it to 20 degrees, close the car door.</query>
      <api_call>
        airconditioner_switch(on=true)
        airconditioner_temperature_set(value=20)
        door_status_set(status="closed")
      </api_call>
    </scenario>

Tags are case-insensitive. ``<inits>`` lines are either ``device.preset`` or call expressions.
Each ``<query>`` must be followed by its ``<api_call>``; an optional ``<trend>`` after it lists
attribute paths whose target value is ambiguous and scored by direction only.
"""

import glob
import html
import json
import logging
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from .calls import ApiCall, parse_call, parse_call_list, render_call
from .errors import (
    ActionParseError,
    CockpitError,
    NoOpTurnError,
    ScenarioParseError,
    SnapshotSchemaError,
    TruthExecutionError,
)
from .registry import DeviceRegistry, default_registry
from .state import (
    ENVIRONMENT_ID,
    FULL,
    WorldSnapshot,
    diff_snapshots,
    parse_snapshot,
    serialize_snapshot,
    split_path,
)
from .world import World

logger = logging.getLogger(__name__)

CATEGORIES = ("S-S", "S-M", "M-S", "M-M")
SEMANTIC_REVIEW = "requires human review"
_PRESET_LINE = re.compile(r"^([A-Za-z]\w*)\.([A-Za-z]\w*)$")
_CHILD_TAGS = ("inits", "query", "api_call", "trend")


@dataclass(frozen=True)
class PresetInit:
    device_id: str
    preset_name: str

    def render(self) -> str:
        return f"{self.device_id}.{self.preset_name}"


InitStep = Union[PresetInit, ApiCall]


@dataclass(frozen=True)
class Turn:
    query: str
    truth_calls: Tuple[ApiCall, ...]
    trend_scored: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.truth_calls:
            raise ScenarioParseError("a turn needs at least one truth call")


@dataclass(frozen=True)
class Scenario:
    id: str
    turns: Tuple[Turn, ...]
    inits: Tuple[InitStep, ...] = ()
    domain: str = ""
    category: str = ""

    def __post_init__(self) -> None:
        if not self.turns:
            raise ScenarioParseError(f"scenario {self.id!r} has no turns")
        if not self.category:
            object.__setattr__(self, "category", derive_category(self.turns))

    @property
    def api_names(self) -> List[str]:
        names = [step.api_name for step in self.inits if isinstance(step, ApiCall)]
        for turn in self.turns:
            names.extend(call.api_name for call in turn.truth_calls)
        return names


def derive_category(turns: Iterable[Turn]) -> str:
    """``S``/``M`` for single or multi turn, then ``S``/``M`` for single or multi intent."""
    turns = list(turns)
    multi_turn = "M" if len(turns) > 1 else "S"
    multi_intent = "M" if any(len(turn.truth_calls) > 1 for turn in turns) else "S"
    return f"{multi_turn}-{multi_intent}"


# ---------------------------------------------------------------------------
# parsing


class _ScenarioParser(HTMLParser):
    """Collects the scenario element's attributes and child blocks in document order."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.attrs: Dict[str, str] = {}
        self.blocks: List[Tuple[str, str]] = []
        self._stack: List[str] = []
        self._text: List[str] = []
        self._scenarios = 0

    def _where(self) -> str:
        line, column = self.getpos()
        return f"line {line}, column {column + 1}"

    def handle_starttag(self, tag: str, attrs: List[Tuple[str, Optional[str]]]) -> None:
        if tag == "scenario":
            if self._stack or self._scenarios:
                raise ScenarioParseError(f"only one top-level <scenario> allowed ({self._where()})")
            self._scenarios += 1
            self.attrs = {key: value or "" for key, value in attrs}
        elif tag in _CHILD_TAGS:
            if self._stack != ["scenario"]:
                raise ScenarioParseError(f"<{tag}> must sit directly inside <scenario> ({self._where()})")
            self._text = []
        else:
            raise ScenarioParseError(f"unknown tag <{tag}> ({self._where()})")
        self._stack.append(tag)

    def handle_startendtag(self, tag: str, attrs: List[Tuple[str, Optional[str]]]) -> None:
        self.handle_starttag(tag, attrs)
        self.handle_endtag(tag)

    def handle_endtag(self, tag: str) -> None:
        if not self._stack or self._stack[-1] != tag:
            raise ScenarioParseError(f"unexpected </{tag}> ({self._where()})")
        self._stack.pop()
        if tag in _CHILD_TAGS:
            self.blocks.append((tag, "".join(self._text).strip()))

    def handle_data(self, data: str) -> None:
        if len(self._stack) == 2:
            self._text.append(data)
        elif data.strip():
            raise ScenarioParseError(f"stray text {data.strip()[:30]!r} ({self._where()})")

    def finish(self) -> None:
        self.close()
        if self._stack:
            raise ScenarioParseError(f"unclosed <{self._stack[-1]}>")
        if not self._scenarios:
            raise ScenarioParseError("missing <scenario> element")


def _parse_inits(text: str) -> List[InitStep]:
    steps: List[InitStep] = []
    for line in text.splitlines():
        line = line.strip().rstrip(";")
        if not line or line.startswith("#"):
            continue
        match = _PRESET_LINE.match(line)
        if match:
            steps.append(PresetInit(match.group(1), match.group(2)))
        else:
            steps.append(parse_call(line))
    return steps


def _resolve(scenario: Scenario, registry: DeviceRegistry) -> List[str]:
    """Names in the scenario the registry cannot resolve."""
    problems = []
    for step in scenario.inits:
        if isinstance(step, PresetInit):
            if not registry.has_device(step.device_id):
                problems.append(f"unknown device {step.device_id!r} in <inits>")
            elif step.preset_name not in registry.device(step.device_id).preset_names:
                problems.append(f"device {step.device_id!r} has no init preset {step.preset_name!r}")
    for name in scenario.api_names:
        if not registry.has_api(name):
            problems.append(f"unknown API {name!r}")
    return problems


def parse_scenario(text: str, registry: Optional[DeviceRegistry] = None) -> Scenario:
    """
    Parse scenario DSL text.

    Args:
        text: Scenario document
        registry: When given, device, preset and API names are checked against it

    Raises:
        ScenarioParseError: On malformed nesting, missing or unpaired tags, bad call syntax
                            or names the registry does not know
    """
    parser = _ScenarioParser()
    try:
        parser.feed(text)
        parser.finish()
    except ActionParseError as e:
        raise ScenarioParseError(str(e)) from e

    inits: List[InitStep] = []
    turns: List[Turn] = []
    pending_query: Optional[str] = None
    seen_inits = False
    try:
        for tag, body in parser.blocks:
            if tag == "inits":
                if seen_inits:
                    raise ScenarioParseError("more than one <inits> block")
                seen_inits = True
                inits = _parse_inits(body)
            elif tag == "query":
                if pending_query is not None:
                    raise ScenarioParseError(f"<query> {pending_query[:40]!r} has no <api_call>")
                if not body:
                    raise ScenarioParseError("empty <query>")
                pending_query = body
            elif tag == "api_call":
                if pending_query is None:
                    raise ScenarioParseError("<api_call> without a preceding <query>")
                calls = parse_call_list(body)
                if not calls:
                    raise ScenarioParseError(f"empty <api_call> for query {pending_query[:40]!r}")
                turns.append(Turn(pending_query, tuple(calls)))
                pending_query = None
            elif tag == "trend":
                if pending_query is not None or not turns:
                    raise ScenarioParseError("<trend> must follow an <api_call>")
                paths = frozenset(p.strip() for p in re.split(r"[\s,]+", body) if p.strip())
                for path in paths:
                    split_path(path)
                last = turns[-1]
                turns[-1] = Turn(last.query, last.truth_calls, last.trend_scored | paths)
    except (ActionParseError, SnapshotSchemaError) as e:
        raise ScenarioParseError(str(e)) from e
    if pending_query is not None:
        raise ScenarioParseError(f"<query> {pending_query[:40]!r} has no <api_call>")
    if not turns:
        raise ScenarioParseError("scenario has no <query>/<api_call> pair")

    category = parser.attrs.get("category", "")
    if category and category not in CATEGORIES:
        raise ScenarioParseError(f"category must be one of {list(CATEGORIES)}, got {category!r}")
    scenario = Scenario(
        id=parser.attrs.get("id", ""),
        turns=tuple(turns),
        inits=tuple(inits),
        domain=parser.attrs.get("domain", ""),
        category=category,
    )
    if registry is not None:
        problems = _resolve(scenario, registry)
        if problems:
            raise ScenarioParseError("; ".join(problems))
    return scenario


def load_scenario(path: Path, registry: Optional[DeviceRegistry] = None) -> Scenario:
    """
    Parse a scenario file; the file stem is the id when the element has none.

    Raises:
        ScenarioParseError: If the file is not UTF-8 or not a valid scenario
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ScenarioParseError(f"not valid UTF-8: {e.reason} at byte {e.start}") from e
    scenario = parse_scenario(text, registry)
    if not scenario.id:
        scenario = Scenario(path.stem, scenario.turns, scenario.inits, scenario.domain, scenario.category)
    return scenario


def render_scenario(scenario: Scenario) -> str:
    """Canonical DSL text for a scenario."""
    lines = [
        f'<scenario id="{_quote(scenario.id)}" domain="{_quote(scenario.domain)}" '
        f'category="{_quote(scenario.category)}">'
    ]
    if scenario.inits:
        lines.append("  <inits>")
        for step in scenario.inits:
            text = step.render() if isinstance(step, PresetInit) else render_call(step)
            lines.append(f"    {text}")
        lines.append("  </inits>")
    for turn in scenario.turns:
        lines.append(f"  <query>{_escape(turn.query)}</query>")
        lines.append("  <api_call>")
        lines.extend(f"    {_escape(render_call(call))}" for call in turn.truth_calls)
        lines.append("  </api_call>")
        if turn.trend_scored:
            lines.append(f"  <trend>{' '.join(sorted(turn.trend_scored))}</trend>")
    lines.append("</scenario>")
    return "\n".join(lines) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _quote(value: str) -> str:
    return html.escape(value, quote=True)


def expand_paths(patterns: Iterable[str]) -> List[Path]:
    """
    Resolve files, directories (``*.xml`` inside) and glob patterns to a sorted file list.
    """
    found = set()
    for pattern in patterns:
        path = Path(pattern)
        if path.is_dir():
            found.update(path.glob("*.xml"))
        elif path.is_file():
            found.add(path)
        else:
            found.update(Path(match) for match in glob.glob(pattern) if Path(match).is_file())
    return sorted(found)


# ---------------------------------------------------------------------------
# truth execution


@dataclass(frozen=True)
class ScenarioRecord:
    scenario: Scenario
    truth_states: Tuple[WorldSnapshot, ...]

    def __post_init__(self) -> None:
        if len(self.truth_states) != len(self.scenario.turns) + 1:
            raise ValueError("a record holds the initial state plus one state per turn")

    def relevant_devices(self, registry: Optional[DeviceRegistry] = None) -> List[str]:
        """Devices the scenario initializes, calls or changes."""
        registry = registry or default_registry()
        devices = set()
        for step in self.scenario.inits:
            if isinstance(step, PresetInit):
                devices.add(step.device_id)
        for turn in self.scenario.turns:
            for call in turn.truth_calls:
                if registry.has_api(call.api_name):
                    devices.add(registry.device_of(call.api_name))
        for before, after in zip(self.truth_states, self.truth_states[1:]):
            devices.update(diff_snapshots(before, after).touched_devices())
        devices.discard(None)
        devices.discard(ENVIRONMENT_ID)
        return sorted(devices)


def initialize_world(
    scenario: Scenario, world: World, registry: Optional[DeviceRegistry] = None
) -> None:
    """
    Run a scenario's ``<inits>`` on a world.

    Raises:
        TruthExecutionError: If a preset is unknown or an init call fails
    """
    registry = registry or world.registry
    for step in scenario.inits:
        if isinstance(step, PresetInit):
            try:
                registry.init_device(world, step.device_id, step.preset_name)
            except CockpitError as e:
                raise TruthExecutionError(f"init {step.render()} failed: {e}") from e
        else:
            result = registry.invoke(world, step)
            if not result.success:
                raise TruthExecutionError(f"init {step} failed: {result.message}", result=result)


def _run_turns(scenario: Scenario, world: World) -> Tuple[List[WorldSnapshot], List[int]]:
    initialize_world(scenario, world)
    states = [world.snapshot(label="turn_0")]
    no_ops = []
    for index, turn in enumerate(scenario.turns):
        for call in turn.truth_calls:
            result = world.registry.invoke(world, call)
            if not result.success:
                raise TruthExecutionError(
                    f"turn {index}: {call} failed: {result.message}", turn_index=index, result=result
                )
        states.append(world.snapshot(label=f"turn_{index + 1}"))
        if diff_snapshots(states[-2], states[-1]).is_empty:
            no_ops.append(index)
    return states, no_ops


def execute_truth(scenario: Scenario, world: Optional[World] = None) -> ScenarioRecord:
    """
    Execute a scenario's inits and truth calls, snapshotting after each turn.

    Args:
        scenario: Parsed scenario
        world: Fresh world to execute on; a new default world when omitted

    Raises:
        TruthExecutionError: If an init or truth call fails (carries the turn index and result)
        NoOpTurnError: If a turn leaves the state unchanged
    """
    world = world or World()
    try:
        states, no_ops = _run_turns(scenario, world)
    except TruthExecutionError as e:
        logger.warning("scenario %s: %s", scenario.id, e)
        raise
    if no_ops:
        index = no_ops[0]
        message = f"turn {index}: no meaningful modification of the system state"
        logger.warning("scenario %s: %s", scenario.id, message)
        raise NoOpTurnError(message, turn_index=index)
    return ScenarioRecord(scenario, tuple(states))


@dataclass(frozen=True)
class ValidationReport:
    scenario_id: str
    executable: bool
    state_changing: bool
    resolvable: bool
    semantic_alignment: str = SEMANTIC_REVIEW
    diagnostics: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.executable and self.state_changing and self.resolvable

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario_id,
            "executable": self.executable,
            "state_changing": self.state_changing,
            "resolvable": self.resolvable,
            "semantic_alignment": self.semantic_alignment,
            "diagnostics": list(self.diagnostics),
        }


def validate_scenario(scenario: Scenario, world: Optional[World] = None) -> ValidationReport:
    """
    Run the automatic scenario checks: names resolve, every call executes, every turn
    changes the state. Semantic alignment of calls and query is left to a human reviewer.
    """
    world = world or World()
    diagnostics = _resolve(scenario, world.registry)
    resolvable = not diagnostics
    executable = False
    state_changing = False
    if resolvable:
        try:
            _, no_ops = _run_turns(scenario, world)
            executable = True
            state_changing = not no_ops
            diagnostics.extend(
                f"turn {index}: no meaningful modification of the system state" for index in no_ops
            )
        except TruthExecutionError as e:
            diagnostics.append(str(e))
    else:
        diagnostics.append("execution skipped: unresolved names")
    return ValidationReport(
        scenario_id=scenario.id,
        executable=executable,
        state_changing=state_changing,
        resolvable=resolvable,
        diagnostics=tuple(diagnostics),
    )


# ---------------------------------------------------------------------------
# persistence


def _state_name(index: int) -> str:
    return f"state_{index:03d}.json"


def serialize_record(record: ScenarioRecord) -> str:
    """Single canonical text for a whole record; equal records give identical text."""
    parts = [render_scenario(record.scenario)]
    parts.extend(serialize_snapshot(state, FULL) for state in record.truth_states)
    return "".join(parts)


def save_record(record: ScenarioRecord, directory: Path) -> Path:
    """
    Write a record as ``scenario.xml``, ``manifest.json`` and one ``state_NNN.json`` per state.

    Returns:
        The record directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "scenario.xml").write_text(render_scenario(record.scenario), encoding="utf-8")
    states = []
    for index, state in enumerate(record.truth_states):
        name = _state_name(index)
        (directory / name).write_text(serialize_snapshot(state, FULL), encoding="utf-8")
        states.append(name)
    manifest = {
        "id": record.scenario.id,
        "domain": record.scenario.domain,
        "category": record.scenario.category,
        "turns": len(record.scenario.turns),
        "states": states,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    logger.debug("saved record %s to %s", record.scenario.id, directory)
    return directory


def load_record(directory: Path, registry: Optional[DeviceRegistry] = None) -> ScenarioRecord:
    """
    Raises:
        ScenarioParseError: If the stored scenario is malformed
        SnapshotSyntaxError, SnapshotSchemaError: If a stored state is malformed
    """
    directory = Path(directory)
    registry = registry or default_registry()
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    scenario = parse_scenario((directory / "scenario.xml").read_text(encoding="utf-8"), registry)
    schema = registry.schema()
    states = tuple(
        parse_snapshot((directory / name).read_text(encoding="utf-8"), schema)
        for name in manifest["states"]
    )
    return ScenarioRecord(scenario, states)


@dataclass(frozen=True)
class ReplayResult:
    scenario_id: str
    drift: Tuple[str, ...] = field(default=())
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.drift and not self.error


def replay_record(record: ScenarioRecord, world: Optional[World] = None) -> ReplayResult:
    """Re-execute a stored scenario and list every ``state_NNN:path`` that no longer matches."""
    try:
        fresh = execute_truth(record.scenario, world)
    except TruthExecutionError as e:
        return ReplayResult(record.scenario.id, error=str(e))
    drift: List[str] = []
    for index, (stored, replayed) in enumerate(zip(record.truth_states, fresh.truth_states)):
        if serialize_snapshot(stored) == serialize_snapshot(replayed):
            continue
        try:
            changed = diff_snapshots(stored, replayed).changed_paths
        except CockpitError:
            changed = frozenset({"<device set>"})
        drift.extend(f"state_{index:03d}:{path}" for path in sorted(changed) or ["<label>"])
    return ReplayResult(record.scenario.id, tuple(drift))

