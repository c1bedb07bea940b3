"""Agent sessions: prompting, action extraction, feedback, context trimming and the scripted agents.

A session replays one scenario against an agent. Per query, the agent works through one or two
exchanges depending on the mode:

- FC: one running dialogue; the agent discovers devices through ``search_module`` /
  ``search_api`` and acts with ``fc:`` actions.
- SFC: a device-selection exchange (fresh context, compact snapshot of the visible devices),
  then the patch dialogue, which sees only the selected devices.
- HYBRID: the same selection exchange, then an FC dialogue restricted to the selected devices.
"""

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Callable, Iterable, List, Optional, Protocol, Sequence, Tuple

from .calls import ApiResult
from .config import Mode, SessionConfig, Strategy
from .endpoint import ChatEndpoint, ChatMessage, Role
from .errors import ActionParseError, CockpitError, ConfigError, EndpointError, ModeMismatchError
from .executor import (
    Action,
    DoneAction,
    ExecutionFeedback,
    FCAction,
    PatchOutcome,
    SelectionAction,
    SFCAction,
    StatePatch,
    execute_fc,
    execute_hybrid,
    execute_sfc,
    project_snapshot,
    parse_action,
    render_action,
)
from .metrics import MetricReport, TurnReport, aggregate, evaluate_trace
from .registry import DEFAULT_PRESET, DeviceRegistry, default_registry
from .scenario import ScenarioRecord, initialize_world
from .state import COMPACT, ENVIRONMENT_ID, FULL, diff_snapshots, serialize_snapshot
from .world import World

logger = logging.getLogger(__name__)

_ACTION_BLOCK = re.compile(r"```action[ \t]*\r?\n(.*?)```", re.DOTALL)
_STATE_BLOCK = re.compile(r"```json\r?\n.*?```", re.DOTALL)
_STATE_PLACEHOLDER = "(earlier device states omitted; the latest states are below)"
_EXAMPLES = re.compile(r"\[examples\]\n.*?\[/examples\]\n?", re.DOTALL)

DONE_REPLY = "```action\ndone\n```"


class Stage(str, Enum):
    SELECT = "select"
    FC = "fc"
    SFC = "sfc"


_ALLOWED = {
    Stage.SELECT: (SelectionAction,),
    Stage.FC: (FCAction, DoneAction),
    Stage.SFC: (SFCAction, DoneAction),
}
_MODE_STAGES = {
    Mode.FC: (Stage.FC,),
    Mode.SFC: (Stage.SELECT, Stage.SFC),
    Mode.HYBRID: (Stage.SELECT, Stage.FC),
}


# ---------------------------------------------------------------------------
# prompts


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return resources.files(__package__).joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def system_prompt(name: str, strategy: Strategy, **values: str) -> str:
    """Render a prompt template for a strategy: examples stripped or kept, plan preamble added."""
    text = load_prompt(name)
    if strategy == Strategy.REACT_NO_EXAMPLES:
        text = _EXAMPLES.sub("", text)
    else:
        text = text.replace("[examples]\n", "").replace("[/examples]\n", "")
    if values:
        text = Template(text).substitute(values)
    if strategy == Strategy.REACT_PLAN:
        text = text.rstrip("\n") + "\n\n" + load_prompt("plan")
    return text


# ---------------------------------------------------------------------------
# actions and feedback


def extract_action(reply: str, mode: Mode, stage: Optional[Stage] = None) -> Action:
    """
    Parse the first ``action`` block of a reply.

    Raises:
        ActionParseError: If there is no action block or it does not parse
        ModeMismatchError: If the action kind is not allowed in this mode (or stage)
    """
    match = _ACTION_BLOCK.search(reply)
    if match is None:
        raise ActionParseError("no ```action block found in the reply")
    action = parse_action(match.group(1))
    stages = (stage,) if stage is not None else _MODE_STAGES[mode]
    allowed = tuple(kind for s in stages for kind in _ALLOWED[s])
    if not isinstance(action, allowed):
        expected = ", ".join(sorted({k.__name__ for k in allowed}))
        raise ModeMismatchError(
            f"{type(action).__name__} is not allowed here (mode {mode.value}; expected {expected})"
        )
    return action


def _describe_result(result: object) -> str:
    if isinstance(result, PatchOutcome):
        status = "ok" if result.success else "error"
        return f"{result.path} -> {status}: {result.message}"
    assert isinstance(result, ApiResult)
    status = "ok" if result.success else "error"
    line = f"{result.api_name} -> {status}: {result.message}"
    if result.payload is not None:
        line += "\n" + json.dumps(result.payload, indent=2, sort_keys=True, ensure_ascii=False)
    return line


def compose_feedback(feedback: ExecutionFeedback, mode: Mode) -> ChatMessage:
    """Results and logs of one action; in SFC mode the visible device states follow."""
    lines = ["Execution results:"]
    lines.extend(_describe_result(result) for result in feedback.results)
    if feedback.logs:
        lines.append("")
        lines.append("Logs:")
        lines.extend(feedback.logs)
    if mode == Mode.SFC and feedback.post_state is not None:
        lines.append("")
        lines.append("Current device states:")
        lines.append("```json\n" + serialize_snapshot(feedback.post_state, FULL) + "```")
    return ChatMessage(Role.USER, "\n".join(lines))


def manage_context(
    history: Sequence[ChatMessage], new_query: Optional[ChatMessage] = None
) -> List[ChatMessage]:
    """
    Drop every serialized state block except the most recent one. Prose is kept.

    Only user-role messages (queries and execution feedback) carry state blocks; assistant
    replies are never rewritten. ``new_query`` is appended before trimming, so state attached
    to it counts as the latest.
    """
    messages = list(history) + ([new_query] if new_query is not None else [])
    total = sum(len(_STATE_BLOCK.findall(m.content)) for m in messages if m.role == Role.USER)
    if total <= 1:
        return messages
    seen = 0

    def trim(match: "re.Match[str]") -> str:
        nonlocal seen
        seen += 1
        return match.group(0) if seen == total else _STATE_PLACEHOLDER

    return [
        ChatMessage(m.role, _STATE_BLOCK.sub(trim, m.content))
        if m.role == Role.USER and _STATE_BLOCK.search(m.content)
        else m
        for m in messages
    ]


# ---------------------------------------------------------------------------
# distractors


@dataclass(frozen=True)
class AgentView:
    """Devices the agent is shown: the scenario's own plus any distractors."""

    relevant: Tuple[str, ...]
    distractors: Tuple[str, ...] = ()

    @property
    def visible(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.relevant) | set(self.distractors)))


def inject_distractors(
    world: World, k: int, relevant: Iterable[str], seed: str = ""
) -> AgentView:
    """
    Add ``k`` devices unrelated to the scenario to what the agent sees, reset to their
    default presets.

    Raises:
        ConfigError: If ``k`` is not 0, 2, 4 or 6, or too few unrelated devices exist
    """
    relevant = tuple(sorted(set(relevant) - {ENVIRONMENT_ID}))
    if k not in (0, 2, 4, 6):
        raise ConfigError(f"distractor count must be 0, 2, 4 or 6, got {k}")
    spare = [d for d in world.device_ids if d not in relevant]
    if k > len(spare):
        raise ConfigError(f"{k} distractors requested but only {len(spare)} unrelated devices exist")
    chosen = tuple(sorted(random.Random(seed).sample(spare, k)))
    for device_id in chosen:
        world.registry.init_device(world, device_id, DEFAULT_PRESET)
    return AgentView(relevant, chosen)


# ---------------------------------------------------------------------------
# agents


@dataclass(frozen=True)
class AgentContext:
    scenario_id: str
    turn_index: int
    stage: Stage
    # actions already executed in this stage for the current query
    step: int
    reflecting: bool = False


class Agent(Protocol):
    name: str

    def respond(self, messages: Sequence[ChatMessage], context: AgentContext) -> str: ...


class EndpointAgent:
    name = "endpoint"

    def __init__(self, endpoint: ChatEndpoint, temperature: float = 0.7):
        self.endpoint = endpoint
        self.temperature = temperature

    def respond(self, messages: Sequence[ChatMessage], context: AgentContext) -> str:
        return self.endpoint.complete(messages, temperature=self.temperature)


class NullAgent:
    """Never changes anything. Selection stages still need a device list, so it picks the environment."""

    name = "null"

    def respond(self, messages: Sequence[ChatMessage], context: AgentContext) -> str:
        if context.stage == Stage.SELECT:
            return f'```action\nselect: ["{ENVIRONMENT_ID}"]\n```'
        return DONE_REPLY


def _action_reply(action: Action) -> str:
    return f"```action\n{render_action(action)}\n```"


class OracleAgent:
    """
    Replays a record's ground truth.

    FC stages replay the truth calls; SFC stages send the truth diff as a patch; selection
    stages pick the devices the truth calls address or the truth diff touches.
    """

    name = "oracle"

    def __init__(self, record: ScenarioRecord, registry: DeviceRegistry):
        self.record = record
        self.registry = registry

    def selection(self, turn_index: int) -> Tuple[str, ...]:
        turn = self.record.scenario.turns[turn_index]
        devices = set()
        for call in turn.truth_calls:
            owner = self.registry.device_of(call.api_name)
            if owner is not None:
                devices.add(owner)
        before, after = self.record.truth_states[turn_index], self.record.truth_states[turn_index + 1]
        devices |= diff_snapshots(before, after).touched_devices()
        if len(devices) > 1:
            devices.discard(ENVIRONMENT_ID)
        return tuple(sorted(devices))

    def patch(self, turn_index: int) -> StatePatch:
        before, after = self.record.truth_states[turn_index], self.record.truth_states[turn_index + 1]
        return StatePatch.from_diff(diff_snapshots(before, after))

    def respond(self, messages: Sequence[ChatMessage], context: AgentContext) -> str:
        if context.stage == Stage.SELECT:
            return _action_reply(SelectionAction(self.selection(context.turn_index)))
        if context.step or context.reflecting:
            return DONE_REPLY
        if context.stage == Stage.SFC:
            return _action_reply(SFCAction(self.patch(context.turn_index)))
        return _action_reply(FCAction(self.record.scenario.turns[context.turn_index].truth_calls))


# ---------------------------------------------------------------------------
# sessions


@dataclass
class AgentTranscript:
    scenario_id: str
    mode: Mode
    strategy: Strategy
    # (exchange tag, message) in the order they were sent or received
    entries: List[Tuple[str, ChatMessage]] = field(default_factory=list)
    actions: List[Tuple[int, str]] = field(default_factory=list)
    outcomes: List[str] = field(default_factory=list)
    model_states: list = field(default_factory=list)

    def log(self, tag: str, message: ChatMessage) -> None:
        self.entries.append((tag, message))

    def exchanges(self, turn_index: int, tag: str) -> int:
        """Assistant replies recorded under one turn's exchange tag."""
        prefix = f"turn {turn_index} / {tag}"
        return sum(1 for t, m in self.entries if t == prefix and m.role == Role.ASSISTANT)

    def render(self) -> str:
        lines = [f"# scenario {self.scenario_id} | mode {self.mode.value} | strategy {self.strategy.value}"]
        current = None
        for tag, message in self.entries:
            if tag != current:
                lines.append("")
                lines.append(f"=== {tag} ===")
                current = tag
            lines.append(f"[{message.role.value}]")
            lines.append(message.content.rstrip("\n"))
        lines.append("")
        lines.append("=== outcomes ===")
        lines.extend(f"turn {i}: {outcome}" for i, outcome in enumerate(self.outcomes))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SessionResult:
    transcript: AgentTranscript
    turns: Tuple[TurnReport, ...]
    report: MetricReport


class _TurnFailed(Exception):
    pass


class Session:
    """One scenario run against one agent. Owns its world exclusively."""

    def __init__(
        self,
        record: ScenarioRecord,
        agent: Agent,
        config: SessionConfig,
        registry: DeviceRegistry,
    ):
        self.record = record
        self.agent = agent
        self.config = config
        self.registry = registry
        self.scenario = record.scenario
        self.world = World(registry)
        self.transcript = AgentTranscript(self.scenario.id, config.mode, config.strategy)
        self.history: List[ChatMessage] = []
        self.view = AgentView(())

    # ------------------------------------------------------------------ exchange helpers

    def _ask(
        self, messages: List[ChatMessage], tag: str, turn_index: int, stage: Stage, step: int,
        reflecting: bool = False,
    ) -> Action:
        """Get one parseable action, re-asking with the parse error up to the retry budget."""
        context = AgentContext(self.scenario.id, turn_index, stage, step, reflecting)
        for attempt in range(self.config.action_retries + 1):
            try:
                reply = self.agent.respond(messages, context)
            except EndpointError as e:
                raise _TurnFailed(f"endpoint error: {e}") from e
            if not reply.strip():
                reply = "(empty reply)"
            answer = ChatMessage(Role.ASSISTANT, reply)
            messages.append(answer)
            self.transcript.log(tag, answer)
            try:
                action = extract_action(reply, self.config.mode, stage)
            except ActionParseError as e:
                if attempt == self.config.action_retries:
                    raise _TurnFailed(f"unparseable action: {e}") from e
                retry = ChatMessage(Role.USER, f"Your reply could not be used: {e}\nReply with one ```action block.")
                messages.append(retry)
                self.transcript.log(tag, retry)
                continue
            self.transcript.actions.append((turn_index, render_action(action)))
            return action
        raise _TurnFailed("no action")  # pragma: no cover

    def _send(self, messages: List[ChatMessage], tag: str, message: ChatMessage) -> None:
        messages.append(message)
        self.transcript.log(tag, message)

    # ------------------------------------------------------------------ stages

    def _select(self, turn_index: int, query: str) -> Tuple[str, ...]:
        tag = f"turn {turn_index} / selection"
        state = serialize_snapshot(self.world.snapshot(device_ids=self.view.visible), COMPACT)
        messages: List[ChatMessage] = []
        self._send(messages, tag, ChatMessage(
            Role.SYSTEM, system_prompt("sfc_get_module", self.config.strategy, state=state.rstrip("\n"))
        ))
        self._send(messages, tag, ChatMessage(Role.USER, query))
        for attempt in range(self.config.action_retries + 1):
            action = self._ask(messages, tag, turn_index, Stage.SELECT, 0)
            assert isinstance(action, SelectionAction)
            unknown = [
                d for d in action.device_ids
                if d != ENVIRONMENT_ID and not self.registry.has_device(d)
            ]
            if not unknown:
                return action.device_ids
            if attempt == self.config.action_retries:
                raise _TurnFailed(f"unknown devices selected: {unknown}")
            self._send(messages, tag, ChatMessage(Role.USER, f"Unknown device ids: {unknown}. Select again."))
        raise _TurnFailed("no selection")  # pragma: no cover

    def _execute(self, action: Action, selection: Tuple[str, ...]) -> ExecutionFeedback:
        mode = self.config.mode
        if isinstance(action, SFCAction):
            return execute_sfc(self.world, action.patch, visible=selection)
        assert isinstance(action, FCAction)
        if mode == Mode.HYBRID:
            return execute_hybrid(self.world, selection, action.calls)
        return execute_fc(self.world, action.calls)

    def _query_message(self, query: str, selection: Tuple[str, ...]) -> ChatMessage:
        mode = self.config.mode
        if mode == Mode.FC:
            return ChatMessage(Role.USER, query)
        state = project_snapshot(self.world, selection, FULL)
        if mode == Mode.SFC:
            return ChatMessage(Role.USER, f"Current device states:\n```json\n{state}```\n\nRequest: {query}")
        apis = [
            api.render()
            for device_id in selection
            if self.registry.has_device(device_id)
            for api in self.registry.search_api(device_id)
        ]
        listing = "\n".join(apis) if apis else "(no device APIs)"
        return ChatMessage(
            Role.USER,
            f"APIs of the selected devices:\n{listing}\n\nCurrent device states:\n```json\n{state}```\n\n"
            f"Request: {query}",
        )

    def _act(self, turn_index: int, tag: str, stage: Stage, selection: Tuple[str, ...], step: int,
             reflecting: bool = False) -> Tuple[bool, int]:
        """One agent action and its feedback. Returns (done, steps taken)."""
        action = self._ask(self.history, tag, turn_index, stage, step, reflecting)
        if isinstance(action, DoneAction):
            return True, step
        feedback = self._execute(action, selection)
        self._send(self.history, tag, compose_feedback(feedback, self.config.mode))
        return False, step + 1

    def _run_query(self, turn_index: int, query: str) -> str:
        mode = self.config.mode
        stage = Stage.SFC if mode == Mode.SFC else Stage.FC
        selection: Tuple[str, ...] = ()
        if mode != Mode.FC:
            selection = self._select(turn_index, query)

        tag = f"turn {turn_index} / {'execution' if mode != Mode.FC else 'dialogue'}"
        self.history = manage_context(self.history, self._query_message(query, selection))
        self.transcript.log(tag, self.history[-1])

        outcome = "max steps reached"
        step = 0
        for _ in range(self.config.max_turns_per_query):
            done, step = self._act(turn_index, tag, stage, selection, step)
            if done:
                outcome = "completed"
                break

        for _ in range(self.config.reflection_budget or 0):
            self._send(self.history, tag, ChatMessage(Role.USER, load_prompt("reflection").strip()))
            self._act(turn_index, tag, stage, selection, step, reflecting=True)
        return outcome

    # ------------------------------------------------------------------ driver

    def run(self) -> SessionResult:
        """
        Raises:
            TruthExecutionError: If the scenario's initialization fails
            ConfigError: If the distractor count cannot be honoured
        """
        initialize_world(self.scenario, self.world, self.registry)
        self.view = inject_distractors(
            self.world,
            self.config.distractor_count,
            self.record.relevant_devices(self.registry),
            seed=self.scenario.id,
        )
        if self.config.mode != Mode.SFC:
            self._send(self.history, "system", ChatMessage(
                Role.SYSTEM, system_prompt("fc_evaluation", self.config.strategy)
            ))
        else:
            self._send(self.history, "system", ChatMessage(
                Role.SYSTEM, system_prompt("sfc_evaluation", self.config.strategy)
            ))

        model_states = [self.world.snapshot("turn_0")]
        failed = []
        for index, turn in enumerate(self.scenario.turns):
            try:
                outcome = self._run_query(index, turn.query)
            except (_TurnFailed, CockpitError) as e:
                outcome = f"failed: {e}"
                failed.append(index)
                logger.warning("%s turn %d failed: %s", self.scenario.id, index, e)
            self.transcript.outcomes.append(outcome)
            model_states.append(self.world.snapshot(f"turn_{index + 1}"))
        self.transcript.model_states = model_states

        turns = evaluate_trace(
            self.record.truth_states,
            model_states,
            [turn.trend_scored for turn in self.scenario.turns],
            scenario_id=self.scenario.id,
            domain=self.scenario.domain,
            category=self.scenario.category,
            failed_turns=failed,
        )
        logger.info("session %s finished (%s, %d turns)", self.scenario.id, self.agent.name, len(turns))
        return SessionResult(self.transcript, tuple(turns), aggregate(turns))


def run_session(
    record: ScenarioRecord,
    agent: Agent,
    config: SessionConfig,
    registry: Optional[DeviceRegistry] = None,
) -> SessionResult:
    """Run one scenario against an agent and score it against the record's truth states."""
    return Session(record, agent, config, registry or default_registry()).run()


AgentFactory = Callable[[ScenarioRecord], Agent]


def run_batch(
    records: Sequence[ScenarioRecord],
    agent_factory: AgentFactory,
    config: SessionConfig,
    jobs: int = 1,
    registry: Optional[DeviceRegistry] = None,
) -> Tuple[List[SessionResult], MetricReport]:
    """
    Run many sessions on a bounded worker pool. Results keep the order of ``records``.

    Raises:
        ConfigError: If ``records`` is empty
    """
    if not records:
        raise ConfigError("no scenarios to run")
    registry = registry or default_registry()

    def one(record: ScenarioRecord) -> SessionResult:
        return run_session(record, agent_factory(record), config, registry)

    if jobs <= 1:
        results = [one(record) for record in records]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, records))
    report = aggregate(turn for result in results for turn in result.turns)
    return results, report


def agent_factory(
    kind: str, registry: DeviceRegistry, endpoint: Optional[ChatEndpoint] = None,
    temperature: float = 0.7,
) -> AgentFactory:
    """
    Raises:
        ConfigError: If the endpoint agent is requested without an endpoint
    """
    if kind == "oracle":
        return lambda record: OracleAgent(record, registry)
    if kind == "null":
        return lambda record: NullAgent()
    if kind == "endpoint":
        if endpoint is None:
            raise ConfigError("the endpoint agent needs an endpoint configuration (url and model)")
        return lambda record: EndpointAgent(endpoint, temperature)
    raise ConfigError(f"unknown agent {kind!r}")


def oracle_agent(record: ScenarioRecord, registry: Optional[DeviceRegistry] = None) -> OracleAgent:
    return OracleAgent(record, registry or default_registry())
