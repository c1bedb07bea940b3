"""Tests for agent sessions, the scripted agents, the chat endpoint client and run configuration."""

import json
from pathlib import Path

import httpx
import pytest
from pydantic import ValidationError

from src.cockpit_sim.calls import parse_call
from src.cockpit_sim.config import (
    EndpointSettings,
    Mode,
    RunConfig,
    RunManifest,
    SessionConfig,
    Strategy,
    apply_overrides,
    load_config,
    parse_strategy,
)
from src.cockpit_sim.endpoint import ChatEndpoint, ChatMessage, RateLimiter, Role
from src.cockpit_sim.errors import ActionParseError, ConfigError, EndpointError, ModeMismatchError
from src.cockpit_sim.executor import FCAction, SelectionAction, SFCAction, StatePatch, execute_fc, execute_sfc
from src.cockpit_sim.harness import (
    DONE_REPLY,
    EndpointAgent,
    NullAgent,
    OracleAgent,
    Stage,
    agent_factory,
    compose_feedback,
    extract_action,
    inject_distractors,
    manage_context,
    run_batch,
    run_session,
    system_prompt,
)
from src.cockpit_sim.registry import default_registry
from src.cockpit_sim.scenario import execute_truth, expand_paths, load_scenario
from src.cockpit_sim.world import World

SEEDS = Path(__file__).parent / "seeds"


@pytest.fixture(scope="module")
def registry():
    return default_registry()


@pytest.fixture(scope="module")
def records(registry):
    return [
        execute_truth(load_scenario(path, registry), World(registry))
        for path in expand_paths([str(SEEDS)])
    ]


def _record(records, scenario_id):
    return next(r for r in records if r.scenario.id == scenario_id)


# ---------------------------------------------------------------------------
# scripted agents


@pytest.mark.parametrize("mode", list(Mode), ids=lambda m: m.value)
def test_oracle_scores_perfectly(mode, records, registry):
    for record in records:
        result = run_session(record, OracleAgent(record, registry), SessionConfig(mode=mode), registry)
        report = result.report
        assert (report.f1_positive, report.f1_negative, report.accuracy) == (1.0, 1.0, 1.0), record.scenario.id
        assert report.failed_turns == 0
        assert all(outcome == "completed" for outcome in result.transcript.outcomes)


@pytest.mark.parametrize("mode", list(Mode), ids=lambda m: m.value)
def test_null_agent_floor(mode, records, registry):
    for record in records:
        report = run_session(record, NullAgent(), SessionConfig(mode=mode), registry).report
        assert (report.f1_positive, report.f1_negative, report.accuracy) == (0.0, 1.0, 0.0), record.scenario.id


def test_oracle_selection_and_patch(records, registry):
    oracle = OracleAgent(_record(records, "call_volume_up"), registry)
    assert oracle.selection(0) == ("conversation",)
    assert oracle.patch(0).assignments == {"environment.volume": 60}

    handover = OracleAgent(_record(records, "music_then_call"), registry)
    assert handover.patch(0).assignments["music.is_playing"] is False

    clock = OracleAgent(_record(records, "imperial_clock"), registry)
    assert clock.selection(0) == ("environment",)


@pytest.mark.parametrize("agent", ["oracle", "null"])
def test_distractors_do_not_change_scores(agent, records, registry):
    factory = agent_factory(agent, registry)
    reports = set()
    for k in (0, 2, 4, 6):
        config = SessionConfig(mode=Mode.SFC, distractor_count=k)
        _, report = run_batch(records, factory, config, registry=registry)
        reports.add(report.to_json())
    assert len(reports) == 1


def test_distractors_widen_visible_set(registry):
    relevant = ["door", "environment"]
    for k in (0, 2, 4, 6):
        view = inject_distractors(World(registry), k, relevant, seed="winter_morning")
        assert view.relevant == ("door",)
        assert len(view.visible) == 1 + k
        assert "door" not in view.distractors
    first = inject_distractors(World(registry), 4, relevant, seed="same")
    second = inject_distractors(World(registry), 4, relevant, seed="same")
    assert first == second


def test_distractor_count_is_checked(registry):
    world = World(registry)
    with pytest.raises(ConfigError):
        inject_distractors(world, 3, [])
    with pytest.raises(ConfigError):
        inject_distractors(world, 6, world.device_ids[:6])
    with pytest.raises(ValidationError):
        SessionConfig(distractor_count=5)


def test_sessions_are_deterministic(records, registry):
    record = _record(records, "winter_morning")
    config = SessionConfig(mode=Mode.HYBRID, distractor_count=4)
    first = run_session(record, OracleAgent(record, registry), config, registry)
    second = run_session(record, OracleAgent(record, registry), config, registry)
    assert first.transcript.render() == second.transcript.render()
    assert first.report.to_json() == second.report.to_json()


def test_batch_keeps_order_across_workers(records, registry):
    factory = agent_factory("oracle", registry)
    serial, serial_report = run_batch(records, factory, SessionConfig(), jobs=1, registry=registry)
    pooled, pooled_report = run_batch(records, factory, SessionConfig(), jobs=4, registry=registry)
    assert [r.transcript.scenario_id for r in pooled] == [r.transcript.scenario_id for r in serial]
    assert pooled_report.to_json() == serial_report.to_json()
    with pytest.raises(ConfigError):
        run_batch([], factory, SessionConfig(), registry=registry)


def test_agent_factory_rejects_bad_kinds(registry):
    with pytest.raises(ConfigError):
        agent_factory("endpoint", registry)
    with pytest.raises(ConfigError):
        agent_factory("psychic", registry)


# ---------------------------------------------------------------------------
# reflection and retries


@pytest.mark.parametrize("mode", [Mode.FC, Mode.SFC], ids=lambda m: m.value)
def test_reflection_adds_budgeted_exchanges(mode, records, registry):
    record = _record(records, "fan_and_cooling")
    tag = "dialogue" if mode == Mode.FC else "execution"
    plain = run_session(record, OracleAgent(record, registry), SessionConfig(mode=mode), registry)
    reflective = run_session(
        record, OracleAgent(record, registry),
        SessionConfig(mode=mode, strategy=Strategy.REACT_REFLECTION), registry,
    )
    assert reflective.transcript.exchanges(0, tag) - plain.transcript.exchanges(0, tag) == 3
    one_pass = run_session(
        record, OracleAgent(record, registry),
        SessionConfig(mode=mode, strategy=Strategy.REACT_REFLECTION, reflection_budget=1), registry,
    )
    assert one_pass.transcript.exchanges(0, tag) - plain.transcript.exchanges(0, tag) == 1
    assert reflective.report.accuracy == 1.0


class ScriptedAgent:
    """Sends canned replies, then defers to another agent."""

    name = "scripted"

    def __init__(self, replies, fallback=None):
        self.replies = list(replies)
        self.fallback = fallback or NullAgent()

    def respond(self, messages, context):
        if self.replies:
            return self.replies.pop(0)
        return self.fallback.respond(messages, context)


def test_unparseable_reply_is_retried(records, registry):
    record = _record(records, "fan_and_cooling")
    agent = ScriptedAgent(["Sure, turning it on now."], OracleAgent(record, registry))
    result = run_session(record, agent, SessionConfig(), registry)
    assert result.report.accuracy == 1.0
    assert "could not be used" in result.transcript.render()


def test_turn_fails_after_retry_budget(records, registry):
    record = _record(records, "fan_and_cooling")
    agent = ScriptedAgent(["no idea"] * 10)
    result = run_session(record, agent, SessionConfig(action_retries=2), registry)
    assert result.transcript.exchanges(0, "dialogue") == 3
    assert result.transcript.outcomes[0].startswith("failed: unparseable action")
    assert result.report.failed_turns == 1
    assert result.report.accuracy == 0.0


def test_wrong_action_kind_counts_as_a_retry(records, registry):
    record = _record(records, "fan_and_cooling")
    agent = ScriptedAgent(['```action\nsfc: {"airConditioner.is_on": true}\n```'], OracleAgent(record, registry))
    result = run_session(record, agent, SessionConfig(mode=Mode.FC), registry)
    assert result.report.accuracy == 1.0
    assert result.transcript.exchanges(0, "dialogue") == 3


# ---------------------------------------------------------------------------
# prompts, actions, feedback and context


def test_system_prompt_strategies():
    plain = system_prompt("fc_evaluation", Strategy.REACT)
    bare = system_prompt("fc_evaluation", Strategy.REACT_NO_EXAMPLES)
    planned = system_prompt("fc_evaluation", Strategy.REACT_PLAN)
    assert "[examples]" not in plain and "[/examples]" not in plain
    assert "[examples]" not in bare
    assert len(bare) < len(plain)
    assert planned.startswith(plain.rstrip("\n"))
    assert "write a short plan" in planned
    selection = system_prompt("sfc_get_module", Strategy.REACT, state='{"door": {}}')
    assert '{"door": {}}' in selection and "$state" not in selection


def test_extract_action():
    reply = "I'll lock it.\n```action\nfc: [door_lock_switch(switch=true)]\n```\nDone soon."
    action = extract_action(reply, Mode.FC)
    assert isinstance(action, FCAction)
    assert extract_action('```action\nselect: ["door"]\n```', Mode.SFC) == SelectionAction(("door",))
    assert isinstance(extract_action('```action\nsfc: {"door.is_locked": true}\n```', Mode.SFC), SFCAction)
    assert extract_action(DONE_REPLY, Mode.HYBRID, Stage.FC).__class__.__name__ == "DoneAction"

    with pytest.raises(ActionParseError):
        extract_action("fc: [door_lock_switch(switch=true)]", Mode.FC)
    with pytest.raises(ModeMismatchError):
        extract_action('```action\nselect: ["door"]\n```', Mode.FC)
    with pytest.raises(ModeMismatchError):
        extract_action('```action\nselect: ["door"]\n```', Mode.SFC, Stage.SFC)
    with pytest.raises(ModeMismatchError):
        extract_action('```action\nsfc: {"door.is_locked": true}\n```', Mode.HYBRID)


def test_compose_feedback(registry):
    world = World(registry)
    fc = execute_fc(world, [parse_call("door_lock_switch(switch=true)"), parse_call("door_state_view()")])
    message = compose_feedback(fc, Mode.FC)
    assert message.role == Role.USER
    assert message.content.startswith("Execution results:")
    assert "door_lock_switch -> ok" in message.content
    assert "Logs:" in message.content
    assert "Current device states:" not in message.content

    sfc = execute_sfc(world, StatePatch({"door.status": "open"}), visible=["door"])
    content = compose_feedback(sfc, Mode.SFC).content
    assert "door.status -> ok" in content
    assert "Current device states:\n```json\n" in content


def test_manage_context_keeps_latest_state():
    history = [
        ChatMessage(Role.SYSTEM, "rules"),
        ChatMessage(Role.USER, 'States:\n```json\n{"a": 1}\n```\nRequest: one'),
        ChatMessage(Role.ASSISTANT, "ok"),
        ChatMessage(Role.USER, 'Results\n```json\n{"a": 2}\n```'),
    ]
    query = ChatMessage(Role.USER, 'States:\n```json\n{"a": 3}\n```\nRequest: two')
    trimmed = manage_context(history, query)
    assert len(trimmed) == 5
    assert trimmed[0] == history[0] and trimmed[2] == history[2]
    assert '{"a": 1}' not in trimmed[1].content and "Request: one" in trimmed[1].content
    assert "earlier device states omitted" in trimmed[3].content
    assert trimmed[4] == query

    single = history[:2]
    assert manage_context(single) == single


def test_manage_context_leaves_assistant_replies_alone():
    reply = ChatMessage(Role.ASSISTANT, 'Planned patch:\n```json\n{"door.is_locked": true}\n```')
    history = [
        ChatMessage(Role.USER, 'States:\n```json\n{"a": 1}\n```\nRequest: one'),
        reply,
        ChatMessage(Role.USER, 'Results\n```json\n{"a": 2}\n```'),
    ]
    trimmed = manage_context(history)
    assert trimmed[1] == reply
    assert '{"a": 1}' not in trimmed[0].content
    assert '{"a": 2}' in trimmed[2].content


# ---------------------------------------------------------------------------
# chat endpoint


def _settings(**overrides):
    return EndpointSettings(url="https://llm.test/v1/", model="cockpit-test", **overrides)


def _reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_endpoint_sends_chat_request(monkeypatch):
    monkeypatch.setenv("COCKPIT_API_KEY", "secret")
    seen = []

    def handler(request):
        seen.append(request)
        return _reply(DONE_REPLY)

    endpoint = ChatEndpoint(_settings(), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    assert endpoint.complete([ChatMessage(Role.USER, "hi")], temperature=0.0) == DONE_REPLY
    request = seen[0]
    assert request.url.path == "/v1/chat/completions"
    assert request.headers["Authorization"] == "Bearer secret"
    body = json.loads(request.content)
    assert body == {"model": "cockpit-test", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0}


@pytest.mark.parametrize("status", [500, 429])
def test_endpoint_retries_with_backoff(status, monkeypatch):
    monkeypatch.delenv("COCKPIT_API_KEY", raising=False)
    responses = [httpx.Response(status), httpx.Response(status), _reply("fine")]
    sleeps = []
    seen = []

    def handler(request):
        seen.append(request)
        return responses.pop(0)

    endpoint = ChatEndpoint(_settings(), transport=httpx.MockTransport(handler), sleep=sleeps.append)
    assert endpoint.complete([ChatMessage(Role.USER, "hi")]) == "fine"
    assert sleeps == [1, 2]
    assert "Authorization" not in seen[0].headers


def test_endpoint_gives_up_after_retry_budget():
    sleeps = []
    endpoint = ChatEndpoint(
        _settings(max_retries=3),
        transport=httpx.MockTransport(lambda request: httpx.Response(503)),
        sleep=sleeps.append,
    )
    with pytest.raises(EndpointError) as info:
        endpoint.complete([ChatMessage(Role.USER, "hi")])
    assert info.value.status_code == 503
    assert sleeps == [1, 2, 4]


def test_endpoint_client_errors_are_not_retried():
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(400, json={"error": {"message": "bad model"}})

    endpoint = ChatEndpoint(_settings(), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(EndpointError, match="bad model"):
        endpoint.complete([ChatMessage(Role.USER, "hi")])
    assert len(calls) == 1


def test_endpoint_network_errors_and_bad_bodies():
    def unreachable(request):
        raise httpx.ConnectError("connection refused", request=request)

    endpoint = ChatEndpoint(_settings(max_retries=1), transport=httpx.MockTransport(unreachable), sleep=lambda s: None)
    with pytest.raises(EndpointError) as info:
        endpoint.complete([ChatMessage(Role.USER, "hi")])
    assert info.value.status_code == 0

    empty = ChatEndpoint(
        _settings(), transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"choices": []})),
        sleep=lambda s: None,
    )
    with pytest.raises(EndpointError, match="no choices"):
        empty.complete([ChatMessage(Role.USER, "hi")])


def test_endpoint_agent_in_a_session(records, registry):
    record = _record(records, "fan_and_cooling")
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return _reply(DONE_REPLY)

    endpoint = ChatEndpoint(_settings(), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    result = run_session(record, EndpointAgent(endpoint, temperature=0.2), SessionConfig(), registry)
    assert result.report.accuracy == 0.0
    assert bodies[0]["messages"][0]["role"] == "system"
    assert bodies[0]["temperature"] == 0.2

    failing = ChatEndpoint(
        _settings(), transport=httpx.MockTransport(lambda r: httpx.Response(401)), sleep=lambda s: None
    )
    broken = run_session(record, EndpointAgent(failing), SessionConfig(), registry)
    assert broken.report.failed_turns == 1
    assert broken.transcript.outcomes[0].startswith("failed: endpoint error")


def test_rate_limiter_waits_for_a_slot():
    now = [0.0]

    def sleep(seconds):
        now[0] += seconds

    limiter = RateLimiter(max_requests=2, time_window=10.0, clock=lambda: now[0], sleep=sleep)
    assert limiter.wait_if_needed() == 0.0
    assert limiter.wait_if_needed() == 0.0
    assert limiter.wait_if_needed() == 10.0
    assert now[0] == 10.0


def test_empty_chat_messages_are_rejected():
    with pytest.raises(ValueError):
        ChatMessage(Role.ASSISTANT, "  ")
    assert ChatMessage("system", "").role == Role.SYSTEM


# ---------------------------------------------------------------------------
# configuration


def test_session_config_defaults():
    config = SessionConfig()
    assert config.reflection_budget == 0
    assert config.max_turns_per_query == 5
    assert config.action_retries == 2
    assert SessionConfig(strategy=Strategy.REACT_REFLECTION).reflection_budget == 3
    assert parse_strategy("reflect") == Strategy.REACT_REFLECTION
    assert parse_strategy("react_plan") == Strategy.REACT_PLAN
    with pytest.raises(ConfigError):
        parse_strategy("chain")


def test_load_config(tmp_path, monkeypatch):
    monkeypatch.delenv("COCKPIT_ENDPOINT_URL", raising=False)
    monkeypatch.delenv("COCKPIT_MODEL", raising=False)
    assert load_config().endpoint is None

    monkeypatch.setenv("COCKPIT_ENDPOINT_URL", "https://llm.test/v1")
    monkeypatch.setenv("COCKPIT_MODEL", "cockpit-test")
    assert load_config().endpoint.model == "cockpit-test"

    path = tmp_path / "run.json"
    path.write_text(json.dumps({"session": {"mode": "sfc", "strategy": "react_reflection"}, "jobs": 2}))
    config = load_config(path)
    assert config.session.mode == Mode.SFC
    assert config.session.reflection_budget == 3
    assert config.jobs == 2
    assert config.endpoint.url == "https://llm.test/v1"

    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)
    path.write_text(json.dumps({"sessions": {}}))
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_cli_overrides_win(tmp_path):
    config = RunConfig(session=SessionConfig(strategy=Strategy.REACT_REFLECTION), jobs=3)
    manifest = RunManifest(
        scenarios=["seeds"], out_dir=tmp_path, mode=Mode.HYBRID, strategy=Strategy.REACT, distractors=2
    )
    merged = apply_overrides(config, manifest)
    assert merged.session.mode == Mode.HYBRID
    assert merged.session.reflection_budget == 0
    assert merged.session.distractor_count == 2
    assert merged.jobs == 3

    with pytest.raises(ConfigError):
        apply_overrides(config, RunManifest(scenarios=["seeds"], out_dir=tmp_path, distractors=3))
    with pytest.raises(ConfigError):
        apply_overrides(config, RunManifest(scenarios=["seeds"], out_dir=tmp_path, jobs=0))
    with pytest.raises(ValidationError):
        RunManifest(scenarios=[], out_dir=tmp_path)
