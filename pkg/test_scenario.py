"""Unit tests for scenario parsing, truth execution, validation and record persistence."""

from pathlib import Path

import pytest

from src.cockpit_sim.errors import NoOpTurnError, ScenarioParseError, TruthExecutionError
from src.cockpit_sim.registry import default_registry
from src.cockpit_sim.scenario import (
    CATEGORIES,
    PresetInit,
    Scenario,
    derive_category,
    execute_truth,
    expand_paths,
    load_record,
    load_scenario,
    parse_scenario,
    render_scenario,
    replay_record,
    save_record,
    serialize_record,
    validate_scenario,
)
from src.cockpit_sim.world import World

SEEDS = Path(__file__).parent / "seeds"

CLIMATE_DOOR = """
<scenario id="climate_door" domain="car_control" category="S-M">
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
"""


@pytest.fixture
def registry():
    return default_registry()


def _seeds():
    return expand_paths([str(SEEDS)])


def test_seed_corpus_covers_grid(registry):
    scenarios = [load_scenario(path, registry) for path in _seeds()]
    assert len(scenarios) >= 12
    assert {s.category for s in scenarios} == set(CATEGORIES)
    assert {"car_control", "multimedia", "touch_control", "light"} <= {s.domain for s in scenarios}
    assert len({s.id for s in scenarios}) == len(scenarios)


@pytest.mark.parametrize("path", _seeds(), ids=lambda p: p.stem)
def test_seed_validates(path, registry):
    scenario = load_scenario(path, registry)
    report = validate_scenario(scenario, World(registry))
    assert report.ok, report.diagnostics
    assert report.semantic_alignment == "requires human review"


@pytest.mark.parametrize("path", _seeds(), ids=lambda p: p.stem)
def test_truth_execution_is_deterministic(path, registry):
    scenario = load_scenario(path, registry)
    first = execute_truth(scenario, World(registry))
    second = execute_truth(scenario, World(registry))
    assert serialize_record(first) == serialize_record(second)
    assert len(first.truth_states) == len(scenario.turns) + 1
    assert [s.timestamp_label for s in first.truth_states][:2] == ["turn_0", "turn_1"]


def test_parse_example(registry):
    scenario = parse_scenario(CLIMATE_DOOR, registry)
    assert scenario.id == "climate_door"
    assert scenario.inits[0] == PresetInit("door", "open_unlocked")
    assert scenario.inits[1].api_name == "airconditioner_temperature_set"
    assert len(scenario.turns) == 1
    assert [c.api_name for c in scenario.turns[0].truth_calls] == [
        "airconditioner_switch",
        "airconditioner_temperature_set",
        "door_status_set",
    ]
    assert dict(scenario.turns[0].truth_calls[0].args) == {"on": True}


def test_render_parses_back(registry):
    scenario = load_scenario(SEEDS / "call_volume_up.xml", registry)
    assert parse_scenario(render_scenario(scenario), registry) == scenario
    assert scenario.turns[0].trend_scored == {"environment.volume"}


def test_render_quotes_attribute_values(registry):
    base = load_scenario(SEEDS / "call_volume_up.xml", registry)
    scenario = Scenario('say "hi" & <go>', base.turns, base.inits, "car's control", base.category)
    text = render_scenario(scenario)
    assert 'id="say &quot;hi&quot; &amp; &lt;go&gt;"' in text
    assert parse_scenario(text, registry) == scenario


def test_non_utf8_file_is_a_parse_error(tmp_path, registry):
    path = tmp_path / "binary.xml"
    path.write_bytes(b"<scenario>\xff</scenario>")
    with pytest.raises(ScenarioParseError, match="not valid UTF-8"):
        load_scenario(path, registry)


def test_truth_states_of_example(registry):
    record = execute_truth(parse_scenario(CLIMATE_DOOR, registry), World(registry))
    initial, final = record.truth_states
    assert initial.get("airConditioner.temperature") == 24.0
    assert initial.get("door.status") == "open"
    assert final.get("environment.temperature") == 20.0
    assert final.get("airConditioner.is_on") is True
    assert final.get("door.status") == "closed"
    assert record.relevant_devices(registry) == ["airConditioner", "door"]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("<scenario><query>hi</query></scenario>", "has no <api_call>"),
        ("<scenario><api_call>door_state_view()</api_call></scenario>", "without a preceding <query>"),
        ("<scenario><query>hi</query><bogus/></scenario>", "unknown tag"),
        ('<scenario category="X-Y"><query>a</query><api_call>door_state_view()</api_call></scenario>', "category"),
        ("<scenario><trend>environment.volume</trend></scenario>", "<trend> must follow"),
        ("<scenario><query>a</query><api_call>door_lock_switch(switch=maybe)</api_call></scenario>", "literal"),
        ("<scenario><query>a</query><api_call>door_lock_switch(switch=true)</api_call>", "unclosed"),
        ("<scenario><query>a</query><api_call>toaster_power_switch()</api_call></scenario>", "unknown API"),
        ("<scenario><inits>door.ajar</inits><query>a</query><api_call>door_state_view()</api_call></scenario>", "no init preset"),
        ("", "missing <scenario>"),
    ],
)
def test_malformed_scenarios(text, fragment, registry):
    with pytest.raises(ScenarioParseError, match=fragment):
        parse_scenario(text, registry)


def test_derive_category(registry):
    text = "<scenario><query>a</query><api_call>door_lock_switch(switch=true)</api_call>" \
           "<query>b</query><api_call>door_lock_switch(switch=false)\ndoor_status_set(status=\"open\")</api_call></scenario>"
    scenario = parse_scenario(text, registry)
    assert scenario.category == "M-M"
    assert derive_category(scenario.turns[:1]) == "S-S"


def test_no_op_turn_is_rejected(registry):
    text = '<scenario id="noop"><query>Close the door.</query><api_call>door_status_set(status="closed")</api_call></scenario>'
    scenario = parse_scenario(text, registry)
    with pytest.raises(NoOpTurnError) as info:
        execute_truth(scenario, World(registry))
    assert info.value.turn_index == 0
    report = validate_scenario(scenario, World(registry))
    assert report.executable and not report.state_changing and not report.ok


def test_failing_truth_call_carries_turn(registry):
    text = (
        '<scenario id="bad"><query>Call.</query><api_call>conversation_phone_call(contact="Alice")</api_call>'
        '<query>Call again.</query><api_call>conversation_phone_call(contact="Zed")</api_call></scenario>'
    )
    with pytest.raises(TruthExecutionError) as info:
        execute_truth(parse_scenario(text, registry), World(registry))
    assert info.value.turn_index == 1
    assert info.value.result.message == "Contact not found"


def test_validation_reports_unresolved_names(registry):
    scenario = parse_scenario("<scenario><query>a</query><api_call>toaster_power_switch()</api_call></scenario>")
    report = validate_scenario(scenario, World(registry))
    assert not report.resolvable and not report.executable
    assert any("toaster_power_switch" in d for d in report.diagnostics)
    assert report.to_dict()["semantic_alignment"] == "requires human review"


def test_load_uses_file_stem_without_id(tmp_path, registry):
    path = tmp_path / "lock_up.xml"
    path.write_text("<scenario><query>Lock.</query><api_call>door_lock_switch(switch=true)</api_call></scenario>")
    assert load_scenario(path, registry).id == "lock_up"
    assert expand_paths([str(tmp_path / "*.xml")]) == [path]


def test_save_load_replay_without_drift(tmp_path, registry):
    for path in _seeds():
        record = execute_truth(load_scenario(path, registry), World(registry))
        directory = save_record(record, tmp_path / record.scenario.id)
        loaded = load_record(directory, registry)
        assert serialize_record(loaded) == serialize_record(record)
        result = replay_record(loaded, World(registry))
        assert result.ok, result.drift


def test_replay_detects_drift(tmp_path, registry):
    record = execute_truth(load_scenario(SEEDS / "fan_and_cooling.xml", registry), World(registry))
    directory = save_record(record, tmp_path / "fan")
    final = directory / "state_001.json"
    final.write_text(final.read_text().replace('"value": 5\n', '"value": 6\n'))
    result = replay_record(load_record(directory, registry), World(registry))
    assert not result.ok
    assert result.drift == ("state_001:airConditioner.fan_speed",)
