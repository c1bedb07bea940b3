"""Unit tests for snapshots: canonical serialization, parsing, diffing and trends."""

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.cockpit_sim.errors import DiffError, SnapshotSchemaError, SnapshotSyntaxError, TrendError
from src.cockpit_sim.registry import default_registry
from src.cockpit_sim.state import (
    COMPACT,
    ENVIRONMENT_ID,
    FULL,
    AttributeDescriptor,
    DeviceState,
    TrendDirection,
    TypeTag,
    WorldSnapshot,
    classify_trend,
    diff_snapshots,
    parse_snapshot,
    serialize_snapshot,
    split_path,
    values_equal,
)
from src.cockpit_sim.world import World


@pytest.fixture
def world():
    return World(default_registry())


@pytest.fixture
def schema():
    return default_registry().schema()


def test_serialization_is_canonical(world):
    """Equal worlds serialize to byte-identical text with sorted keys."""
    first = serialize_snapshot(world.snapshot("turn_0"))
    second = serialize_snapshot(World(default_registry()).snapshot("turn_0"))
    assert first == second
    assert first.endswith("\n")
    document = json.loads(first)
    assert list(document) == sorted(document)
    assert document["@label"] == "turn_0"


def test_full_leaf_carries_type_and_description(world):
    document = json.loads(serialize_snapshot(world.snapshot(), FULL))
    leaf = document["environment"]["volume"]
    assert set(leaf) == {"description", "type", "value"}
    assert leaf["type"] == "integer"
    assert leaf["value"] == 50


def test_compact_mode_integers_and_reals(world):
    text = serialize_snapshot(world.snapshot(), COMPACT)
    assert '"volume": 50\n' in text
    assert '"temperature": 22.0' in text


def test_dotted_attributes_render_nested(world):
    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    assert document["seat"]["driver"]["heating"] == 0
    assert document["window"]["front_left"]["openness"] == 0


def test_parse_accepts_both_renderings(world, schema):
    world.set("seat.driver.heating", 2)
    world.set("music.favorites", ("Imagine",))
    snapshot = world.snapshot("turn_1")
    for mode in (FULL, COMPACT):
        parsed = parse_snapshot(serialize_snapshot(snapshot, mode), schema)
        assert parsed.values() == snapshot.values()
        assert parsed.timestamp_label == "turn_1"
    assert parsed.get("music.favorites") == ("Imagine",)


def test_parse_syntax_error_reports_position(schema):
    with pytest.raises(SnapshotSyntaxError) as info:
        parse_snapshot('{"environment": {,}}', schema)
    assert info.value.line == 1
    assert info.value.column > 1


def test_parse_requires_environment(schema):
    with pytest.raises(SnapshotSchemaError):
        parse_snapshot("{}", schema)


def test_parse_rejects_unknown_device_and_attribute(world, schema):
    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    document["toaster"] = {}
    with pytest.raises(SnapshotSchemaError, match="unknown device"):
        parse_snapshot(json.dumps(document), schema)

    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    document["door"]["colour"] = "red"
    with pytest.raises(SnapshotSchemaError, match="unknown attribute"):
        parse_snapshot(json.dumps(document), schema)


def test_parse_rejects_type_and_range_violations(world, schema):
    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    document["door"]["is_locked"] = 1
    with pytest.raises(SnapshotSchemaError):
        parse_snapshot(json.dumps(document), schema)

    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    document["environment"]["volume"] = 101
    with pytest.raises(SnapshotSchemaError, match="maximum"):
        parse_snapshot(json.dumps(document), schema)


def test_parse_missing_attribute_and_fill_defaults(world, schema):
    document = json.loads(serialize_snapshot(world.snapshot(), COMPACT))
    del document["wiper"]["speed"]
    with pytest.raises(SnapshotSchemaError, match="attribute missing"):
        parse_snapshot(json.dumps(document), schema)
    parsed = parse_snapshot(json.dumps(document), schema, fill_defaults=True)
    assert parsed.get("wiper.speed") == "low"


def test_full_leaf_type_tag_must_match(world, schema):
    document = json.loads(serialize_snapshot(world.snapshot(), FULL))
    document["environment"]["volume"]["type"] = "real"
    with pytest.raises(SnapshotSchemaError, match="type tag"):
        parse_snapshot(json.dumps(document), schema)


def test_values_equal_keeps_booleans_apart():
    assert not values_equal(True, 1)
    assert not values_equal(0, False)
    assert values_equal(20, 20.0)
    assert values_equal(("a", "b"), ("a", "b"))
    assert not values_equal(("a",), ("a", "b"))
    assert values_equal(None, None)
    assert not values_equal(None, "none")


def test_classify_trend():
    assert classify_trend(10, 20) is TrendDirection.INCREASE
    assert classify_trend(20.5, 20) is TrendDirection.DECREASE
    assert classify_trend(3, 3.0) is TrendDirection.MAINTAIN
    with pytest.raises(TrendError):
        classify_trend(True, 2)
    with pytest.raises(TrendError):
        classify_trend("low", "high")


def test_split_path():
    assert split_path("seat.driver.heating") == ("seat", "driver.heating")
    for bad in ("seat", ".heating", "seat."):
        with pytest.raises(SnapshotSchemaError):
            split_path(bad)


def test_diff_reports_changes_and_trends(world):
    before = world.snapshot()
    world.set("environment.volume", 70)
    world.set("door.status", "open")
    diff = diff_snapshots(before, world.snapshot())
    assert diff.changed_paths == {"environment.volume", "door.status"}
    assert diff.trend_per_changed == {"environment.volume": TrendDirection.INCREASE}
    assert diff.touched_devices() == {"environment", "door"}
    assert diff.as_patch() == {"door.status": "open", "environment.volume": 70}
    assert "door.is_locked" in diff.unchanged
    assert not diff.changed_paths & diff.unchanged


def test_diff_rejects_different_device_sets(world):
    with pytest.raises(DiffError):
        diff_snapshots(world.snapshot(), world.snapshot(device_ids=["door"]))


def test_projection_keeps_environment(world):
    projected = world.snapshot().project(["door", "environment"])
    assert projected.device_ids == {"door"}
    assert projected.environment.value("volume") == 50
    with pytest.raises(DiffError):
        world.snapshot(device_ids=["door"]).project(["music"])


@settings(max_examples=100, deadline=None)
@given(
    volume=st.integers(min_value=0, max_value=100),
    brightness=st.integers(min_value=0, max_value=100),
    heating=st.integers(min_value=0, max_value=3),
)
def test_diff_matches_assignments(volume, brightness, heating):
    """A diff lists exactly the attributes whose value moved."""
    world = World(default_registry())
    before = world.snapshot()
    world.set("environment.volume", volume)
    world.set("ambientLight.brightness", brightness)
    world.set("seat.passenger.heating", heating)
    expected = {
        path
        for path, old, new in (
            ("environment.volume", 50, volume),
            ("ambientLight.brightness", 50, brightness),
            ("seat.passenger.heating", 0, heating),
        )
        if old != new
    }
    assert diff_snapshots(before, world.snapshot()).changed_paths == expected


# ---------------------------------------------------------------------------
# properties over random snapshots

SCHEMA = default_registry().schema()
DEVICE_IDS = sorted(set(SCHEMA) - {ENVIRONMENT_ID})
TEXT = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)


def _values_for(attr):
    """Values an attribute schema accepts."""
    if attr.allowed_values is not None:
        base = st.sampled_from(attr.allowed_values)
        if attr.type_tag is TypeTag.LIST:
            base = st.lists(base, max_size=3).map(tuple)
    elif attr.type_tag is TypeTag.BOOLEAN:
        base = st.booleans()
    elif attr.type_tag is TypeTag.INTEGER:
        base = st.integers(
            min_value=math.ceil(attr.minimum) if attr.minimum is not None else -10**6,
            max_value=math.floor(attr.maximum) if attr.maximum is not None else 10**6,
        )
    elif attr.type_tag is TypeTag.REAL:
        base = st.floats(
            min_value=attr.minimum if attr.minimum is not None else -1e9,
            max_value=attr.maximum if attr.maximum is not None else 1e9,
            allow_nan=False,
            allow_infinity=False,
        )
    elif attr.type_tag is TypeTag.STRING:
        base = TEXT
    else:
        base = st.lists(TEXT.filter(bool), max_size=3).map(tuple)
    return st.one_of(st.none(), base) if attr.nullable else base


def _block(device_id):
    declared = SCHEMA[device_id]
    return st.fixed_dictionaries({name: _values_for(attr) for name, attr in declared.items()}).map(
        lambda values: DeviceState(
            device_id,
            {
                name: AttributeDescriptor(name, value, declared[name].type_tag, declared[name].description)
                for name, value in values.items()
            },
        )
    )


@st.composite
def snapshots(draw, device_ids=None):
    ids = draw(st.sets(st.sampled_from(DEVICE_IDS))) if device_ids is None else device_ids
    return WorldSnapshot(
        environment=draw(_block(ENVIRONMENT_ID)),
        devices={device_id: draw(_block(device_id)) for device_id in sorted(ids)},
        timestamp_label=draw(st.sampled_from(["", "initial", "turn_1"])),
    )


@settings(max_examples=200, deadline=None)
@given(snapshot=snapshots(), mode=st.sampled_from([FULL, COMPACT]))
def test_serialize_then_parse_is_identity(snapshot, mode):
    text = serialize_snapshot(snapshot, mode)
    parsed = parse_snapshot(text, SCHEMA)
    assert parsed == snapshot
    assert serialize_snapshot(parsed, mode) == text


@st.composite
def snapshot_pairs(draw):
    ids = draw(st.sets(st.sampled_from(DEVICE_IDS), max_size=4))
    return draw(snapshots(ids)), draw(snapshots(ids))


OPPOSITE = {
    TrendDirection.INCREASE: TrendDirection.DECREASE,
    TrendDirection.DECREASE: TrendDirection.INCREASE,
    TrendDirection.MAINTAIN: TrendDirection.MAINTAIN,
}


@settings(max_examples=200, deadline=None)
@given(pair=snapshot_pairs())
def test_diff_is_symmetric(pair):
    first, second = pair
    forward = diff_snapshots(first, second)
    backward = diff_snapshots(second, first)
    assert forward.changed_paths == backward.changed_paths
    assert {(c.path, c.before, c.after) for c in forward.changed} == {
        (c.path, c.after, c.before) for c in backward.changed
    }
    assert forward.unchanged == backward.unchanged
    assert forward.changed_paths | forward.unchanged == set(first.values())
    assert {path: OPPOSITE[t] for path, t in forward.trend_per_changed.items()} == dict(
        backward.trend_per_changed
    )
    assert diff_snapshots(first, first).is_empty


NUMBERS = st.one_of(st.integers(-10**6, 10**6), st.floats(-1e6, 1e6, allow_nan=False))


@settings(max_examples=500)
@given(before=NUMBERS, after=NUMBERS)
def test_classify_trend_is_antisymmetric(before, after):
    assert classify_trend(after, before) is OPPOSITE[classify_trend(before, after)]
    assert (classify_trend(before, after) is TrendDirection.MAINTAIN) == (before == after)


LINKED = [
    (device_id, attr.name, attr.linked)
    for device_id in DEVICE_IDS
    for attr in default_registry().device(device_id).attributes
    if attr.linked
]


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_linked_attributes_have_no_shadow_copy(data):
    assert LINKED
    world = World(default_registry())
    for device_id, name, linked in LINKED:
        env_path, device_path = f"{ENVIRONMENT_ID}.{linked}", f"{device_id}.{name}"
        attr = SCHEMA[ENVIRONMENT_ID][linked]
        for path in (env_path, device_path):
            value = data.draw(_values_for(attr).filter(lambda v: v is not None))
            world.set(path, value)
            for mode in (FULL, COMPACT):
                reparsed = parse_snapshot(serialize_snapshot(world.snapshot(), mode), SCHEMA)
                assert reparsed.get(device_path) == reparsed.get(env_path) == value
