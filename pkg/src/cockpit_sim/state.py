"""World-state document model.

Snapshots are immutable value objects. Attributes are addressed by flat paths of the form
``device_id.attr`` where nested sub-objects are joined with dots
(``seat.driver.heating``). Documents are JSON with sorted keys so that equal snapshots
serialize to byte-identical text.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from .errors import DiffError, SnapshotSchemaError, SnapshotSyntaxError, TrendError

Scalar = Union[bool, int, float, str, None]
Value = Union[Scalar, Tuple[Scalar, ...]]

ENVIRONMENT_ID = "environment"
LABEL_KEY = "@label"
FULL = "full"
COMPACT = "compact"


class TypeTag(str, Enum):
    """Kind of value an attribute carries."""

    BOOLEAN = "boolean"
    INTEGER = "integer"
    REAL = "real"
    STRING = "string"
    LIST = "list"


class TrendDirection(str, Enum):
    INCREASE = "increase"
    DECREASE = "decrease"
    MAINTAIN = "maintain"


def is_numeric(value: Any) -> bool:
    """True for int/float values; booleans are not numeric."""
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_scalar(value: Any) -> bool:
    return value is None or isinstance(value, (bool, int, float, str))


def value_matches(type_tag: TypeTag, value: Any) -> bool:
    """Check a runtime value against a type tag. ``None`` is accepted for every tag."""
    if value is None:
        return True
    if type_tag is TypeTag.BOOLEAN:
        return isinstance(value, bool)
    if type_tag is TypeTag.INTEGER:
        return isinstance(value, int) and not isinstance(value, bool)
    if type_tag is TypeTag.REAL:
        return isinstance(value, float) and math.isfinite(value)
    if type_tag is TypeTag.STRING:
        return isinstance(value, str)
    if type_tag is TypeTag.LIST:
        return isinstance(value, tuple) and all(
            _is_scalar(item) and item is not None for item in value
        )
    return False


def coerce_value(type_tag: TypeTag, raw: Any) -> Value:
    """
    Convert a decoded document value into the canonical runtime form for a type tag.

    Integers are widened to floats for ``real`` attributes and JSON arrays become tuples.
    Anything else must already match.

    Raises:
        ValueError: If the value cannot represent the tag
    """
    value = raw
    if type_tag is TypeTag.REAL and isinstance(raw, int) and not isinstance(raw, bool):
        try:
            value = float(raw)
        except OverflowError:
            raise ValueError(f"expected {type_tag.value}, got an integer too large for a real") from None
    elif type_tag is TypeTag.LIST and isinstance(raw, list):
        value = tuple(raw)
    if not value_matches(type_tag, value):
        raise ValueError(f"expected {type_tag.value}, got {type(raw).__name__} {raw!r}")
    return value


@dataclass(frozen=True)
class AttributeSchema:
    """Declared shape of one attribute, used to validate documents and patches."""

    name: str
    type_tag: TypeTag
    description: str = ""
    default: Value = None
    nullable: bool = False
    allowed_values: Optional[Tuple[Scalar, ...]] = None
    minimum: Optional[float] = None
    maximum: Optional[float] = None

    def check(self, value: Value) -> Optional[str]:
        """Return a violation message for ``value`` or ``None`` if it is legal."""
        if value is None:
            return None if self.nullable else "null not allowed"
        if not value_matches(self.type_tag, value):
            return f"expected {self.type_tag.value}, got {type(value).__name__} {value!r}"
        if self.allowed_values is not None:
            items = value if isinstance(value, tuple) else (value,)
            bad = [item for item in items if item not in self.allowed_values]
            if bad:
                return f"{bad[0]!r} not in {list(self.allowed_values)}"
        if is_numeric(value):
            if self.minimum is not None and value < self.minimum:
                return f"{value} below minimum {self.minimum}"
            if self.maximum is not None and value > self.maximum:
                return f"{value} above maximum {self.maximum}"
        return None


# device_id -> attribute name -> schema
Schema = Mapping[str, Mapping[str, AttributeSchema]]


@dataclass(frozen=True)
class AttributeDescriptor:
    name: str
    value: Value
    type_tag: TypeTag
    description: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise SnapshotSchemaError("", "attribute name must be non-empty")
        if not value_matches(self.type_tag, self.value):
            raise SnapshotSchemaError(
                self.name, f"value {self.value!r} does not match type {self.type_tag.value}"
            )


@dataclass(frozen=True)
class DeviceState:
    device_id: str
    attributes: Mapping[str, AttributeDescriptor]

    def __post_init__(self) -> None:
        attrs = dict(self.attributes)
        for name, descriptor in attrs.items():
            if descriptor.name != name:
                raise SnapshotSchemaError(
                    f"{self.device_id}.{name}", "descriptor name does not match its key"
                )
        object.__setattr__(self, "attributes", MappingProxyType(attrs))

    def value(self, name: str) -> Value:
        return self.attributes[name].value

    def values(self) -> Dict[str, Value]:
        return {name: descriptor.value for name, descriptor in self.attributes.items()}


@dataclass(frozen=True)
class WorldSnapshot:
    environment: DeviceState
    devices: Mapping[str, DeviceState] = field(default_factory=dict)
    timestamp_label: str = ""

    def __post_init__(self) -> None:
        if self.environment is None:
            raise SnapshotSchemaError(ENVIRONMENT_ID, "environment required")
        object.__setattr__(self, "devices", MappingProxyType(dict(self.devices)))

    @property
    def device_ids(self) -> FrozenSet[str]:
        return frozenset(self.devices)

    def blocks(self) -> List[DeviceState]:
        """Environment first, then devices in id order."""
        return [self.environment] + [self.devices[key] for key in sorted(self.devices)]

    def flatten(self) -> Dict[str, AttributeDescriptor]:
        """Map every attribute path to its descriptor."""
        flat: Dict[str, AttributeDescriptor] = {}
        for block in self.blocks():
            for name, descriptor in block.attributes.items():
                flat[f"{block.device_id}.{name}"] = descriptor
        return flat

    def values(self) -> Dict[str, Value]:
        return {path: descriptor.value for path, descriptor in self.flatten().items()}

    def get(self, path: str) -> Value:
        return self.flatten()[path].value

    def project(self, device_ids: Iterable[str]) -> "WorldSnapshot":
        """Restrict to the listed devices; the environment is always kept."""
        wanted = set(device_ids) - {ENVIRONMENT_ID}
        missing = wanted - set(self.devices)
        if missing:
            raise DiffError(f"devices not in snapshot: {sorted(missing)}")
        return WorldSnapshot(
            environment=self.environment,
            devices={key: self.devices[key] for key in sorted(wanted)},
            timestamp_label=self.timestamp_label,
        )

    def relabel(self, label: str) -> "WorldSnapshot":
        return WorldSnapshot(self.environment, self.devices, label)


def split_path(path: str) -> Tuple[str, str]:
    """Split ``device.attr.sub`` into ``("device", "attr.sub")``."""
    device_id, sep, name = path.partition(".")
    if not sep or not device_id or not name:
        raise SnapshotSchemaError(path, "attribute path must look like device_id.attr")
    return device_id, name


@dataclass(frozen=True)
class ChangedAttribute:
    path: str
    before: Value
    after: Value


@dataclass(frozen=True)
class StateDiff:
    changed: FrozenSet[ChangedAttribute]
    unchanged: FrozenSet[str]
    trend_per_changed: Mapping[str, TrendDirection]

    @property
    def changed_paths(self) -> FrozenSet[str]:
        return frozenset(item.path for item in self.changed)

    @property
    def is_empty(self) -> bool:
        return not self.changed

    def touched_devices(self) -> FrozenSet[str]:
        return frozenset(split_path(path)[0] for path in self.changed_paths)

    def as_patch(self) -> Dict[str, Value]:
        """Target values of every changed path, ordered by path."""
        return {item.path: item.after for item in sorted(self.changed, key=lambda c: c.path)}


# ---------------------------------------------------------------------------
# serialization


def _nest(attributes: Mapping[str, AttributeDescriptor], mode: str) -> Dict[str, Any]:
    block: Dict[str, Any] = {}
    for name, descriptor in attributes.items():
        if mode == FULL:
            leaf: Any = {
                "description": descriptor.description,
                "type": descriptor.type_tag.value,
                "value": _jsonable(descriptor.value),
            }
        else:
            leaf = _jsonable(descriptor.value)
        *parents, last = name.split(".")
        cursor = block
        for part in parents:
            cursor = cursor.setdefault(part, {})
        cursor[last] = leaf
    return block


def _jsonable(value: Value) -> Any:
    return list(value) if isinstance(value, tuple) else value


def snapshot_document(snapshot: WorldSnapshot, mode: str = FULL) -> Dict[str, Any]:
    """Build the JSON-ready document for a snapshot."""
    if mode not in (FULL, COMPACT):
        raise ValueError(f"unknown rendering mode {mode!r}")
    document: Dict[str, Any] = {
        block.device_id: _nest(block.attributes, mode) for block in snapshot.blocks()
    }
    if snapshot.timestamp_label:
        document[LABEL_KEY] = snapshot.timestamp_label
    return document


def serialize_snapshot(snapshot: WorldSnapshot, mode: str = FULL) -> str:
    """
    Render a snapshot as canonical document text.

    Keys are sorted within every block, integers carry no decimal point and reals use the
    shortest round-trippable representation, so equal snapshots give byte-identical text.

    Args:
        snapshot: Snapshot to render
        mode: ``"full"`` renders ``{value, type, description}`` per attribute,
              ``"compact"`` renders bare ``name: value`` pairs

    Returns:
        Document text ending in a newline
    """
    document = snapshot_document(snapshot, mode)
    return json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _is_full_leaf(node: Any) -> bool:
    return isinstance(node, dict) and "value" in node and "type" in node


def _flatten_block(
    device_id: str,
    node: Mapping[str, Any],
    declared: Mapping[str, AttributeSchema],
    prefix: str = "",
) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, child in node.items():
        name = f"{prefix}{key}"
        if name in declared:
            flat[name] = child
        elif isinstance(child, dict) and any(attr.startswith(name + ".") for attr in declared):
            flat.update(_flatten_block(device_id, child, declared, prefix=name + "."))
        else:
            raise SnapshotSchemaError(f"{device_id}.{name}", "unknown attribute")
    return flat


def _parse_block(
    device_id: str,
    node: Any,
    declared: Mapping[str, AttributeSchema],
    fill_defaults: bool,
) -> DeviceState:
    if not isinstance(node, dict):
        raise SnapshotSchemaError(device_id, "device block must be an object")
    raw = _flatten_block(device_id, node, declared)
    attributes: Dict[str, AttributeDescriptor] = {}
    for name, attr in declared.items():
        path = f"{device_id}.{name}"
        if name not in raw:
            if not fill_defaults:
                raise SnapshotSchemaError(path, "attribute missing")
            value = attr.default
        else:
            leaf = raw[name]
            if _is_full_leaf(leaf):
                if leaf["type"] != attr.type_tag.value:
                    raise SnapshotSchemaError(
                        path, f"type tag {leaf['type']!r} does not match declared {attr.type_tag.value!r}"
                    )
                leaf = leaf["value"]
            elif isinstance(leaf, dict):
                raise SnapshotSchemaError(path, "attribute object needs 'value' and 'type'")
            try:
                value = coerce_value(attr.type_tag, leaf)
            except ValueError as e:
                raise SnapshotSchemaError(path, str(e)) from e
        problem = attr.check(value)
        if problem:
            raise SnapshotSchemaError(path, problem)
        attributes[name] = AttributeDescriptor(name, value, attr.type_tag, attr.description)
    return DeviceState(device_id, attributes)


def parse_snapshot(text: str, schema: Schema, fill_defaults: bool = False) -> WorldSnapshot:
    """
    Parse snapshot document text against a world schema.

    Full and compact attribute renderings are both accepted, per attribute.

    Args:
        text: Document text
        schema: Declared attributes per device id (see ``DeviceRegistry.schema``)
        fill_defaults: Fill attributes absent from the document with their declared
                       defaults instead of rejecting the document

    Returns:
        Validated snapshot

    Raises:
        SnapshotSyntaxError: If the text is not well-formed
        SnapshotSchemaError: If a block, attribute, type or value violates the schema
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SnapshotSyntaxError(e.msg, e.lineno, e.colno) from e

    if not isinstance(document, dict):
        raise SnapshotSchemaError("", "document must be an object")
    if ENVIRONMENT_ID not in document:
        raise SnapshotSchemaError(ENVIRONMENT_ID, "environment required")

    label = document.get(LABEL_KEY, "")
    if not isinstance(label, str):
        raise SnapshotSchemaError(LABEL_KEY, "label must be a string")

    devices: Dict[str, DeviceState] = {}
    environment: Optional[DeviceState] = None
    for device_id, node in document.items():
        if device_id == LABEL_KEY:
            continue
        if device_id not in schema:
            raise SnapshotSchemaError(device_id, "unknown device")
        block = _parse_block(device_id, node, schema[device_id], fill_defaults)
        if device_id == ENVIRONMENT_ID:
            environment = block
        else:
            devices[device_id] = block
    return WorldSnapshot(environment=environment, devices=devices, timestamp_label=label)


# ---------------------------------------------------------------------------
# diffing


def classify_trend(before: Any, after: Any) -> TrendDirection:
    """
    Classify the direction of a numeric change.

    Raises:
        TrendError: If either value is not numeric
    """
    if not (is_numeric(before) and is_numeric(after)):
        raise TrendError(f"trend needs numeric values, got {before!r} -> {after!r}")
    if after > before:
        return TrendDirection.INCREASE
    if after < before:
        return TrendDirection.DECREASE
    return TrendDirection.MAINTAIN


def values_equal(left: Value, right: Value) -> bool:
    """Exact equality that keeps ``True`` distinct from ``1``."""
    if isinstance(left, tuple) or isinstance(right, tuple):
        return (
            isinstance(left, tuple)
            and isinstance(right, tuple)
            and len(left) == len(right)
            and all(values_equal(a, b) for a, b in zip(left, right))
        )
    if isinstance(left, bool) or isinstance(right, bool):
        return type(left) is type(right) and left == right
    if is_numeric(left) and is_numeric(right):
        return left == right
    return type(left) is type(right) and left == right


def diff_values(before: Mapping[str, Value], after: Mapping[str, Value]) -> StateDiff:
    """Diff two flat path -> value maps over their shared paths."""
    changed = set()
    unchanged = set()
    trends: Dict[str, TrendDirection] = {}
    for path in before.keys() & after.keys():
        old, new = before[path], after[path]
        if values_equal(old, new):
            unchanged.add(path)
            continue
        changed.add(ChangedAttribute(path, old, new))
        if is_numeric(old) and is_numeric(new):
            trends[path] = classify_trend(old, new)
    return StateDiff(frozenset(changed), frozenset(unchanged), MappingProxyType(trends))


def diff_snapshots(before: WorldSnapshot, after: WorldSnapshot) -> StateDiff:
    """
    Compare two snapshots attribute by attribute.

    Raises:
        DiffError: If the snapshots cover different device sets
    """
    if before.device_ids != after.device_ids:
        raise DiffError(
            f"device sets differ: {sorted(before.device_ids ^ after.device_ids)}"
        )
    return diff_values(before.values(), after.values())
