"""Declarative device definitions and the registry that validates and executes their APIs.

Devices are described by JSON definition files (see ``definitions/``). Each API binds to a
short list of effects built from a handful of get/set primitives:

``set``      assign a parameter, a constant, another attribute or a formatted template
``adjust``   step a numeric attribute up or down by ``value`` or a relative degree
``level``    set a numeric attribute to ``value`` or a named level
``append``   add an item to a list attribute
``remove``   drop an item from a list attribute
``require``  precondition on the current state
``query``    return attribute values as the call's payload

Effect targets are attribute names of the owning device, or ``environment.<attr>``.
Targets may contain ``{param}`` placeholders filled from the call's arguments.
"""

import json
import logging
import math
import re
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Literal, Mapping, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .calls import ApiCall, ApiResult
from .environment import DELTA_DEGREES, ENVIRONMENT_SCHEMA, SET_DEGREES, VolumeCommand, resolve_level
from .errors import (
    DefinitionError,
    UnknownApiError,
    UnknownDeviceError,
    UnknownPresetError,
)
from .state import ENVIRONMENT_ID, AttributeSchema, TypeTag, Value, coerce_value, is_numeric, values_equal

if TYPE_CHECKING:
    from .world import World

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "default"
UTILITY_APIS = ("search_module", "search_api")
_API_NAME = re.compile(r"^[a-z][A-Za-z]*(_[A-Za-z]+)+$")
_PLACEHOLDER = re.compile(r"\{(\w+)\}")


class ParamKind(str, Enum):
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"
    STRING = "string"
    ENUM = "enum"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class AttributeTemplate(_Frozen):
    """Declared attribute of a device."""

    name: str
    type: TypeTag
    default: Any = None
    description: str = ""
    nullable: bool = False
    allowed_values: Optional[Tuple[Any, ...]] = None
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    # True when this boolean means "this device holds the sound channel"
    channel: bool = False
    # Name of the environment attribute this is a live view of
    linked: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "AttributeTemplate":
        if not self.name or self.name.startswith(".") or self.name.endswith("."):
            raise ValueError(f"bad attribute name {self.name!r}")
        if self.channel and self.type is not TypeTag.BOOLEAN:
            raise ValueError(f"{self.name}: channel flag must be boolean")
        if self.linked is not None and self.linked not in ENVIRONMENT_SCHEMA:
            raise ValueError(f"{self.name}: linked to unknown environment attribute {self.linked!r}")
        return self

    def to_schema(self) -> AttributeSchema:
        if self.linked is not None:
            env = ENVIRONMENT_SCHEMA[self.linked]
            return AttributeSchema(
                self.name, env.type_tag, self.description or env.description, env.default,
                env.nullable, env.allowed_values, env.minimum, env.maximum,
            )
        default = coerce_value(self.type, self.default) if self.default is not None else None
        return AttributeSchema(
            self.name,
            self.type,
            self.description,
            default,
            self.nullable,
            tuple(self.allowed_values) if self.allowed_values is not None else None,
            self.minimum,
            self.maximum,
        )


class ParamSpec(_Frozen):
    name: str
    kind: ParamKind
    description: str = ""
    allowed_values: Optional[Tuple[str, ...]] = None
    required: bool = False
    exclusive_group: Optional[str] = None
    minimum: Optional[float] = None
    maximum: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "ParamSpec":
        if self.kind is ParamKind.ENUM and not self.allowed_values:
            raise ValueError(f"enum parameter {self.name!r} needs allowed_values")
        return self

    def render(self) -> str:
        text = f"{self.name} ({self.kind.value})"
        if self.allowed_values:
            text += ": {" + ", ".join(json.dumps(v) for v in self.allowed_values) + "}"
        if self.minimum is not None or self.maximum is not None:
            text += f" range [{_num(self.minimum)}, {_num(self.maximum)}]"
        if self.exclusive_group:
            text += f"; exclusive group {self.exclusive_group!r}"
        if self.description:
            text += f" - {self.description}"
        return text


def _fits_real(value: Any) -> bool:
    try:
        return math.isfinite(float(value))
    except OverflowError:
        return False


def _num(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return str(int(value)) if float(value).is_integer() else str(value)


class Effect(_Frozen):
    """One behavior primitive bound to an API."""

    op: Literal["set", "adjust", "level", "append", "remove", "require", "query"]
    target: Optional[str] = None
    param: Optional[str] = None
    const: Any = None
    source: Optional[str] = None
    template: Optional[str] = None
    direction: Literal["increase", "decrease"] = "increase"
    step: Optional[float] = None
    degree_param: str = "degree"
    degrees: Optional[Dict[str, float]] = None
    equals: Any = None
    not_null: bool = False
    contains_param: Optional[str] = None
    read: Optional[Tuple[str, ...]] = None
    filter_param: Optional[str] = None
    message: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "Effect":
        if self.op == "query":
            if not self.read:
                raise ValueError("query effect needs read")
        elif not self.target:
            raise ValueError(f"{self.op} effect needs a target")
        if self.op == "set":
            sources = [
                self.param is not None,
                "const" in self.model_fields_set,
                self.source is not None,
                self.template is not None,
            ]
            if sum(sources) != 1:
                raise ValueError("set effect needs exactly one of param, const, source, template")
        return self


class ApiSpec(_Frozen):
    api_name: str
    device_id: str
    description: str = ""
    params: Tuple[ParamSpec, ...] = ()
    # Alternatives of which at least one must be fully supplied, e.g. [["value"], ["degree"]]
    required_sets: Tuple[Tuple[str, ...], ...] = ()
    kind: Literal["setter", "query"] = "setter"
    effects: Tuple[Effect, ...] = Field(default=(), repr=False)

    @model_validator(mode="after")
    def _check(self) -> "ApiSpec":
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.api_name}: duplicate parameter names")
        groups: Dict[str, int] = {}
        for param in self.params:
            if param.exclusive_group:
                groups[param.exclusive_group] = groups.get(param.exclusive_group, 0) + 1
        lonely = [group for group, size in groups.items() if size < 2]
        if lonely:
            raise ValueError(f"{self.api_name}: exclusive group {lonely[0]!r} has fewer than 2 members")
        for alternative in self.required_sets:
            unknown = set(alternative) - set(names)
            if unknown:
                raise ValueError(f"{self.api_name}: required set names unknown params {sorted(unknown)}")
        return self

    def param(self, name: str) -> Optional[ParamSpec]:
        for param in self.params:
            if param.name == name:
                return param
        return None

    @property
    def required_text(self) -> str:
        parts = []
        required = [p.name for p in self.params if p.required]
        if required:
            parts.append("{" + ", ".join(required) + "}")
        if self.required_sets:
            parts.append("One of: " + ", ".join(" + ".join(alt) for alt in self.required_sets))
        return "; ".join(parts) or "None"

    def describe(self) -> Dict[str, Any]:
        """Machine-readable documentation (no behavior bindings)."""
        return {
            "api_name": self.api_name,
            "device": self.device_id,
            "description": self.description,
            "kind": self.kind,
            "params": [
                {
                    key: value
                    for key, value in param.model_dump(mode="json").items()
                    if value not in (None, False, "")
                }
                for param in self.params
            ],
            "required": self.required_text,
        }

    def render(self) -> str:
        lines = [self.api_name, f"  Device: {self.device_id}", f"  Description: {self.description}"]
        if self.params:
            lines.append("  Arguments:")
            lines.extend(f"    {param.render()}" for param in self.params)
        else:
            lines.append("  Arguments: None")
        lines.append(f"  Required: {self.required_text}")
        return "\n".join(lines)


class ModuleInfo(_Frozen):
    device_id: str
    description: str
    domain: str = ""


class DeviceDefinition(_Frozen):
    device_id: str
    description: str = ""
    domain: str = ""
    # "reference" for the documented benchmark devices, "extended" for the ones added here
    provenance: Literal["reference", "extended"] = "extended"
    attributes: Tuple[AttributeTemplate, ...] = ()
    apis: Tuple[ApiSpec, ...] = ()
    init_presets: Dict[str, Dict[str, Any]] = Field(default_factory=dict)

    @field_validator("apis", mode="before")
    @classmethod
    def _fill_device_id(cls, apis: Any, info: Any) -> Any:
        device_id = info.data.get("device_id")
        filled = []
        for api in apis or ():
            if isinstance(api, dict) and "device_id" not in api:
                api = {**api, "device_id": device_id}
            filled.append(api)
        return filled

    def attribute(self, name: str) -> Optional[AttributeTemplate]:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        return None

    @property
    def channel_flag(self) -> Optional[str]:
        for attr in self.attributes:
            if attr.channel:
                return attr.name
        return None

    def preset_values(self, preset_name: str) -> Dict[str, Value]:
        """Complete attribute assignment for a preset: defaults overlaid with the preset."""
        if preset_name != DEFAULT_PRESET and preset_name not in self.init_presets:
            raise UnknownPresetError(self.device_id, preset_name)
        values = {attr.name: attr.to_schema().default for attr in self.attributes if attr.linked is None}
        for name, raw in self.init_presets.get(preset_name, {}).items():
            attr = self.attribute(name)
            values[name] = coerce_value(attr.to_schema().type_tag, raw) if raw is not None else None
        return values

    @property
    def preset_names(self) -> List[str]:
        names = list(self.init_presets)
        if DEFAULT_PRESET not in names:
            names.insert(0, DEFAULT_PRESET)
        return names


def _expand_target(target: str, api: ApiSpec) -> List[str]:
    """All concrete targets a templated target can produce (enum placeholders only)."""
    names = _PLACEHOLDER.findall(target)
    if not names:
        return [target]
    expanded = [target]
    for name in names:
        param = api.param(name)
        if param is None or not param.allowed_values:
            raise DefinitionError(f"{api.api_name}: placeholder {{{name}}} must be an enum parameter")
        expanded = [t.replace("{" + name + "}", str(v)) for t in expanded for v in param.allowed_values]
    return expanded


class DeviceRegistry:
    """
    Registered device definitions.

    Definitions are immutable once registered and can be shared by any number of worlds.
    """

    def __init__(self, definitions: Iterable[DeviceDefinition] = ()):
        self._devices: Dict[str, DeviceDefinition] = {}
        self._apis: Dict[str, ApiSpec] = {}
        self._writable: Optional[frozenset] = None
        for definition in definitions:
            self.register(definition)

    # ------------------------------------------------------------------ loading

    @classmethod
    def from_directory(cls, directory: Path) -> "DeviceRegistry":
        registry = cls()
        for path in sorted(Path(directory).glob("*.json")):
            registry.load_file(path)
        return registry

    def load_file(self, path: Path) -> DeviceDefinition:
        """
        Load and register one JSON definition file.

        Raises:
            DefinitionError: If the file is malformed or inconsistent
        """
        text = Path(path).read_text(encoding="utf-8")
        return self.load_text(text, source=str(path))

    def load_text(self, text: str, source: str = "<text>") -> DeviceDefinition:
        try:
            definition = DeviceDefinition.model_validate_json(text)
        except ValidationError as e:
            raise DefinitionError(f"{source}: {e}") from e
        self.register(definition)
        return definition

    def register(self, definition: DeviceDefinition) -> None:
        """
        Add a device definition after checking it for consistency.

        Raises:
            DefinitionError: On duplicate ids or names, effects that reach outside the device,
                             or presets that assign undeclared or illegal values
        """
        self._validate(definition)
        self._devices[definition.device_id] = definition
        self._writable = None
        for api in definition.apis:
            self._apis[api.api_name] = api
        logger.debug(
            "registered %s (%d attributes, %d APIs)",
            definition.device_id, len(definition.attributes), len(definition.apis),
        )

    def _validate(self, definition: DeviceDefinition) -> None:
        device_id = definition.device_id
        if device_id in self._devices:
            raise DefinitionError(f"device {device_id!r} already registered")
        if "." in device_id or not device_id:
            raise DefinitionError(f"bad device id {device_id!r}")

        names = [attr.name for attr in definition.attributes]
        if len(set(names)) != len(names):
            raise DefinitionError(f"{device_id}: duplicate attribute names")
        for name in names:
            if any(other.startswith(name + ".") for other in names):
                raise DefinitionError(f"{device_id}: {name!r} is both a leaf and a group")
        if sum(1 for attr in definition.attributes if attr.channel) > 1:
            raise DefinitionError(f"{device_id}: at most one channel flag per device")
        if device_id == ENVIRONMENT_ID and definition.attributes:
            raise DefinitionError("environment attributes are fixed by the environment core")

        declared = set(names) if device_id != ENVIRONMENT_ID else set()
        for attr in definition.attributes:
            schema = attr.to_schema()
            problem = schema.check(schema.default)
            if problem:
                raise DefinitionError(f"{device_id}.{attr.name}: default {problem}")

        for api in definition.apis:
            if api.api_name in self._apis or api.api_name in UTILITY_APIS:
                raise DefinitionError(f"API {api.api_name!r} already registered")
            if not _API_NAME.match(api.api_name):
                raise DefinitionError(f"API name {api.api_name!r} must look like device_function_action")
            if api.device_id != device_id:
                raise DefinitionError(f"{api.api_name}: belongs to {api.device_id!r}, not {device_id!r}")
            for effect in api.effects:
                targets = list(effect.read or ()) if effect.op == "query" else [effect.target]
                if effect.source:
                    targets.append(effect.source)
                for target in targets:
                    for concrete in _expand_target(target, api):
                        self._check_reach(definition, declared, api, concrete)
                for ref in (effect.param, effect.filter_param, effect.contains_param):
                    if ref is not None and api.param(ref) is None:
                        raise DefinitionError(f"{api.api_name}: effect refers to unknown param {ref!r}")

        for preset_name, assignments in definition.init_presets.items():
            for name, raw in assignments.items():
                attr = definition.attribute(name)
                if attr is None or attr.linked is not None:
                    raise DefinitionError(f"{device_id}: preset {preset_name!r} sets unknown attribute {name!r}")
                schema = attr.to_schema()
                try:
                    value = coerce_value(schema.type_tag, raw) if raw is not None else None
                except ValueError as e:
                    raise DefinitionError(f"{device_id}: preset {preset_name!r}: {name}: {e}") from e
                problem = schema.check(value)
                if problem:
                    raise DefinitionError(f"{device_id}: preset {preset_name!r}: {name}: {problem}")

    @staticmethod
    def _check_reach(definition: DeviceDefinition, declared: Set[str], api: ApiSpec, target: str) -> None:
        if target.startswith(ENVIRONMENT_ID + "."):
            if target.split(".", 1)[1] not in ENVIRONMENT_SCHEMA:
                raise DefinitionError(f"{api.api_name}: unknown environment attribute {target!r}")
            return
        if target not in declared:
            raise DefinitionError(
                f"{api.api_name}: effect reaches {target!r}, outside device {definition.device_id!r}"
            )

    # ------------------------------------------------------------------ lookup

    @property
    def device_ids(self) -> List[str]:
        return sorted(self._devices)

    def device(self, device_id: str) -> DeviceDefinition:
        try:
            return self._devices[device_id]
        except KeyError:
            raise UnknownDeviceError(device_id) from None

    def has_device(self, device_id: str) -> bool:
        return device_id in self._devices

    def api(self, api_name: str) -> ApiSpec:
        try:
            return self._apis[api_name]
        except KeyError:
            raise UnknownApiError(api_name) from None

    def has_api(self, api_name: str) -> bool:
        return api_name in self._apis or api_name in UTILITY_APIS

    def search_module(self) -> List[ModuleInfo]:
        """All registered devices with one-line descriptions, ordered by id."""
        return [
            ModuleInfo(device_id=d.device_id, description=d.description, domain=d.domain)
            for d in (self._devices[key] for key in sorted(self._devices))
        ]

    def search_api(self, device_id: str) -> List[ApiSpec]:
        """
        Full API surface of one device.

        Raises:
            UnknownDeviceError: If the device is not registered
        """
        return list(self.device(device_id).apis)

    def schema(self) -> Dict[str, Dict[str, AttributeSchema]]:
        """Attribute schema per device id, environment included."""
        schema: Dict[str, Dict[str, AttributeSchema]] = {ENVIRONMENT_ID: dict(ENVIRONMENT_SCHEMA)}
        for device_id in self.device_ids:
            if device_id == ENVIRONMENT_ID:
                continue
            schema[device_id] = {
                attr.name: attr.to_schema() for attr in self._devices[device_id].attributes
            }
        return schema

    def writable_paths(self) -> frozenset:
        """Attribute paths some setter-style API can write; everything else is read-only."""
        if self._writable is None:
            self._writable = frozenset(self._collect_writable())
        return self._writable

    def _collect_writable(self) -> Set[str]:
        paths: Set[str] = set()
        for api in self._apis.values():
            if api.kind != "setter":
                continue
            for effect in api.effects:
                if effect.op in ("require", "query"):
                    continue
                for target in _expand_target(effect.target, api):
                    if target.startswith(ENVIRONMENT_ID + "."):
                        paths.add(target)
                    else:
                        paths.add(f"{api.device_id}.{target}")
                        attr = self._devices[api.device_id].attribute(target)
                        if attr is not None and attr.linked:
                            paths.add(f"{ENVIRONMENT_ID}.{attr.linked}")
                        if attr is not None and attr.channel:
                            paths.add(f"{ENVIRONMENT_ID}.sound_channel")
        for definition in self._devices.values():
            flag = definition.channel_flag
            if flag and f"{ENVIRONMENT_ID}.sound_channel" in paths:
                paths.add(f"{definition.device_id}.{flag}")
        return paths

    def device_of(self, api_name: str) -> Optional[str]:
        """Device an API belongs to; ``None`` for the utility APIs."""
        if api_name in UTILITY_APIS:
            return None
        return self.api(api_name).device_id

    # ------------------------------------------------------------------ execution

    def invoke(self, world: "World", call: ApiCall) -> ApiResult:
        """
        Validate and execute one API call against a world.

        Validation covers unknown APIs, undeclared arguments, argument kinds, enum values,
        ranges, exclusive groups and required arguments. Effects are planned against a
        staged view first, so a call that fails leaves the world untouched.
        """
        name = call.api_name
        if name in UTILITY_APIS:
            return self._invoke_utility(call)
        if name not in self._apis:
            return ApiResult.failure(name, f"Unknown API: {name!r}")
        api = self._apis[name]

        args, problem = self._validate_args(api, call.args)
        if problem:
            logger.debug("%s rejected: %s", name, problem)
            return ApiResult.failure(name, problem)

        plan = _EffectPlan(world, api, args)
        try:
            payload = plan.run()
        except _EffectFailure as e:
            logger.debug("%s rejected: %s", name, e)
            return ApiResult.failure(name, str(e))

        before = world.values()
        with world.environment.exclusive():
            for path, value in plan.assignments:
                world.set(path, value)
        after = world.values()

        own = f"{api.device_id}."
        env = f"{ENVIRONMENT_ID}."
        changed = [path for path in after if not values_equal(before[path], after[path])]
        touched = tuple(p for p in changed if p.startswith(own) or p.startswith(env))
        side = tuple(p for p in changed if p not in touched)
        message = "query ok" if api.kind == "query" else ("ok" if touched else "ok (no change)")
        return ApiResult(
            success=True,
            message=message,
            payload=payload,
            touched_paths=touched,
            side_effects=side,
            api_name=name,
        )

    def _invoke_utility(self, call: ApiCall) -> ApiResult:
        if call.api_name == "search_module":
            if call.args:
                return ApiResult.failure(call.api_name, "search_module takes no arguments")
            payload = [info.model_dump() for info in self.search_module()]
            return ApiResult(True, f"{len(payload)} modules", payload=payload, api_name=call.api_name)
        unexpected = set(call.args) - {"device_id"}
        device_id = call.args.get("device_id")
        if unexpected or not isinstance(device_id, str):
            return ApiResult.failure(call.api_name, "search_api requires device_id (string)")
        if device_id not in self._devices:
            return ApiResult.failure(call.api_name, f"Unknown device: {device_id!r}")
        payload = [api.describe() for api in self.search_api(device_id)]
        return ApiResult(True, f"{len(payload)} APIs", payload=payload, api_name=call.api_name)

    @staticmethod
    def _validate_args(api: ApiSpec, raw: Mapping[str, Any]) -> Tuple[Dict[str, Any], Optional[str]]:
        args: Dict[str, Any] = {}
        for key, value in raw.items():
            param = api.param(key)
            if param is None:
                return {}, f"{api.api_name}: unexpected argument {key!r}"
            if value is None:
                continue
            kind = param.kind
            if kind is ParamKind.BOOLEAN:
                ok = isinstance(value, bool)
            elif kind is ParamKind.INTEGER:
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif kind is ParamKind.REAL:
                ok = is_numeric(value) and _fits_real(value)
                value = float(value) if ok else value
            else:
                ok = isinstance(value, str)
            if not ok:
                return {}, f"{api.api_name}: argument {key!r} must be {kind.value}, got {value!r}"
            if param.allowed_values is not None and value not in param.allowed_values:
                return {}, (
                    f"{api.api_name}: argument {key!r} must be one of "
                    f"{list(param.allowed_values)}, got {value!r}"
                )
            if is_numeric(value):
                if param.minimum is not None and value < param.minimum or (
                    param.maximum is not None and value > param.maximum
                ):
                    return {}, (
                        f"{api.api_name}: argument {key!r}={value} out of range "
                        f"[{_num(param.minimum)}, {_num(param.maximum)}]"
                    )
            args[key] = value

        groups: Dict[str, List[str]] = {}
        for key in args:
            group = api.param(key).exclusive_group
            if group:
                groups.setdefault(group, []).append(key)
        for group, members in groups.items():
            if len(members) > 1:
                return {}, f"{api.api_name}: exclusive params {sorted(members)} cannot be combined"

        missing = [p.name for p in api.params if p.required and p.name not in args]
        if missing:
            return {}, f"{api.api_name}: missing required argument(s) {missing}"
        if api.required_sets and not any(set(alt) <= set(args) for alt in api.required_sets):
            options = ", ".join(" + ".join(alt) for alt in api.required_sets)
            return {}, f"{api.api_name}: must provide one of: {options}"
        return args, None

    def init_device(self, world: "World", device_id: str, preset_name: str) -> None:
        """
        Put one device into a named init preset.

        Every attribute is assigned (defaults where the preset is silent) in one step; channel
        flags go last so the sound channel ends up with the device the preset says.

        Raises:
            UnknownDeviceError: If the device is not registered
            UnknownPresetError: If the device has no such preset
        """
        definition = self.device(device_id)
        values = definition.preset_values(preset_name)
        flag = definition.channel_flag
        ordered = sorted(values.items(), key=lambda item: item[0] == flag)
        with world.environment.exclusive():
            for name, value in ordered:
                world.set(f"{device_id}.{name}", value)
        logger.debug("initialized %s with preset %s", device_id, preset_name)


class _EffectFailure(Exception):
    pass


class _EffectPlan:
    """Runs an API's effects against a staged overlay of the world."""

    def __init__(self, world: "World", api: ApiSpec, args: Dict[str, Any]):
        self.world = world
        self.api = api
        self.args = args
        self.staged: Dict[str, Value] = {}
        self.assignments: List[Tuple[str, Value]] = []

    def _path(self, target: str) -> str:
        try:
            target = target.format(**{k: v for k, v in self.args.items()})
        except KeyError as e:
            raise _EffectFailure(f"{self.api.api_name}: missing argument {e.args[0]!r}") from None
        if target.startswith(ENVIRONMENT_ID + "."):
            return target
        return f"{self.api.device_id}.{target}"

    def _read(self, path: str) -> Value:
        if path in self.staged:
            return self.staged[path]
        return self.world.get(path)

    def _write(self, path: str, value: Value) -> None:
        problem = self.world.check(path, value)
        if problem:
            raise _EffectFailure(f"{self.api.api_name}: {problem}")
        self.staged[path] = value
        self.assignments.append((path, value))

    def run(self) -> Optional[Any]:
        payload: Optional[Dict[str, Any]] = None
        for effect in self.api.effects:
            result = getattr(self, f"_op_{effect.op}")(effect)
            if result is not None:
                payload = {**(payload or {}), **result}
        return payload

    def _format(self, template: str) -> str:
        """Fill ``{name}`` from the call's arguments, falling back to the device's own attributes."""
        values: Dict[str, Any] = {}
        for name in _PLACEHOLDER.findall(template):
            if name in self.args:
                values[name] = self.args[name]
            elif self.api.param(name) is not None:
                values[name] = ""
            else:
                values[name] = self._read(self._path(name))
        return template.format(**values)

    def _op_set(self, effect: Effect) -> None:
        path = self._path(effect.target)
        if effect.param is not None:
            if effect.param not in self.args:
                return
            value = self.args[effect.param]
        elif effect.source is not None:
            value = self._read(self._path(effect.source))
        elif effect.template is not None:
            value = self._format(effect.template)
        else:
            value = effect.const
        schema = self.world.schema_for(path)
        if value is not None and schema.type_tag is TypeTag.REAL and is_numeric(value):
            if not _fits_real(value):
                raise _EffectFailure(f"{self.api.api_name}: {path}: value too large for a real")
            value = float(value)
        self._write(path, value)

    def _command(self, effect: Effect, relative: bool) -> VolumeCommand:
        value = self.args.get(effect.param or "value")
        degree = self.args.get(effect.degree_param)
        sign = 1 if effect.direction == "increase" else -1
        if value is not None:
            return VolumeCommand.step(sign * value) if relative else VolumeCommand.absolute(value)
        if degree is not None:
            if relative:
                table = effect.degrees or DELTA_DEGREES
                return VolumeCommand.step(sign * table[degree])
            table = effect.degrees or SET_DEGREES
            return VolumeCommand.absolute(table[degree])
        if relative and effect.step is not None:
            return VolumeCommand.step(sign * effect.step)
        raise _EffectFailure(f"{self.api.api_name}: provide value or {effect.degree_param}")

    def _numeric(self, effect: Effect, relative: bool) -> None:
        path = self._path(effect.target)
        schema = self.world.schema_for(path)
        command = self._command(effect, relative)
        current = self._read(path)
        if current is None:
            current = schema.default
        lower = schema.minimum if schema.minimum is not None else float("-inf")
        upper = schema.maximum if schema.maximum is not None else float("inf")
        level, clamped = resolve_level(command, current, lower, upper)
        if clamped:
            logger.debug("%s: %s clamped to %s", self.api.api_name, path, level)
        if not _fits_real(level):
            raise _EffectFailure(f"{self.api.api_name}: {path}: value out of numeric range")
        if schema.type_tag is TypeTag.INTEGER:
            level = int(round(level))
        else:
            # reals are kept to one decimal place
            level = round(float(level), 1)
        self._write(path, level)

    def _op_adjust(self, effect: Effect) -> None:
        self._numeric(effect, relative=True)

    def _op_level(self, effect: Effect) -> None:
        self._numeric(effect, relative=False)

    def _item(self, effect: Effect) -> Any:
        if effect.template is not None:
            return self._format(effect.template)
        if effect.param is not None:
            if effect.param not in self.args:
                raise _EffectFailure(f"{self.api.api_name}: missing argument {effect.param!r}")
            return self.args[effect.param]
        return effect.const

    def _op_append(self, effect: Effect) -> None:
        path = self._path(effect.target)
        current = self._read(path) or ()
        self._write(path, tuple(current) + (self._item(effect),))

    def _op_remove(self, effect: Effect) -> None:
        path = self._path(effect.target)
        current = tuple(self._read(path) or ())
        item = self._item(effect)
        if item not in current:
            raise _EffectFailure(effect.message or f"{self.api.api_name}: {item!r} not found")
        self._write(path, tuple(entry for entry in current if entry != item))

    def _op_require(self, effect: Effect) -> None:
        path = self._path(effect.target)
        value = self._read(path)
        if effect.not_null:
            ok = value is not None
        elif effect.contains_param is not None:
            ok = self.args.get(effect.contains_param) in (value or ())
        else:
            ok = values_equal(value, effect.equals)
        if not ok:
            raise _EffectFailure(effect.message or f"{self.api.api_name}: precondition on {path} not met")

    def _op_query(self, effect: Effect) -> Dict[str, Any]:
        needle = self.args.get(effect.filter_param) if effect.filter_param else None
        result: Dict[str, Any] = {}
        for name in effect.read:
            value = self._read(self._path(name))
            if needle is not None and isinstance(value, tuple):
                value = [item for item in value if str(needle).lower() in str(item).lower()]
            elif isinstance(value, tuple):
                value = list(value)
            result[name] = value
        return result


@lru_cache(maxsize=1)
def default_registry() -> DeviceRegistry:
    """The shipped device set, loaded once from the package's definition files."""
    registry = DeviceRegistry()
    definitions = resources.files(__package__).joinpath("definitions")
    for entry in sorted(definitions.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            registry.load_text(entry.read_text(encoding="utf-8"), source=entry.name)
    return registry
