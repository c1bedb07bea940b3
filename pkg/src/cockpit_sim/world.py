"""Live world: per-world device attribute storage and the setter layer every mutation goes through."""

import logging
from functools import partial
from typing import Dict, Iterable, List, Optional

from .environment import NO_CHANNEL, GlobalEnvironment, VolumeCommand
from .errors import StateViolationError, UnknownDeviceError
from .registry import DeviceDefinition, DeviceRegistry, default_registry
from .state import (
    ENVIRONMENT_ID,
    AttributeDescriptor,
    AttributeSchema,
    DeviceState,
    Value,
    WorldSnapshot,
    coerce_value,
    split_path,
    value_matches,
)

logger = logging.getLogger(__name__)


class World:
    """
    One cockpit: a global environment plus every registered device at its current state.

    All registered devices are always mounted. Views that show the agent only some devices
    are projections of the full world (see ``snapshot(device_ids=...)``).

    Writes go through ``set``, which keeps the cross-device couplings intact:

    - linked attributes (the air conditioner's ``temperature``) read and write the environment
    - a channel flag set to true acquires the sound channel, set to false releases it
    - assigning ``environment.sound_channel`` hands the channel to that device and raises its flag
    """

    def __init__(self, registry: Optional[DeviceRegistry] = None, strict: bool = False):
        self.registry = registry or default_registry()
        self.environment = GlobalEnvironment(strict=strict)
        self._schema = self.registry.schema()
        self._values: Dict[str, Dict[str, Value]] = {}
        for device_id in self.registry.device_ids:
            if device_id == ENVIRONMENT_ID:
                continue
            definition = self.registry.device(device_id)
            self._values[device_id] = definition.preset_values("default")
            flag = definition.channel_flag
            if flag:
                self.environment.register_channel_holder(
                    device_id, partial(self._relinquish, device_id, flag)
                )

    def _relinquish(self, device_id: str, flag: str, new_owner: str) -> None:
        self._values[device_id][flag] = False
        logger.info("%s lost the sound channel to %s", device_id, new_owner)

    @property
    def device_ids(self) -> List[str]:
        """Registered devices, environment excluded."""
        return sorted(self._values)

    def definition(self, device_id: str) -> DeviceDefinition:
        return self.registry.device(device_id)

    # ------------------------------------------------------------------ schema

    def schema_for(self, path: str) -> AttributeSchema:
        """
        Raises:
            UnknownDeviceError: If the device is not registered
            StateViolationError: If the device has no such attribute
        """
        device_id, name = split_path(path)
        if device_id not in self._schema:
            raise UnknownDeviceError(device_id)
        try:
            return self._schema[device_id][name]
        except KeyError:
            raise StateViolationError(path, "unknown attribute") from None

    def has_path(self, path: str) -> bool:
        device_id, _, name = path.partition(".")
        return name in self._schema.get(device_id, {})

    # ------------------------------------------------------------------ access

    def get(self, path: str) -> Value:
        self.schema_for(path)
        device_id, name = split_path(path)
        if device_id == ENVIRONMENT_ID:
            return self.environment.get(name)
        attr = self.definition(device_id).attribute(name)
        if attr.linked:
            return self.environment.get(attr.linked)
        return self._values[device_id][name]

    def _coerce(self, schema: AttributeSchema, value: Value) -> Value:
        if value is None or value_matches(schema.type_tag, value):
            return value
        try:
            return coerce_value(schema.type_tag, value)
        except ValueError:
            return value

    def check(self, path: str, value: Value) -> Optional[str]:
        """Violation message for assigning ``value`` to ``path``, or ``None`` if it is legal."""
        problem = self._problem(path, value)
        return f"{path}: {problem}" if problem else None

    def _problem(self, path: str, value: Value) -> Optional[str]:
        if not self.has_path(path):
            return "unknown attribute"
        schema = self.schema_for(path)
        value = self._coerce(schema, value)
        device_id, name = split_path(path)
        if device_id == ENVIRONMENT_ID:
            problem = self.environment.check(name, value)
        else:
            attr = self.definition(device_id).attribute(name)
            if attr.linked:
                problem = self.environment.check(attr.linked, value)
            else:
                problem = schema.check(value)
        return problem

    def set(self, path: str, value: Value) -> None:
        """
        Assign one attribute through the setter layer.

        Raises:
            StateViolationError: If the path is unknown or the value breaks its invariants
        """
        problem = self._problem(path, value)
        if problem:
            raise StateViolationError(path, problem)
        value = self._coerce(self.schema_for(path), value)
        device_id, name = split_path(path)
        with self.environment.exclusive():
            if device_id == ENVIRONMENT_ID:
                self._set_environment(name, value)
                return
            attr = self.definition(device_id).attribute(name)
            if attr.linked:
                self.environment.set(attr.linked, value)
            elif attr.channel:
                if value:
                    self.environment.acquire_sound_channel(device_id)
                else:
                    self.environment.release_sound_channel(device_id)
                self._values[device_id][name] = value
            else:
                self._values[device_id][name] = value

    def _set_environment(self, name: str, value: Value) -> None:
        if name == "volume":
            self.environment.set_volume(VolumeCommand.absolute(value))
        elif name == "sound_channel":
            if value == NO_CHANNEL:
                self.environment.revoke_sound_channel()
            else:
                self.environment.acquire_sound_channel(value)
                self._values[value][self.definition(value).channel_flag] = True
        else:
            self.environment.set(name, value)

    # ------------------------------------------------------------------ snapshots

    def device_state(self, device_id: str) -> DeviceState:
        """
        Raises:
            UnknownDeviceError: If the device is not registered
        """
        if device_id == ENVIRONMENT_ID:
            return self.environment.environment_state()
        if device_id not in self._values:
            raise UnknownDeviceError(device_id)
        schema = self._schema[device_id]
        return DeviceState(
            device_id,
            {
                name: AttributeDescriptor(
                    name, self.get(f"{device_id}.{name}"), attr.type_tag, attr.description
                )
                for name, attr in schema.items()
            },
        )

    def snapshot(self, label: str = "", device_ids: Optional[Iterable[str]] = None) -> WorldSnapshot:
        """
        Capture the world, or a projection of it, as an immutable snapshot.

        The environment block is always included.

        Raises:
            UnknownDeviceError: If a requested device is not registered
        """
        wanted = self.device_ids if device_ids is None else sorted(set(device_ids) - {ENVIRONMENT_ID})
        return WorldSnapshot(
            environment=self.environment.environment_state(),
            devices={device_id: self.device_state(device_id) for device_id in wanted},
            timestamp_label=label,
        )

    def values(self) -> Dict[str, Value]:
        """Flat ``path -> value`` map over the whole world."""
        return self.snapshot().values()

    def restore(self, snapshot: WorldSnapshot) -> None:
        """
        Load attribute values from a snapshot. Devices the snapshot omits are left alone.

        The sound channel is assigned last, so the device named in the snapshot ends up
        owning it regardless of the flags the snapshot carries.
        """
        with self.environment.exclusive():
            self._set_environment("sound_channel", NO_CHANNEL)
            for path, value in snapshot.values().items():
                device_id, name = split_path(path)
                if path == f"{ENVIRONMENT_ID}.sound_channel":
                    continue
                if device_id != ENVIRONMENT_ID:
                    attr = self.definition(device_id).attribute(name)
                    if attr.channel or attr.linked:
                        continue
                self.set(path, value)
            self.set(f"{ENVIRONMENT_ID}.sound_channel", snapshot.environment.value("sound_channel"))

    def clone(self) -> "World":
        """Independent copy sharing only the immutable registry."""
        copy = World(self.registry, strict=self.environment.strict)
        copy.restore(self.snapshot())
        return copy

    def channel_owners(self) -> List[str]:
        """Devices whose channel flag is raised; never more than one."""
        owners = []
        for device_id in self.device_ids:
            flag = self.definition(device_id).channel_flag
            if flag and self._values[device_id][flag]:
                owners.append(device_id)
        return owners
