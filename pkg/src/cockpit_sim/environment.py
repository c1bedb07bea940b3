"""Global cockpit environment shared by every device in one world."""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional, Tuple

from .errors import ChannelError, StateViolationError, VolumeRangeError, WorldBusyError
from .state import ENVIRONMENT_ID, AttributeDescriptor, AttributeSchema, DeviceState, TypeTag, Value

logger = logging.getLogger(__name__)

NO_CHANNEL = "none"
VOLUME_MIN = 0
VOLUME_MAX = 100

# Named set levels and relative steps for volume-like commands
SET_DEGREES: Dict[str, int] = {"max": 100, "high": 75, "medium": 50, "low": 25, "min": 0}
DELTA_DEGREES: Dict[str, int] = {"large": 20, "little": 10, "tiny": 5}

SPEAKER_ZONES = ("driver's seat", "passenger seat", "rear left", "rear right", "all")

ENVIRONMENT_SCHEMA: Dict[str, AttributeSchema] = {
    "volume": AttributeSchema(
        "volume", TypeTag.INTEGER, "System audio volume (0-100)", 50,
        minimum=VOLUME_MIN, maximum=VOLUME_MAX,
    ),
    "sound_channel": AttributeSchema(
        "sound_channel", TypeTag.STRING,
        "Device currently holding the audio channel, or 'none'", NO_CHANNEL,
    ),
    "temperature": AttributeSchema(
        "temperature", TypeTag.REAL, "Cabin temperature in degrees Celsius (16-32)", 22.0,
        minimum=16, maximum=32,
    ),
    "speaker": AttributeSchema(
        "speaker", TypeTag.STRING, "Speaker zone receiving audio", "driver's seat",
        allowed_values=SPEAKER_ZONES,
    ),
    "unit_system": AttributeSchema(
        "unit_system", TypeTag.STRING, "Measurement units shown on displays", "metric",
        allowed_values=("metric", "imperial"),
    ),
    "time_format": AttributeSchema(
        "time_format", TypeTag.STRING, "Clock display format", "24h",
        allowed_values=("12h", "24h"),
    ),
}

RelinquishCallback = Callable[[str], None]


@dataclass(frozen=True)
class AcquireResult:
    granted: bool
    previous_owner: str


@dataclass(frozen=True)
class VolumeCommand:
    """
    A volume change request.

    Exactly one of ``value`` (absolute), ``delta`` (signed step) or ``degree`` is set.
    Set degrees (max/high/medium/low/min) are absolute levels; delta degrees
    (large/little/tiny) are steps signed by ``direction``.
    """

    value: Optional[int] = None
    delta: Optional[int] = None
    degree: Optional[str] = None
    direction: int = 1

    def __post_init__(self) -> None:
        given = [x for x in (self.value, self.delta, self.degree) if x is not None]
        if len(given) != 1:
            raise ValueError("VolumeCommand needs exactly one of value, delta, degree")
        if self.degree is not None and self.degree not in SET_DEGREES and self.degree not in DELTA_DEGREES:
            raise ValueError(f"Unknown degree {self.degree!r}")

    @classmethod
    def absolute(cls, value: int) -> "VolumeCommand":
        return cls(value=value)

    @classmethod
    def step(cls, delta: int) -> "VolumeCommand":
        return cls(delta=delta)

    @classmethod
    def named(cls, degree: str, direction: int = 1) -> "VolumeCommand":
        return cls(degree=degree, direction=direction)

    @property
    def is_absolute(self) -> bool:
        return self.value is not None or (self.degree is not None and self.degree in SET_DEGREES)

    def target(self, current: int) -> int:
        """Unclamped target level relative to ``current``."""
        if self.value is not None:
            return self.value
        if self.delta is not None:
            return current + self.delta
        if self.degree in SET_DEGREES:
            return SET_DEGREES[self.degree]
        return current + self.direction * DELTA_DEGREES[self.degree]


def resolve_level(
    command: VolumeCommand, current: int, lower: int = VOLUME_MIN, upper: int = VOLUME_MAX
) -> Tuple[int, bool]:
    """Return the clamped target for a command and whether clamping happened."""
    target = command.target(current)
    clamped = min(max(target, lower), upper)
    return clamped, clamped != target


class GlobalEnvironment:
    """
    Shared, contended cockpit attributes for one world.

    One instance exists per world rather than per process so that worlds evaluated in
    parallel stay isolated. Devices never keep copies of these attributes; they read
    and write through this object.

    Only one logical writer may mutate a world at a time. Mutators run inside
    ``exclusive()``, which raises ``WorldBusyError`` when another thread already holds it.
    """

    def __init__(self, strict: bool = False):
        self.strict = strict
        self._values: Dict[str, Value] = {
            name: attr.default for name, attr in ENVIRONMENT_SCHEMA.items()
        }
        self._holders: Dict[str, RelinquishCallback] = {}
        self._lock = threading.RLock()

    @contextmanager
    def exclusive(self) -> Iterator[None]:
        """Hold the single-writer contract for the duration of the block."""
        if not self._lock.acquire(blocking=False):
            raise WorldBusyError("world is being mutated by another thread")
        try:
            yield
        finally:
            self._lock.release()

    # ------------------------------------------------------------------ channel

    def register_channel_holder(self, device_id: str, on_relinquish: RelinquishCallback) -> None:
        """Allow ``device_id`` to hold the sound channel; ``on_relinquish`` fires when it loses it."""
        self._holders[device_id] = on_relinquish

    @property
    def channel_holders(self) -> Tuple[str, ...]:
        return tuple(sorted(self._holders))

    @property
    def sound_channel(self) -> str:
        return self._values["sound_channel"]

    def acquire_sound_channel(self, requester: str) -> AcquireResult:
        """
        Make ``requester`` the sole owner of the sound channel.

        The previous owner, if any, is told through its relinquish callback so it can
        update its own state.

        Raises:
            ChannelError: If ``requester`` is not a registered channel holder
        """
        if requester not in self._holders:
            raise ChannelError(f"{requester!r} is not registered for the sound channel")
        with self.exclusive():
            previous = self._values["sound_channel"]
            if previous == requester:
                return AcquireResult(granted=True, previous_owner=requester)
            self._values["sound_channel"] = requester
            logger.debug("sound channel %s -> %s", previous, requester)
            if previous != NO_CHANNEL:
                self._holders[previous](requester)
            return AcquireResult(granted=True, previous_owner=previous)

    def release_sound_channel(self, holder: str) -> bool:
        """Give the channel up if ``holder`` owns it. Returns whether it did."""
        with self.exclusive():
            if self._values["sound_channel"] != holder:
                return False
            self._values["sound_channel"] = NO_CHANNEL
            logger.debug("sound channel released by %s", holder)
            return True

    def revoke_sound_channel(self) -> str:
        """Take the channel from its owner, notifying it. Returns the former owner."""
        with self.exclusive():
            previous = self._values["sound_channel"]
            if previous != NO_CHANNEL:
                self._values["sound_channel"] = NO_CHANNEL
                self._holders[previous](NO_CHANNEL)
            return previous

    # ------------------------------------------------------------------ volume

    @property
    def volume(self) -> int:
        return self._values["volume"]

    def preview_volume(self, command: VolumeCommand) -> int:
        """
        Compute the level ``set_volume`` would produce, without changing anything.

        Raises:
            VolumeRangeError: If strict mode is on and an absolute value is out of range
        """
        level, clamped = resolve_level(command, self.volume)
        if clamped and command.value is not None and self.strict:
            raise VolumeRangeError(f"volume {command.value} outside [{VOLUME_MIN}, {VOLUME_MAX}]")
        return level

    def set_volume(self, command: VolumeCommand) -> int:
        """
        Apply a volume command, clamping to [0, 100].

        Returns:
            The new volume
        """
        level = self.preview_volume(command)
        if command.value is not None and level != command.value:
            logger.warning("volume %s clamped to %s", command.value, level)
        with self.exclusive():
            self._values["volume"] = level
        return level

    # ------------------------------------------------------------------ generic access

    def get(self, name: str) -> Value:
        return self._values[name]

    def check(self, name: str, value: Value) -> Optional[str]:
        """Violation message for assigning ``value`` to ``name``, or ``None``."""
        if name not in ENVIRONMENT_SCHEMA:
            return "unknown environment attribute"
        if name == "sound_channel":
            if value != NO_CHANNEL and value not in self._holders:
                return f"{value!r} cannot hold the sound channel"
        return ENVIRONMENT_SCHEMA[name].check(value)

    def set(self, name: str, value: Value) -> None:
        """
        Assign an environment attribute directly.

        Assigning ``sound_channel`` goes through channel arbitration: ``"none"`` revokes the
        channel and a device id acquires it on that device's behalf.

        Raises:
            StateViolationError: If the value breaks the attribute's invariants
        """
        problem = self.check(name, value)
        if problem:
            raise StateViolationError(f"{ENVIRONMENT_ID}.{name}", problem)
        if name == "sound_channel":
            if value == NO_CHANNEL:
                self.revoke_sound_channel()
            else:
                self.acquire_sound_channel(value)
            return
        with self.exclusive():
            self._values[name] = value

    def environment_state(self) -> DeviceState:
        """Render the environment as a device block."""
        return DeviceState(
            ENVIRONMENT_ID,
            {
                name: AttributeDescriptor(name, self._values[name], attr.type_tag, attr.description)
                for name, attr in ENVIRONMENT_SCHEMA.items()
            },
        )
