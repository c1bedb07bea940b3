"""Exception hierarchy for the cockpit simulator."""

from typing import Any, Dict, Optional


class CockpitError(Exception):
    """Base exception for all cockpit simulator errors."""


class SnapshotSyntaxError(CockpitError):
    """Snapshot document is not well-formed."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class SnapshotSchemaError(CockpitError):
    """Snapshot document violates the world schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DiffError(CockpitError):
    """Snapshots cannot be compared."""


class TrendError(CockpitError):
    """Trend requested for non-numeric values."""


class ChannelError(CockpitError):
    """Sound channel request from a device that cannot hold it."""


class VolumeRangeError(CockpitError):
    """Absolute volume outside [0, 100] while strict mode is on."""


class WorldBusyError(CockpitError):
    """A second writer tried to enter a world that is already being mutated."""


class DefinitionError(CockpitError):
    """A device definition is inconsistent."""


class UnknownDeviceError(CockpitError):
    """Device id is not registered."""

    def __init__(self, device_id: str):
        self.device_id = device_id
        super().__init__(f"Unknown device: {device_id!r}")


class UnknownApiError(CockpitError):
    """API name is not registered."""

    def __init__(self, api_name: str):
        self.api_name = api_name
        super().__init__(f"Unknown API: {api_name!r}")


class UnknownPresetError(CockpitError):
    """Init preset is not declared for the device."""

    def __init__(self, device_id: str, preset_name: str):
        self.device_id = device_id
        self.preset_name = preset_name
        super().__init__(f"Device {device_id!r} has no init preset {preset_name!r}")


class ScenarioParseError(CockpitError):
    """Scenario DSL text is malformed."""


class TruthExecutionError(CockpitError):
    """A scenario init or truth call failed while building the truth trace."""

    def __init__(self, message: str, turn_index: Optional[int] = None, result: Any = None):
        self.turn_index = turn_index
        self.result = result
        super().__init__(message)


class NoOpTurnError(TruthExecutionError):
    """A scenario turn produced no meaningful modification of the system state."""


class ActionParseError(CockpitError):
    """Agent reply does not contain a usable action."""


class ModeMismatchError(ActionParseError):
    """Agent produced an action for a different execution paradigm."""


class ScopeError(CockpitError):
    """Call targets a device outside the hybrid-mode selection."""


class PatchError(CockpitError):
    """State patch is structurally invalid."""


class MetricError(CockpitError):
    """Metric inputs are invalid."""


class ConfigError(CockpitError):
    """Run or session configuration is invalid."""


class EndpointError(CockpitError):
    """Chat endpoint returned an error or could not be reached."""

    def __init__(self, status_code: int, message: str, response: Optional[Dict[str, Any]] = None):
        self.status_code = status_code
        self.message = message
        self.response = response
        super().__init__(f"Endpoint Error {status_code}: {message}")


class StateViolationError(CockpitError):
    """Assignment would break an attribute's type, range or invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
