"""Run configuration: endpoint settings, session settings and the run manifest."""

import json
import os
from enum import Enum
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

DEFAULT_API_KEY_ENV = "COCKPIT_API_KEY"
ENDPOINT_URL_ENV = "COCKPIT_ENDPOINT_URL"
MODEL_ENV = "COCKPIT_MODEL"
DISTRACTOR_COUNTS = (0, 2, 4, 6)
DEFAULT_REFLECTION_BUDGET = 3


class Mode(str, Enum):
    FC = "fc"
    SFC = "sfc"
    HYBRID = "hybrid"


class Strategy(str, Enum):
    REACT = "react"
    REACT_REFLECTION = "react_reflection"
    REACT_NO_EXAMPLES = "react_no_examples"
    REACT_PLAN = "react_plan"


STRATEGY_ALIASES = {
    "react": Strategy.REACT,
    "reflect": Strategy.REACT_REFLECTION,
    "noexamples": Strategy.REACT_NO_EXAMPLES,
    "plan": Strategy.REACT_PLAN,
}


class EndpointSettings(BaseModel):
    """Chat-completion endpoint. The API key is only ever read from ``api_key_env``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    url: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    max_requests: int = Field(default=60, ge=1)
    time_window: float = Field(default=60.0, gt=0)

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) or None

    @classmethod
    def from_env(cls) -> Optional["EndpointSettings"]:
        url = os.environ.get(ENDPOINT_URL_ENV)
        model = os.environ.get(MODEL_ENV)
        if not url or not model:
            return None
        return cls(url=url, model=model)


class SessionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Mode = Mode.FC
    strategy: Strategy = Strategy.REACT
    temperature: float = Field(default=0.7, ge=0.0, le=2.0)
    max_turns_per_query: int = Field(default=5, ge=1)
    reflection_budget: Optional[int] = Field(default=None, ge=0)
    distractor_count: int = 0
    # re-asks after an unparseable action before the turn fails
    action_retries: int = Field(default=2, ge=0)

    @field_validator("distractor_count")
    @classmethod
    def _check_distractors(cls, value: int) -> int:
        if value not in DISTRACTOR_COUNTS:
            raise ValueError(f"distractor_count must be one of {DISTRACTOR_COUNTS}")
        return value

    @model_validator(mode="after")
    def _default_budget(self) -> "SessionConfig":
        if self.reflection_budget is None:
            budget = DEFAULT_REFLECTION_BUDGET if self.strategy == Strategy.REACT_REFLECTION else 0
            object.__setattr__(self, "reflection_budget", budget)
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    endpoint: Optional[EndpointSettings] = None
    session: SessionConfig = SessionConfig()
    jobs: int = Field(default=1, ge=1)


class RunManifest(BaseModel):
    """What one ``run`` invocation evaluates and where it writes."""

    model_config = ConfigDict(frozen=True)

    scenarios: List[str]
    out_dir: Path
    config_path: Optional[Path] = None
    agent: str = "endpoint"
    mode: Optional[Mode] = None
    strategy: Optional[Strategy] = None
    distractors: Optional[int] = None
    jobs: Optional[int] = None

    @field_validator("scenarios")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one scenario path or pattern is required")
        return value

    @field_validator("agent")
    @classmethod
    def _known_agent(cls, value: str) -> str:
        if value not in ("endpoint", "oracle", "null"):
            raise ValueError(f"unknown agent {value!r}")
        return value


def parse_strategy(name: str) -> Strategy:
    """
    Raises:
        ConfigError: If the name is neither a strategy nor a CLI alias
    """
    if name in STRATEGY_ALIASES:
        return STRATEGY_ALIASES[name]
    try:
        return Strategy(name)
    except ValueError:
        raise ConfigError(f"unknown strategy {name!r}") from None


def load_environment() -> None:
    """Load ``.env`` from the working directory without overriding the real environment."""
    load_dotenv(override=False)


def load_config(path: Optional[Path] = None) -> RunConfig:
    """
    Read a JSON run configuration. Without a file, the endpoint comes from the environment.

    Raises:
        ConfigError: If the file cannot be read or fails validation
    """
    if path is None:
        return RunConfig(endpoint=EndpointSettings.from_env())
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    if config.endpoint is None:
        config = config.model_copy(update={"endpoint": EndpointSettings.from_env()})
    return config


def apply_overrides(config: RunConfig, manifest: RunManifest) -> RunConfig:
    """
    CLI flags win over file values.

    Raises:
        ConfigError: If an override is invalid
    """
    session = config.session.model_dump()
    if manifest.mode is not None:
        session["mode"] = manifest.mode
    if manifest.strategy is not None:
        session["strategy"] = manifest.strategy
        if config.session.strategy != manifest.strategy:
            session["reflection_budget"] = None
    if manifest.distractors is not None:
        session["distractor_count"] = manifest.distractors
    try:
        new_session = SessionConfig.model_validate(session)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    jobs = manifest.jobs if manifest.jobs is not None else config.jobs
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return RunConfig(endpoint=config.endpoint, session=new_session, jobs=jobs)
