"""Chat-completion endpoint client.

Wire format (OpenAI-compatible):

    POST {url}/chat/completions
    Authorization: Bearer <key>           (only when a key is configured)
    {"model": ..., "messages": [{"role": ..., "content": ...}, ...], "temperature": 0.7}

    200 -> {"choices": [{"message": {"role": "assistant", "content": "..."}}], ...}

Transport errors, 429 and 5xx responses are retried with exponential backoff; other
statuses fail immediately.
"""

import logging
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence

import httpx

from .config import EndpointSettings
from .errors import EndpointError

logger = logging.getLogger(__name__)


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        if self.role in (Role.USER, Role.ASSISTANT) and not self.content.strip():
            raise ValueError(f"{self.role.value} message must not be empty")

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role.value, "content": self.content}


class RateLimiter:
    """Sliding-window limiter: at most ``max_requests`` per ``time_window`` seconds, across threads."""

    def __init__(
        self,
        max_requests: int = 60,
        time_window: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.max_requests = max_requests
        self.time_window = time_window
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self.requests: List[float] = []

    def wait_if_needed(self) -> float:
        """Block until a request slot is free. Returns the time spent waiting."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self.requests = [t for t in self.requests if now - t < self.time_window]
                if len(self.requests) < self.max_requests:
                    self.requests.append(now)
                    return waited
                wait_time = self.time_window - (now - self.requests[0])
            logger.debug("rate limit reached, waiting %.2fs", wait_time)
            self._sleep(wait_time)
            waited += wait_time


def _retryable(status_code: int) -> bool:
    return status_code == 429 or status_code >= 500


class ChatEndpoint:
    """
    Thread-safe client for one chat-completion endpoint.

    Args:
        settings: Endpoint settings; the key is read from ``settings.api_key_env``
        transport: Optional httpx transport (tests pass ``httpx.MockTransport``)
        sleep: Backoff sleep, replaceable in tests
    """

    def __init__(
        self,
        settings: EndpointSettings,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.settings = settings
        self.rate_limiter = RateLimiter(settings.max_requests, settings.time_window, sleep=sleep)
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        api_key = settings.api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.client = httpx.Client(
            base_url=settings.url.rstrip("/"),
            headers=headers,
            timeout=settings.timeout,
            transport=transport,
        )

    def complete(self, messages: Sequence[ChatMessage], temperature: float = 0.7) -> str:
        """
        Send one chat request and return the assistant's reply text.

        Raises:
            EndpointError: After the retry budget is spent, or on a non-retryable response
        """
        payload = {
            "model": self.settings.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": temperature,
        }
        attempts = self.settings.max_retries + 1
        last_error: Optional[EndpointError] = None
        for attempt in range(attempts):
            if attempt:
                delay = min(2 ** (attempt - 1), 30)
                logger.warning(
                    "retrying endpoint request (%d/%d) in %ss: %s",
                    attempt, self.settings.max_retries, delay, last_error,
                )
                self._sleep(delay)
            self.rate_limiter.wait_if_needed()
            try:
                response = self.client.post("/chat/completions", json=payload)
            except httpx.RequestError as e:
                last_error = EndpointError(0, f"Network error: {e}")
                continue
            if response.status_code == 200:
                return self._extract(response)
            error = EndpointError(response.status_code, self._describe(response), self._body(response))
            if not _retryable(response.status_code):
                raise error
            last_error = error
        assert last_error is not None
        raise last_error

    @staticmethod
    def _body(response: httpx.Response) -> Optional[Dict[str, Any]]:
        try:
            data = response.json()
        except ValueError:
            return None
        return data if isinstance(data, dict) else None

    @classmethod
    def _describe(cls, response: httpx.Response) -> str:
        if response.status_code == 401:
            return "Unauthorized - check the API key environment variable"
        if response.status_code == 429:
            return "Rate limit exceeded"
        body = cls._body(response) or {}
        error = body.get("error")
        if isinstance(error, dict) and error.get("message"):
            return str(error["message"])
        return response.reason_phrase or "request failed"

    @classmethod
    def _extract(cls, response: httpx.Response) -> str:
        body = cls._body(response)
        try:
            content = body["choices"][0]["message"]["content"]  # type: ignore[index]
        except (TypeError, KeyError, IndexError):
            raise EndpointError(200, "response has no choices[0].message.content", body) from None
        if not isinstance(content, str):
            raise EndpointError(200, "message content is not text", body)
        return content

    def close(self) -> None:
        self.client.close()

    def __enter__(self) -> "ChatEndpoint":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()
