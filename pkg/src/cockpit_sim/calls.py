"""API call values and the ``api_name(arg=value, ...)`` call-expression syntax.

Call expressions are parsed with ``ast`` and only literal arguments are accepted, so
nothing an agent writes is ever evaluated. Literals may be spelled the JSON way
(``true``/``false``/``null``) or the Python way (``True``/``False``/``None``).
"""

import ast
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .errors import ActionParseError

_NAMED_LITERALS = {
    "true": True,
    "false": False,
    "null": None,
    "none": None,
    "True": True,
    "False": False,
    "None": None,
}


@dataclass(frozen=True)
class ApiCall:
    api_name: str
    args: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "args", MappingProxyType(dict(self.args)))

    def render(self) -> str:
        return render_call(self)

    def to_dict(self) -> Dict[str, Any]:
        return {"api_name": self.api_name, "args": dict(self.args)}

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class ApiResult:
    """
    Outcome of one API invocation.

    ``touched_paths`` lists the attributes the call itself changed (its own device and
    the environment). Devices displaced from the sound channel as a consequence are
    listed separately in ``side_effects``. A failed call touches nothing.
    """

    success: bool
    message: str
    payload: Optional[Any] = None
    touched_paths: Tuple[str, ...] = ()
    side_effects: Tuple[str, ...] = ()
    api_name: str = ""

    def __post_init__(self) -> None:
        if not self.success and (self.touched_paths or self.side_effects):
            raise ValueError("failed calls must not report mutations")

    @classmethod
    def failure(cls, api_name: str, message: str) -> "ApiResult":
        return cls(success=False, message=message, api_name=api_name)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "api": self.api_name,
            "success": self.success,
            "message": self.message,
        }
        if self.payload is not None:
            data["payload"] = self.payload
        if self.touched_paths:
            data["touched_paths"] = list(self.touched_paths)
        if self.side_effects:
            data["side_effects"] = list(self.side_effects)
        return data


def format_literal(value: Any) -> str:
    """Render a scalar or list argument in call syntax."""
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_literal(item) for item in value) + "]"
    return json.dumps(value, ensure_ascii=False)


def render_call(call: ApiCall) -> str:
    args = ", ".join(f"{key}={format_literal(value)}" for key, value in call.args.items())
    return f"{call.api_name}({args})"


def _literal(node: ast.AST, source: str) -> Any:
    if isinstance(node, ast.Constant) and isinstance(node.value, (str, int, float, bool, type(None))):
        return node.value
    if isinstance(node, ast.Name) and node.id in _NAMED_LITERALS:
        return _NAMED_LITERALS[node.id]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        operand = _literal(node.operand, source)
        if isinstance(operand, (int, float)) and not isinstance(operand, bool):
            return -operand if isinstance(node.op, ast.USub) else operand
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_literal(item, source) for item in node.elts]
    segment = ast.get_source_segment(source, node) or type(node).__name__
    raise ActionParseError(f"argument must be a literal, got {segment!r}")


def _call_from_node(node: ast.AST, source: str) -> ApiCall:
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        segment = ast.get_source_segment(source, node) or source
        raise ActionParseError(f"expected api_name(arg=value, ...), got {segment.strip()!r}")
    if node.args:
        raise ActionParseError(f"{node.func.id}: arguments must be passed as name=value")
    args: Dict[str, Any] = {}
    for keyword in node.keywords:
        if keyword.arg is None:
            raise ActionParseError(f"{node.func.id}: ** arguments are not allowed")
        if keyword.arg in args:
            raise ActionParseError(f"{node.func.id}: duplicate argument {keyword.arg!r}")
        args[keyword.arg] = _literal(keyword.value, source)
    return ApiCall(node.func.id, args)


def _parse_expression(text: str) -> ast.AST:
    try:
        return ast.parse(text.strip(), mode="eval").body
    except SyntaxError as e:
        raise ActionParseError(f"invalid call syntax: {e.msg} in {text.strip()!r}") from e


def parse_call(text: str) -> ApiCall:
    """
    Parse one call expression.

    Raises:
        ActionParseError: If the text is not a single call with literal keyword arguments
    """
    return _call_from_node(_parse_expression(text), text)


def parse_call_list(text: str) -> List[ApiCall]:
    """
    Parse a bracketed list ``[call, call]`` or one call per line.

    Blank lines and ``#`` comment lines are skipped.
    """
    stripped = text.strip()
    if stripped.startswith("["):
        node = _parse_expression(stripped)
        if not isinstance(node, ast.List):
            raise ActionParseError("expected a list of calls")
        return [_call_from_node(item, stripped) for item in node.elts]
    calls = []
    for line in stripped.splitlines():
        line = line.strip().rstrip(";")
        if not line or line.startswith("#"):
            continue
        calls.append(parse_call(line))
    return calls


def parse_literal(text: str) -> Any:
    """Parse a single literal (used for bare values in the action grammar)."""
    node = _parse_expression(text)
    return _literal(node, text)
