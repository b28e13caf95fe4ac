from dataclasses import dataclass
from typing import Any, Dict, Optional
import functools
import math

import numpy as np
from mcp.server.fastmcp import FastMCP


def plm_mcp_tool(mcp: FastMCP):
    """
    Decorator to register a PLM inference tool.

    The wrapped function's result is made JSON-safe (ToolError flattened,
    non-finite floats as null) before it is handed to the MCP server.

    Example:
        @plm_mcp_tool(mcp)
        def fit(file_path: str) -> dict:
            ...
    """
    def decorator(func):

        @mcp.tool()
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            return transform_tool_result(func(*args, **kwargs))
        return wrapper
    return decorator


def json_safe(value: Any) -> Any:
    """Plain-Python copy of ``value`` with NaN and infinities replaced by None."""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [json_safe(v) for v in value]
    return value


def transform_tool_result(result: Any) -> Any:
    if isinstance(result, ToolError):
        return result.to_dict()
    return json_safe(result)


@dataclass
class ToolError:
    """
    Error value returned by the tool surface instead of raising.

    Attributes:
        status: Always "error" for failures.
        message: "<action> failed: [<stage>] <reason>".
        info: Merged into the flattened dictionary: the failing stage, the
            exit status the command-line tool would use, and the error's own
            context (row, column, fold, ...).
    """
    status: str
    message: str
    info: Optional[Dict[str, Any]] = None

    @classmethod
    def from_exception(cls, e: Exception, action: str) -> "ToolError":
        # Estimation failures exit 2 on the command line; bad arguments exit 1.
        estimation = hasattr(e, "stage")
        stage = getattr(e, "stage", None)
        context = (getattr(e, "info", None) or {}) if estimation else {}
        info: Dict[str, Any] = {"exit_code": 2 if estimation or isinstance(e, OSError) else 1}
        if stage is not None:
            info["stage"] = stage
        info.update({k: v for k, v in context.items() if k not in ("status", "message")})
        return cls(status="error", message=f"{action} failed: {e}", info=info)

    def to_dict(self) -> Dict[str, Any]:
        base: Dict[str, Any] = {"status": self.status, "message": self.message}
        base.update(self.info or {})
        return json_safe(base)
