#!/usr/bin/env python
import json
from typing import Any, List, Tuple


class FieldError(ValueError):
    """A dataclass field holds a value outside of its contract"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field} {message}")
        self.field = field
        self.message = message


def check_field(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise FieldError(field, message)


def to_value(arg: str) -> Any:
    "JSON-decode the argument, falling back to the raw string like from_prefixed_env"
    try:
        return json.loads(arg)
    except json.JSONDecodeError:
        return arg


def to_floats(arg: str) -> List[float]:
    return [float(part) for part in arg.split(",") if part.strip()]


def dotted_to_key(name: str) -> str:
    # link.owd_ms -> LINK_OWD_MS, cca.copa.delta -> CCA_COPA_DELTA
    return name.replace(".", "_").replace("-", "_").upper()


def parse_sweep(arg: str) -> Tuple[str, List[Any]]:
    """Parse `controller.P_ms=20,33,66` into the config key and its values"""
    if "=" not in arg:
        raise ValueError(f"sweep '{arg}' must look like key=v1,v2,...")
    name, values = arg.split("=", 1)
    parsed = [to_value(value.strip()) for value in values.split(",") if value.strip()]
    if not parsed:
        raise ValueError(f"sweep '{arg}' has no values")
    return dotted_to_key(name.strip()), parsed
