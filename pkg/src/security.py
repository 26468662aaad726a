"""
Security operator: flat capability checks and output validation.

Denials and violations are returned as values; callers decide whether to raise.
"""
import time
from fnmatch import fnmatchcase
from typing import Any, Callable, Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

Action = Literal["read", "write", "invoke"]


class Capability(BaseModel):
    model_config = ConfigDict(frozen=True)

    principal: str
    resource_pattern: str
    actions: FrozenSet[Action]
    expiry: Optional[float] = None  # unix timestamp

    @field_validator("actions")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("capability needs at least one action")
        return v


class Allow(BaseModel):
    model_config = ConfigDict(frozen=True)

    allowed: Literal[True] = True


class Deny(BaseModel):
    model_config = ConfigDict(frozen=True)

    allowed: Literal[False] = False
    reason: Literal["principal", "pattern", "action", "expiry"]


Decision = Union[Allow, Deny]
_CHECKS = ("principal", "pattern", "action", "expiry")


def authorize(cap_set: Sequence[Capability], principal: str, resource_id: str, action: str,
              now: Optional[float] = None) -> Decision:
    """Allow iff one capability passes every check. A denial names the furthest check reached."""
    now = time.time() if now is None else now
    furthest = 0
    for cap in cap_set:
        if cap.principal != principal:
            continue
        furthest = max(furthest, 1)
        if not fnmatchcase(resource_id, cap.resource_pattern):
            continue
        furthest = max(furthest, 2)
        if action not in cap.actions:
            continue
        furthest = max(furthest, 3)
        if cap.expiry is not None and cap.expiry <= now:
            continue
        return Allow()
    return Deny(reason=_CHECKS[furthest])


# --- output validation --------------------------------------------------------

class OutputViolation(BaseModel):
    model_config = ConfigDict(frozen=True)

    code: str  # missing_field | type | enum | unknown_character | range | custom rule codes
    field: Optional[str] = None
    message: str


Rule = Callable[[dict, dict], List[OutputViolation]]

_TYPES: Dict[str, Any] = {"string": str, "integer": int, "number": (int, float), "boolean": bool,
                          "object": dict, "array": list}


class OutputSchema(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    fields: Dict[str, str] = Field(default_factory=dict)  # field -> type name
    required: Tuple[str, ...] = ()
    enums: Dict[str, Tuple[Any, ...]] = Field(default_factory=dict)
    rules: Tuple[Rule, ...] = ()


def validate_output(schema: OutputSchema, payload: dict, env: Optional[dict] = None) -> List[OutputViolation]:
    """Every violation of the payload; an empty list means ok."""
    env = env or {}
    violations: List[OutputViolation] = []
    for name in schema.required:
        value = payload.get(name)
        if value is None or (isinstance(value, str) and not value.strip()):
            violations.append(OutputViolation(code="missing_field", field=name, message=f"'{name}' is missing or empty"))
    for name, type_name in schema.fields.items():
        if name in payload and payload[name] is not None:
            expected = _TYPES.get(type_name, object)
            if not isinstance(payload[name], expected) or (type_name != "boolean" and isinstance(payload[name], bool)):
                violations.append(OutputViolation(code="type", field=name, message=f"'{name}' is not {type_name}"))
    for name, allowed in schema.enums.items():
        if name in payload and payload[name] not in allowed:
            violations.append(OutputViolation(code="enum", field=name,
                                              message=f"'{name}'={payload[name]!r} not in {list(allowed)}"))
    for rule in schema.rules:
        violations.extend(rule(payload, env))
    return violations


# rule factories

def require_field(name: str) -> Rule:
    def rule(payload: dict, env: dict) -> List[OutputViolation]:
        if payload.get(name) in (None, "", [], {}):
            return [OutputViolation(code="missing_field", field=name, message=f"'{name}' is required")]
        return []
    return rule


def enum_member(name: str, allowed: Sequence[Any]) -> Rule:
    def rule(payload: dict, env: dict) -> List[OutputViolation]:
        if name in payload and payload[name] not in allowed:
            return [OutputViolation(code="enum", field=name, message=f"'{name}'={payload[name]!r} not allowed")]
        return []
    return rule


def names_within(name: str, env_key: str = "character_names") -> Rule:
    """Every name in payload[name] must belong to env[env_key]."""
    def rule(payload: dict, env: dict) -> List[OutputViolation]:
        known = {n.lower() for n in env.get(env_key, [])}
        return [
            OutputViolation(code="unknown_character", field=name, message=f"'{n}' is not in the environment")
            for n in payload.get(name) or []
            if n.lower() not in known
        ]
    return rule


def numeric_range(name: str, low: Optional[float] = None, high: Optional[float] = None) -> Rule:
    def rule(payload: dict, env: dict) -> List[OutputViolation]:
        value = payload.get(name)
        if not isinstance(value, (int, float)):
            return []
        if (low is not None and value < low) or (high is not None and value > high):
            return [OutputViolation(code="range", field=name, message=f"'{name}'={value} outside [{low}, {high}]")]
        return []
    return rule
