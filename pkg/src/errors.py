"""
Exception hierarchy for HAWK.

Every error carries an ``exit_code`` used by the CLI:
1 = domain failure, 2 = usage error, 3 = environment error.
"""
from typing import List, Optional, Sequence


class HawkError(Exception):
    exit_code = 1


class UsageError(HawkError):
    exit_code = 2


# --- workflow model / user layer -------------------------------------------

class UnrecognizedTaskKind(HawkError):
    pass


class MalformedOption(HawkError):
    def __init__(self, option: str, expected: str, value: str):
        super().__init__(f"option '{option}' expected {expected}, got {value!r}")
        self.option = option
        self.expected = expected
        self.value = value


class TemplateNotFound(HawkError):
    pass


class UnresolvedPlaceholder(HawkError):
    def __init__(self, names: Sequence[str]):
        super().__init__(f"unresolved placeholders: {', '.join(sorted(names))}")
        self.names = sorted(names)


class InvalidWorkflowSpec(HawkError):
    """Raised when a spec file cannot be parsed (unknown keys, bad types)."""


# --- workflow engine --------------------------------------------------------

class CyclicSpec(HawkError):
    def __init__(self, cycle: Sequence[str]):
        super().__init__(f"dependency cycle: {' -> '.join(cycle)}")
        self.cycle = list(cycle)


class DispatchUnresolvable(HawkError):
    def __init__(self, operator_kind: str):
        super().__init__(f"no operator registered for kind '{operator_kind}'")
        self.operator_kind = operator_kind


# --- operator layer ---------------------------------------------------------

class KeyNotFound(HawkError):
    pass


class InvalidKey(HawkError):
    pass


class KeyExists(HawkError):
    pass


class VersionNotFound(HawkError):
    pass


class StaleParent(HawkError):
    def __init__(self, key: str, parent: str, head: str):
        super().__init__(f"stale parent {parent} for '{key}' (head is {head})")
        self.key = key
        self.parent = parent
        self.head = head


class NoAgentFound(HawkError):
    pass


class CapabilityDenied(HawkError):
    def __init__(self, principal: str, resource_id: str, action: str, reason: str):
        super().__init__(f"{principal} may not {action} {resource_id}: {reason}")
        self.principal = principal
        self.resource_id = resource_id
        self.action = action
        self.reason = reason


class OperatorTimeout(HawkError):
    pass


class UnparseableTrace(HawkError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


# --- agent registry ---------------------------------------------------------

class InvalidSpec(HawkError):
    def __init__(self, violations: Sequence[str]):
        super().__init__(f"invalid agent specification: {'; '.join(violations)}")
        self.violations = list(violations)


class DuplicateAgent(HawkError):
    pass


class UnknownAgent(HawkError):
    pass


class EndpointUnreachable(HawkError):
    exit_code = 3


class LifecycleError(HawkError):
    pass


# --- resource layer ---------------------------------------------------------

class NoProvider(HawkError):
    exit_code = 3


class AuthMissing(HawkError):
    exit_code = 3


class BackendError(HawkError):
    exit_code = 3

    def __init__(self, message: str, error_class: str = "http", retriable: bool = False):
        super().__init__(message)
        self.error_class = error_class
        self.retriable = retriable


class RateLimited(BackendError):
    def __init__(self, message: str = "rate limited"):
        super().__init__(message, error_class="http", retriable=True)


class NoParseableAnswers(HawkError):
    pass


class SchemaMismatch(HawkError):
    def __init__(self, missing: List[str]):
        super().__init__(f"tool arguments do not match schema: {', '.join(missing)}")
        self.missing = missing


class ToolError(HawkError):
    def __init__(self, message: str, payload: Optional[dict] = None):
        super().__init__(message)
        self.payload = payload or {}


# --- dnf decision -----------------------------------------------------------

class NonFiniteInput(HawkError):
    pass


class NoSamples(HawkError):
    pass


class DimensionMismatch(HawkError):
    pass


class EmptyDataset(HawkError):
    pass


class NoCandidates(HawkError):
    pass


# --- creagentive ------------------------------------------------------------

class MissingFile(HawkError):
    exit_code = 3


class SchemaError(HawkError):
    def __init__(self, file: str, violations: Sequence[str]):
        super().__init__(f"{file}: {'; '.join(violations)}")
        self.file = file
        self.violations = list(violations)


class GoalGenerationFailed(HawkError):
    def __init__(self, character_id: str, reason: str = ""):
        super().__init__(f"goal generation failed for '{character_id}' {reason}".strip())
        self.character_id = character_id


class NoViableCandidates(HawkError):
    pass


class ChapterRejected(HawkError):
    def __init__(self, chapter_index: int, violations: Sequence[str]):
        super().__init__(f"chapter {chapter_index} rejected: {'; '.join(violations)}")
        self.chapter_index = chapter_index
        self.violations = list(violations)


class StoryWorkflowFailed(HawkError):
    def __init__(self, node_id: str, error: str):
        super().__init__(f"node '{node_id}' failed: {error}")
        self.node_id = node_id
        self.error = error
