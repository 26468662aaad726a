"""
Declarative workflow data model: task requests, task specs, DAG workflow specs,
the template catalog and workflow instantiation.
"""
import json
import re
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import InvalidWorkflowSpec, TemplateNotFound, UnresolvedPlaceholder

PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class OperatorKind(str, Enum):
    ENVIRONMENT = "environment"
    MEMORY = "memory"
    TASK_MANAGEMENT = "task-management"
    TASK_OPTIMIZER = "task-optimizer"
    REASONING = "reasoning"
    SECURITY = "security"


class TaskRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    raw_text: str
    options: Dict[str, str] = Field(default_factory=dict)


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    kind: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    constraints: Tuple[str, ...] = ()


class RetryPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_attempts: int = Field(default=1, ge=1)
    backoff_base: float = Field(default=0.1, ge=0.0)  # seconds
    backoff_factor: float = Field(default=2.0, ge=1.0)


class TaskNode(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    node_id: str = Field(min_length=1)
    operator_kind: OperatorKind
    params: Dict[str, Any] = Field(default_factory=dict)
    depends_on: Tuple[str, ...] = ()
    retry_policy: RetryPolicy = Field(default_factory=RetryPolicy)


class WorkflowSpec(BaseModel):
    """DAG of operator tasks. Structural invariants are checked by validate_workflow."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    spec_id: str
    nodes: Tuple[TaskNode, ...] = ()
    metadata: Dict[str, str] = Field(default_factory=dict)
    concurrency_cap: int = Field(default=5, ge=1)

    def node(self, node_id: str) -> TaskNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> List[str]:
        return [n.node_id for n in self.nodes]

    def children(self) -> Dict[str, List[str]]:
        """node_id -> sorted list of nodes that depend on it."""
        out: Dict[str, List[str]] = {n.node_id: [] for n in self.nodes}
        for n in self.nodes:
            for dep in n.depends_on:
                if dep in out:
                    out[dep].append(n.node_id)
        return {k: sorted(v) for k, v in out.items()}


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["cycle", "duplicate_id", "dangling_dependency"]
    nodes: Tuple[str, ...]
    message: str


class ValidationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec_id: str
    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def cycles(self) -> List[List[str]]:
        return [list(v.nodes) for v in self.violations if v.kind == "cycle"]


def canonical_json(model: BaseModel) -> str:
    """Byte-stable serialization (sorted keys, no whitespace)."""
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _find_cycles(graph: Dict[str, List[str]]) -> List[List[str]]:
    """DFS over node -> dependencies; one cycle reported per back edge."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in graph}
    cycles: List[List[str]] = []

    for root in sorted(graph):
        if color[root] != WHITE:
            continue
        stack: List[Tuple[str, int]] = [(root, 0)]
        path: List[str] = [root]
        color[root] = GRAY
        while stack:
            node, idx = stack[-1]
            deps = graph[node]
            if idx < len(deps):
                stack[-1] = (node, idx + 1)
                dep = deps[idx]
                if color[dep] == WHITE:
                    color[dep] = GRAY
                    stack.append((dep, 0))
                    path.append(dep)
                elif color[dep] == GRAY:
                    cycles.append(path[path.index(dep):])
            else:
                color[node] = BLACK
                stack.pop()
                path.pop()
    return cycles


def validate_workflow(spec: WorkflowSpec) -> ValidationReport:
    """Report every structural violation of a workflow spec (violations are data)."""
    violations: List[Violation] = []

    seen: Dict[str, int] = {}
    for n in spec.nodes:
        seen[n.node_id] = seen.get(n.node_id, 0) + 1
    for node_id, count in sorted(seen.items()):
        if count > 1:
            violations.append(Violation(kind="duplicate_id", nodes=(node_id,),
                                        message=f"node id '{node_id}' appears {count} times"))

    graph: Dict[str, List[str]] = {}
    for n in spec.nodes:
        deps = graph.setdefault(n.node_id, [])
        for dep in n.depends_on:
            if dep not in seen:
                violations.append(Violation(kind="dangling_dependency", nodes=(n.node_id, dep),
                                            message=f"'{n.node_id}' depends on unknown node '{dep}'"))
            elif dep not in deps:
                deps.append(dep)

    for cycle in _find_cycles(graph):
        violations.append(Violation(kind="cycle", nodes=tuple(cycle),
                                    message="cycle: " + " -> ".join(cycle + [cycle[0]])))

    if violations:
        logger.debug(f"Spec {spec.spec_id}: {len(violations)} violation(s)")
    return ValidationReport(spec_id=spec.spec_id, violations=tuple(violations))


def load_workflow_spec(path) -> WorkflowSpec:
    path = Path(path)
    try:
        return WorkflowSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidWorkflowSpec(f"spec file not found: {path}")
    except ValidationError as e:
        raise InvalidWorkflowSpec(f"{path}: {e.error_count()} schema error(s): {e.errors()[0]['msg']}")


def dump_workflow_spec(spec: WorkflowSpec) -> str:
    return json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True)


# --- template catalog -------------------------------------------------------

ParameterType = Literal["string", "integer", "number", "boolean", "json"]


class TemplateParameter(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    type: ParameterType = "string"
    default: Any = None
    pattern: Optional[str] = None  # regex with one group, extracted from raw_text


class WorkflowTemplate(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: str
    description: str = ""
    keywords: Tuple[str, ...] = ()
    parameters: Dict[str, TemplateParameter] = Field(default_factory=dict)
    constraints: Tuple[str, ...] = ()
    allow_empty: bool = False
    spec: Dict[str, Any]

    @field_validator("keywords")
    @classmethod
    def _lower(cls, v):
        return tuple(k.lower() for k in v)


class TemplateCatalog:
    """Templates keyed by kind, loaded from a directory of JSON files."""

    def __init__(self, templates: List[WorkflowTemplate]):
        self.templates: Dict[str, WorkflowTemplate] = {t.kind: t for t in templates}

    @classmethod
    def load(cls, directory) -> "TemplateCatalog":
        directory = Path(directory)
        templates = []
        for path in sorted(directory.glob("*.json")):
            templates.append(WorkflowTemplate.model_validate_json(path.read_text(encoding="utf-8")))
        logger.info(f"📚 Loaded {len(templates)} workflow template(s) from {directory}")
        return cls(templates)

    def kinds(self) -> List[str]:
        return sorted(self.templates)

    def get(self, kind: str) -> WorkflowTemplate:
        if kind not in self.templates:
            raise TemplateNotFound(f"no template for kind '{kind}'")
        return self.templates[kind]

    def match_keywords(self, text: str) -> Optional[str]:
        """Kind with the most whole-word keyword hits; ties broken by kind name."""
        words = set(re.findall(r"[a-z0-9\-]+", text.lower()))
        best, best_hits = None, 0
        for kind in self.kinds():
            hits = sum(1 for k in self.templates[kind].keywords if k in words)
            if hits > best_hits:
                best, best_hits = kind, hits
        return best


def _substitute(value: Any, params: Dict[str, Any], missing: set) -> Any:
    if isinstance(value, str):
        whole = PLACEHOLDER.fullmatch(value)
        if whole:
            name = whole.group(1)
            if params.get(name) is None:
                missing.add(name)
                return None
            return params[name]

        def repl(m):
            name = m.group(1)
            if params.get(name) is None:
                missing.add(name)
                return m.group(0)
            v = params[name]
            return v if isinstance(v, str) else json.dumps(v, sort_keys=True)

        return PLACEHOLDER.sub(repl, value)
    if isinstance(value, dict):
        return {k: _substitute(v, params, missing) for k, v in value.items()}
    if isinstance(value, list):
        return [_substitute(v, params, missing) for v in value]
    return value


def instantiate_workflow(spec_req: TaskSpec, catalog: TemplateCatalog) -> WorkflowSpec:
    """Select the template for the task kind and substitute its parameters."""
    template = catalog.get(spec_req.kind)
    params: Dict[str, Any] = {name: p.default for name, p in template.parameters.items()}
    params.update(spec_req.parameters)
    params.setdefault("task_id", spec_req.task_id)
    params.setdefault("kind", spec_req.kind)

    missing: set = set()
    document = _substitute(template.spec, params, missing)
    if missing:
        raise UnresolvedPlaceholder(sorted(missing))
    if not document.get("nodes") and not template.allow_empty:
        raise UnresolvedPlaceholder(["nodes"])

    try:
        spec = WorkflowSpec.model_validate(document)
    except ValidationError as e:
        raise InvalidWorkflowSpec(f"template '{template.kind}' produced an invalid spec: {e.errors()[0]['msg']}")

    report = validate_workflow(spec)
    if not report.ok:
        raise InvalidWorkflowSpec("; ".join(v.message for v in report.violations))

    logger.debug(f"Instantiated {spec.spec_id} with {len(spec.nodes)} node(s)")
    return spec
