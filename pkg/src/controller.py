"""
User-layer task parsing: free text + option hints -> TaskSpec.

Kind resolution order: explicit "kind" option, keyword table of the template
catalog, then (optionally) the reasoning operator naming a catalogued kind.
"""
import hashlib
import json
import re
from typing import Any, Dict, Optional

from loguru import logger

from src.errors import HawkError, MalformedOption, UnrecognizedTaskKind
from src.reasoning import ReasoningInput, reason
from src.workflow_model import TaskRequest, TaskSpec, TemplateCatalog, TemplateParameter


def _coerce(name: str, param: TemplateParameter, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if param.type == "integer":
            return int(value)
        if param.type == "number":
            return float(value)
        if param.type == "boolean":
            lowered = value.strip().lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(value)
        if param.type == "json":
            return json.loads(value)
    except (ValueError, json.JSONDecodeError):
        raise MalformedOption(name, param.type, value)
    return value


def task_id_for(kind: str, raw_text: str, options: Dict[str, str]) -> str:
    canonical = json.dumps({"kind": kind, "text": raw_text, "options": options}, sort_keys=True, separators=(",", ":"))
    return "task-" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _build_spec(req: TaskRequest, kind: str, catalog: TemplateCatalog) -> TaskSpec:
    template = catalog.get(kind)
    text = req.raw_text.strip()
    parameters: Dict[str, Any] = {}
    for name, param in sorted(template.parameters.items()):
        if name in req.options:
            parameters[name] = _coerce(name, param, req.options[name])
            continue
        match = re.search(param.pattern, text) if param.pattern else None
        if match:
            parameters[name] = _coerce(name, param, match.group(1))
        else:
            parameters[name] = param.default
    return TaskSpec(task_id=task_id_for(kind, text, dict(req.options)), kind=kind,
                    parameters=parameters, constraints=template.constraints)


def _keyword_kind(req: TaskRequest, catalog: TemplateCatalog) -> Optional[str]:
    if req.options.get("kind"):
        kind = req.options["kind"]
        if kind not in catalog.templates:
            raise UnrecognizedTaskKind(f"option kind={kind!r} is not a catalogued template")
        return kind
    return catalog.match_keywords(req.raw_text)


def parse_task_request(req: TaskRequest, catalog: TemplateCatalog) -> TaskSpec:
    """Deterministic: identical request and catalog give an identical TaskSpec."""
    if not req.raw_text.strip():
        raise UnrecognizedTaskKind("task request text is empty")
    kind = _keyword_kind(req, catalog)
    if kind is None:
        raise UnrecognizedTaskKind(f"no template matches {req.raw_text.strip()[:60]!r}")
    spec = _build_spec(req, kind, catalog)
    logger.debug(f"Parsed task {spec.task_id} as {kind}")
    return spec


class TaskParser:
    """Keyword parsing with an optional reasoning-backed fallback."""

    def __init__(self, catalog: TemplateCatalog, reasoning_handle=None, use_reasoning: bool = False):
        self.catalog = catalog
        self.handle = reasoning_handle
        self.use_reasoning = use_reasoning and reasoning_handle is not None

    async def parse(self, req: TaskRequest) -> TaskSpec:
        try:
            return parse_task_request(req, self.catalog)
        except UnrecognizedTaskKind:
            if not self.use_reasoning or not req.raw_text.strip():
                raise

        logger.info("🔍 Keyword table found no template, asking the reasoning operator")
        kinds = self.catalog.kinds()
        question = (f"classify:task\nWhich workflow template fits this request: {req.raw_text.strip()!r}? "
                    f"Choose one of: {', '.join(kinds)}.")
        try:
            trace = await reason(ReasoningInput(question=question), self.handle)
        except HawkError as e:
            raise UnrecognizedTaskKind(f"reasoning fallback failed: {e}")
        kind = trace.answer.strip().strip(".").lower()
        if kind not in kinds:
            raise UnrecognizedTaskKind(f"reasoning proposed unknown kind {trace.answer!r}")
        logger.success(f"✅ Reasoning chose template {kind}")
        return _build_spec(req, kind, self.catalog)
