"""
Operator layer dispatch.

Every task node goes through OperatorDispatcher.dispatch. Nodes whose params
name "capabilities" are executed by a registered agent found through
discovery; all others run the built-in handler of their operator kind,
selected by params["op"].
"""
import asyncio
import json
import time
from typing import Any, Awaitable, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import aiohttp
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.errors import CapabilityDenied, HawkError, NoAgentFound, OperatorTimeout
from src.reasoning import ReasoningInput, reason
from src.registry import INPROC, AgentDescriptor, AgentRegistry
from src.resources import ResourceHandle, generate, invoke_tool
from src.security import Capability, Deny, OutputSchema, authorize, validate_output
from src.store import MemoryFilter, MemoryRecord, MemoryStore, VersionStore, dump_body
from src.workflow_model import OperatorKind, TaskNode


class TaskResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: Literal["succeeded", "failed"]
    output: Any = None
    metrics: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[str] = None
    retriable: bool = True


class Services:
    """Shared handles a node may reach: stores, registry, resources and application extras."""

    def __init__(self, store: Optional[VersionStore] = None, memory: Optional[MemoryStore] = None,
                 registry: Optional[AgentRegistry] = None, resources: Optional[Dict[str, ResourceHandle]] = None,
                 extras: Optional[Dict[str, Any]] = None):
        self.store = store
        self.memory = memory
        self.registry = registry
        self.resources = resources or {}
        self.extras = extras or {}

    def resource(self, resource_id: str) -> ResourceHandle:
        if resource_id not in self.resources:
            raise HawkError(f"resource '{resource_id}' is not available to this workflow")
        return self.resources[resource_id]


class ExecutionContext:
    def __init__(self, instance_id: str, node_id: str, attempt: int, inputs: Dict[str, Any],
                 services: Services, capabilities: Sequence[Capability], principal: str,
                 emit: Callable[[str, Optional[Dict[str, Any]]], None]):
        self.instance_id = instance_id
        self.node_id = node_id
        self.attempt = attempt
        self.inputs = inputs
        self.services = services
        self.capabilities = tuple(capabilities)
        self.principal = principal
        self.emit = emit

    def require(self, resource_id: str, action: str) -> None:
        """Raise CapabilityDenied (after emitting a violation event) unless allowed."""
        decision = authorize(self.capabilities, self.principal, resource_id, action)
        if isinstance(decision, Deny):
            self.emit("violation", {"code": "capability", "resource": resource_id, "action": action,
                                    "reason": decision.reason})
            raise CapabilityDenied(self.principal, resource_id, action, decision.reason)


Handler = Callable[[TaskNode, ExecutionContext], Awaitable[Any]]


def grant_all(principal: str) -> Tuple[Capability, ...]:
    return (Capability(principal=principal, resource_pattern="*", actions=frozenset({"read", "write", "invoke"})),)


# --- built-in handlers --------------------------------------------------------------

def _decode(body: bytes) -> Any:
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return body.decode("utf-8", errors="replace")


def _encode(body: Any) -> bytes:
    if isinstance(body, bytes):
        return body
    if isinstance(body, str):
        return body.encode("utf-8")
    return dump_body(body)


async def environment_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    op, key = p.get("op", "get"), p["key"]
    store = ctx.services.store
    if op == "get":
        ctx.require(f"env/{key}", "read")
        doc = store.env_get(key, p.get("version"))
        return {"key": key, "version": doc.version.value, "body": _decode(doc.body)}
    ctx.require(f"env/{key}", "write")
    if op == "init":
        return {"key": key, "version": store.env_init(key, _encode(p.get("body", {}))).value}
    if op == "commit":
        parent = p.get("parent") or store.head(key).value
        return {"key": key, "version": (await store.env_commit(key, _encode(p.get("body", {})), parent)).value}
    raise HawkError(f"unknown environment op '{op}'")


async def memory_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    op, agent_id = p.get("op", "query"), p["agent_id"]
    memory = ctx.services.memory
    if op == "append":
        ctx.require(f"memory/{agent_id}", "write")
        record = MemoryRecord(agent_id=agent_id, kind=p.get("kind", "observation"), body=p.get("body", ""),
                              chapter_version=p.get("chapter_version"))
        return {"seq": memory.memory_append(agent_id, record)}
    if op == "query":
        ctx.require(f"memory/{agent_id}", "read")
        flt = MemoryFilter.model_validate(p.get("filter", {}))
        return {"records": [r.model_dump() for r in memory.memory_query(agent_id, flt)]}
    raise HawkError(f"unknown memory op '{op}'")


async def task_management_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    op = p.get("op", "echo")
    if op == "echo":
        return {"value": p.get("value"), "inputs": ctx.inputs}
    if op == "tool":
        ctx.require(f"tool/{p['resource']}", "invoke")
        return await invoke_tool(ctx.services.resource(p["resource"]), p.get("args", {}))
    if op == "sleep":
        await asyncio.sleep(float(p.get("seconds", 0.0)))
        return {"slept": p.get("seconds", 0.0)}
    raise HawkError(f"unknown task-management op '{op}'")


async def task_optimizer_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    history = [TaskResult.model_validate(h) for h in p.get("history", [])]
    policy = TaskPolicy.model_validate(p["policy"])
    return tune(history, policy).model_dump()


async def reasoning_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    resource_id = p["resource"]
    ctx.require(f"model/{resource_id}", "invoke")
    handle = ctx.services.resource(resource_id)
    if p.get("op", "reason") == "generate":
        completion = await generate(handle, p["prompt"])
        return {"text": completion.text, "finish_reason": completion.finish_reason}
    evidence = tuple(p.get("evidence", ())) + tuple(json.dumps(v, sort_keys=True, default=str)
                                                   for v in ctx.inputs.values() if v is not None)
    trace = await reason(ReasoningInput(question=p["question"], evidence=evidence, mode=p.get("mode", "cot")), handle)
    return {"steps": list(trace.steps), "answer": trace.answer}


async def security_op(node: TaskNode, ctx: ExecutionContext) -> Any:
    p = node.params
    if p.get("op", "validate") == "authorize":
        decision = authorize(ctx.capabilities, p.get("principal", ctx.principal), p["resource_id"], p["action"])
        return decision.model_dump()
    schema = OutputSchema(name=p.get("schema", node.node_id), fields=p.get("fields", {}),
                          required=tuple(p.get("required", ())),
                          enums={k: tuple(v) for k, v in p.get("enums", {}).items()})
    payload = p.get("payload")
    if payload is None:
        payload = next((v for v in ctx.inputs.values() if isinstance(v, dict)), {})
    violations = validate_output(schema, payload)
    if violations:
        for v in violations:
            ctx.emit("violation", {"code": v.code, "field": v.field or "", "message": v.message})
        raise HawkError("; ".join(v.message for v in violations))
    ctx.emit("validated", {"schema": schema.name})
    return {"ok": True}


BUILTIN_HANDLERS: Dict[OperatorKind, Handler] = {
    OperatorKind.ENVIRONMENT: environment_op,
    OperatorKind.MEMORY: memory_op,
    OperatorKind.TASK_MANAGEMENT: task_management_op,
    OperatorKind.TASK_OPTIMIZER: task_optimizer_op,
    OperatorKind.REASONING: reasoning_op,
    OperatorKind.SECURITY: security_op,
}


class OperatorDispatcher:
    def __init__(self, services: Services, capabilities: Sequence[Capability] = (), principal: str = "engine",
                 handlers: Optional[Dict[OperatorKind, Handler]] = None, agent_timeout: float = 60.0):
        self.services = services
        self.capabilities = tuple(capabilities)
        self.principal = principal
        self.handlers: Dict[OperatorKind, Handler] = dict(BUILTIN_HANDLERS if handlers is None else handlers)
        self.agent_timeout = agent_timeout

    def register(self, kind: OperatorKind, handler: Handler) -> None:
        self.handlers[kind] = handler

    def resolves(self, kind: OperatorKind) -> bool:
        return kind in self.handlers

    async def dispatch(self, node: TaskNode, ctx: ExecutionContext) -> TaskResult:
        start = time.perf_counter()
        if "capabilities" in node.params:
            agent = self._discover(node)
            ctx.require(f"agent/{agent.spec.name}", "invoke")
            output = await self._invoke_agent(agent, node, ctx)
            metrics = {"agent": agent.agent_id}
        else:
            output = await self.handlers[node.operator_kind](node, ctx)
            metrics = {}
        metrics["latency_ms"] = (time.perf_counter() - start) * 1000.0
        if "resource" in node.params:
            metrics["backend"] = node.params["resource"]
        return TaskResult(status="succeeded", output=output, metrics=metrics)

    def _discover(self, node: TaskNode) -> AgentDescriptor:
        registry = self.services.registry
        wanted = node.params["capabilities"]
        matches = registry.discover(wanted, name_pattern=node.params.get("agent_pattern")) if registry else []
        if not matches:
            raise NoAgentFound(f"no registered agent offers {sorted(wanted)} for node '{node.node_id}'")
        logger.debug(f"Node {node.node_id} -> {matches[0].agent_id} ({len(matches)} candidate(s))")
        return matches[0]

    async def _invoke_agent(self, agent: AgentDescriptor, node: TaskNode, ctx: ExecutionContext) -> Any:
        timeout = float(node.params.get("timeout", self.agent_timeout))
        try:
            if agent.endpoint.startswith(INPROC):
                handler = self.services.registry.handler(agent.endpoint)
                return await asyncio.wait_for(handler(node, ctx), timeout=timeout)
            return await asyncio.wait_for(self._post(agent.endpoint, node, ctx), timeout=timeout)
        except asyncio.TimeoutError:
            raise OperatorTimeout(f"agent {agent.agent_id} exceeded {timeout}s on node '{node.node_id}'")

    @staticmethod
    async def _post(endpoint: str, node: TaskNode, ctx: ExecutionContext) -> Any:
        body = {"node_id": node.node_id, "params": node.params, "inputs": ctx.inputs, "attempt": ctx.attempt}
        async with aiohttp.ClientSession() as session:
            async with session.post(endpoint.rstrip("/") + "/invoke", json=body) as response:
                if response.status != 200:
                    raise HawkError(f"agent endpoint {endpoint} answered HTTP {response.status}")
                return await response.json()


# --- task optimizer -------------------------------------------------------------------

class TaskPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    preferred_backend: str
    alternate_backends: Tuple[str, ...] = ()
    max_attempts: int = Field(default=1, ge=1)
    timeout: float = Field(default=30.0, gt=0)
    base_timeout: Optional[float] = None  # cap reference; defaults to the first timeout seen


MIN_BACKEND_SAMPLES = 5


def _failure_rates(history: Sequence[TaskResult]) -> Dict[str, Tuple[int, float]]:
    totals: Dict[str, List[int]] = {}
    for result in history:
        backend = result.metrics.get("backend")
        if backend is None:
            continue
        counts = totals.setdefault(backend, [0, 0])
        counts[0] += 1
        counts[1] += result.status == "failed"
    return {b: (n, failed / n) for b, (n, failed) in totals.items()}


def tune(history: Sequence[TaskResult], current: TaskPolicy) -> TaskPolicy:
    if not history:
        return current
    update: Dict[str, Any] = {}

    timeouts = sum(1 for r in history if r.metrics.get("error_class") == "timeout")
    if timeouts / len(history) > 0.25:
        base = current.base_timeout or current.timeout
        update["base_timeout"] = base
        update["timeout"] = min(current.timeout * 2.0, base * 10.0)

    rates = _failure_rates(history)
    preferred = rates.get(current.preferred_backend)
    if preferred is not None and preferred[0] >= MIN_BACKEND_SAMPLES:
        best, best_rate = None, preferred[1]
        for alt in current.alternate_backends:
            n, rate = rates.get(alt, (0, 1.0))
            if n >= MIN_BACKEND_SAMPLES and rate < best_rate:
                best, best_rate = alt, rate
        if best is not None:
            logger.info(f"🔁 Switching backend {current.preferred_backend} -> {best} (failure rate {best_rate:.2f})")
            update["preferred_backend"] = best
            update["alternate_backends"] = tuple(
                current.preferred_backend if b == best else b for b in current.alternate_backends)

    return current.model_copy(update=update) if update else current
