"""
Workflow engine: event-driven ready-queue execution of a WorkflowSpec.

The loop is the only writer of the event log. Node bodies run as asyncio
tasks and report back through a completion queue.
"""
import asyncio
import json
import random
import time
import uuid
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from config.settings import settings
from src.errors import BackendError, CapabilityDenied, DispatchUnresolvable, HawkError, NoAgentFound, OperatorTimeout
from src.operators import ExecutionContext, OperatorDispatcher, TaskResult
from src.planner import plan
from src.workflow_model import WorkflowSpec

EventKind = str  # scheduled | started | succeeded | failed | retried | cancelled | validated | violation
EVENT_KINDS = ("scheduled", "started", "succeeded", "failed", "retried", "cancelled", "validated", "violation")


class NodeStatus(str, Enum):
    PENDING = "pending"
    READY = "ready"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    CANCELLED = "cancelled"


TERMINAL = {NodeStatus.SUCCEEDED, NodeStatus.FAILED, NodeStatus.CANCELLED}
_LEGAL = {
    NodeStatus.PENDING: {NodeStatus.READY},
    NodeStatus.READY: {NodeStatus.RUNNING},
    NodeStatus.RUNNING: {NodeStatus.SUCCEEDED, NodeStatus.FAILED},
    NodeStatus.FAILED: {NodeStatus.READY},
    NodeStatus.SUCCEEDED: set(),
    NodeStatus.CANCELLED: set(),
}


class NodeState(BaseModel):
    status: NodeStatus = NodeStatus.PENDING
    attempts: int = 0
    started_at: Optional[float] = None
    ended_at: Optional[float] = None
    last_error: Optional[str] = None

    def move(self, status: NodeStatus) -> None:
        if status != NodeStatus.CANCELLED and status not in _LEGAL[self.status]:
            raise RuntimeError(f"illegal node transition {self.status.value} -> {status.value}")
        self.status = status


class StrategyParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    parallelism: int = Field(default_factory=lambda: settings.default_concurrency_cap, ge=1)
    retry_budget: int = Field(default=100, ge=0)  # retries the whole instance may spend
    backoff_scale: float = Field(default=1.0, gt=0)


class ExecutionEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    seq: int
    ts: float
    node_id: str
    kind: EventKind
    payload: Dict[str, str] = Field(default_factory=dict)


class EventLog:
    """Append-only; may be shared by several instances (payload 'instance' tells them apart)."""

    def __init__(self):
        self._events: List[ExecutionEvent] = []

    def append(self, node_id: str, kind: EventKind, payload: Optional[Dict[str, Any]] = None,
               ts: Optional[float] = None) -> ExecutionEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind '{kind}'")
        event = ExecutionEvent(
            seq=len(self._events) + 1,
            ts=time.time() if ts is None else ts,
            node_id=node_id,
            kind=kind,
            payload={k: str(v) for k, v in (payload or {}).items()},
        )
        self._events.append(event)
        return event

    @property
    def events(self) -> Tuple[ExecutionEvent, ...]:
        return tuple(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def for_instance(self, instance_id: str) -> List[ExecutionEvent]:
        return [e for e in self._events if e.payload.get("instance") == instance_id]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e.model_dump(), sort_keys=True) + "\n" for e in self._events)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ndjson(), encoding="utf-8")


class SystemClock:
    def now(self) -> float:
        return time.time()

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds)


class FakeClock:
    """Deterministic clock: sleeping advances time instead of waiting."""

    def __init__(self, start: float = 0.0):
        self.t = start

    def now(self) -> float:
        return self.t

    async def sleep(self, seconds: float) -> None:
        self.t += max(0.0, seconds)
        await asyncio.sleep(0)


class WorkflowInstance:
    def __init__(self, spec: WorkflowSpec, strategy: Optional[StrategyParams] = None,
                 event_log: Optional[EventLog] = None, instance_id: Optional[str] = None):
        self.instance_id = instance_id or f"{spec.spec_id}-{uuid.uuid4().hex[:8]}"
        self.spec = spec
        self.strategy = strategy or StrategyParams(parallelism=spec.concurrency_cap)
        if self.strategy.parallelism > spec.concurrency_cap:
            self.strategy = self.strategy.model_copy(update={"parallelism": spec.concurrency_cap})
        self.event_log = event_log or EventLog()
        self.node_states: Dict[str, NodeState] = {n.node_id: NodeState() for n in spec.nodes}

    @property
    def terminal(self) -> bool:
        return all(s.status in TERMINAL for s in self.node_states.values())


class WorkflowResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance_id: str
    succeeded: bool
    statuses: Dict[str, NodeStatus]
    failures: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, Any] = Field(default_factory=dict)


def failure_result(exc: BaseException) -> TaskResult:
    """Map an operator exception to a failed TaskResult."""
    if isinstance(exc, (CapabilityDenied, NoAgentFound)):
        retriable, error_class = False, type(exc).__name__
    elif isinstance(exc, OperatorTimeout):
        retriable, error_class = True, "timeout"
    elif isinstance(exc, BackendError):
        retriable, error_class = exc.retriable, exc.error_class
    elif isinstance(exc, asyncio.TimeoutError):
        retriable, error_class = True, "timeout"
    else:
        retriable, error_class = True, type(exc).__name__
    return TaskResult(status="failed", error=str(exc) or type(exc).__name__, retriable=retriable,
                      metrics={"error_class": error_class})


async def execute(instance: WorkflowInstance, dispatcher: OperatorDispatcher,
                  clock=None, rng_seed: int = 0) -> WorkflowResult:
    """Run the instance to a terminal state; task failures are reported, not raised."""
    clock = clock or SystemClock()
    spec = instance.spec
    for node in spec.nodes:
        if not dispatcher.resolves(node.operator_kind):
            raise DispatchUnresolvable(node.operator_kind.value)
    plan(spec)  # rejects cycles before anything runs

    log = instance.event_log
    states = instance.node_states
    children = spec.children()
    nodes = {n.node_id: n for n in spec.nodes}
    rngs = {nid: random.Random(f"{rng_seed}:{nid}") for nid in nodes}
    queue: asyncio.Queue = asyncio.Queue()
    outputs: Dict[str, Any] = {}
    failures: Dict[str, str] = {}
    ready: List[str] = []
    waiting: set = set()
    tasks: set = set()
    running = 0
    retries_spent = 0

    def emit(node_id: str, kind: EventKind, **payload) -> None:
        log.append(node_id, kind, {"instance": instance.instance_id, **payload}, ts=clock.now())

    def make_ready(node_id: str) -> None:
        states[node_id].move(NodeStatus.READY)
        emit(node_id, "scheduled", attempt=states[node_id].attempts + 1)
        ready.append(node_id)

    def cancel_descendants(node_id: str) -> None:
        stack = list(children[node_id])
        while stack:
            child = stack.pop()
            if states[child].status in (NodeStatus.PENDING, NodeStatus.READY):
                if child in ready:
                    ready.remove(child)
                states[child].move(NodeStatus.CANCELLED)
                emit(child, "cancelled", reason=f"dependency {node_id} failed")
                stack.extend(children[child])

    async def run_node(node_id: str, attempt: int) -> None:
        node = nodes[node_id]

        def agent_emit(kind: EventKind, payload: Optional[Dict[str, Any]] = None) -> None:
            queue.put_nowait(("event", node_id, kind, payload or {}))

        ctx = ExecutionContext(
            instance_id=instance.instance_id,
            node_id=node_id,
            attempt=attempt,
            inputs={dep: outputs.get(dep) for dep in node.depends_on},
            services=dispatcher.services,
            capabilities=dispatcher.capabilities,
            principal=dispatcher.principal,
            emit=agent_emit,
        )
        start = clock.now()
        try:
            result = await dispatcher.dispatch(node, ctx)
        except Exception as e:
            if not isinstance(e, HawkError):
                logger.exception(f"Unexpected error in node {node_id}")
            result = failure_result(e)
        await queue.put(("done", node_id, result, (clock.now() - start) * 1000.0))

    async def wake_after(node_id: str, delay: float) -> None:
        await clock.sleep(delay)
        await queue.put(("wake", node_id))

    def spawn(coro) -> None:
        task = asyncio.create_task(coro)
        tasks.add(task)
        task.add_done_callback(tasks.discard)

    logger.info(f"🚀 Executing {instance.instance_id}: {len(nodes)} node(s), parallelism={instance.strategy.parallelism}")
    for node_id in sorted(nodes):
        if not nodes[node_id].depends_on:
            make_ready(node_id)

    try:
        while ready or waiting or running:
            ready.sort()
            while ready and running < instance.strategy.parallelism:
                node_id = ready.pop(0)
                state = states[node_id]
                state.move(NodeStatus.RUNNING)
                state.attempts += 1
                state.started_at = clock.now()
                running += 1
                emit(node_id, "started", attempt=state.attempts)
                spawn(run_node(node_id, state.attempts))

            message = await queue.get()
            if message[0] == "event":
                _, node_id, kind, payload = message
                emit(node_id, kind, **payload)
                continue
            if message[0] == "wake":
                waiting.discard(message[1])
                make_ready(message[1])
                continue

            _, node_id, result, latency_ms = message
            running -= 1
            state = states[node_id]
            state.ended_at = clock.now()
            node = nodes[node_id]

            if result.status == "succeeded":
                state.move(NodeStatus.SUCCEEDED)
                outputs[node_id] = result.output
                emit(node_id, "succeeded", attempt=state.attempts, latency_ms=f"{latency_ms:.3f}")
                for child in children[node_id]:
                    parents = nodes[child].depends_on
                    if states[child].status == NodeStatus.PENDING and all(
                            states[p].status == NodeStatus.SUCCEEDED for p in parents):
                        make_ready(child)
                continue

            state.move(NodeStatus.FAILED)
            state.last_error = result.error
            error_class = result.metrics.get("error_class", "error")
            emit(node_id, "failed", attempt=state.attempts, latency_ms=f"{latency_ms:.3f}",
                 error_class=error_class, error=result.error or "")

            policy = node.retry_policy
            if result.retriable and state.attempts < policy.max_attempts and retries_spent < instance.strategy.retry_budget:
                retries_spent += 1
                ceiling = policy.backoff_base * policy.backoff_factor ** (state.attempts - 1) * instance.strategy.backoff_scale
                delay = rngs[node_id].uniform(0.0, ceiling)
                emit(node_id, "retried", attempt=state.attempts, delay=f"{delay:.6f}")
                logger.warning(f"⚠️ Node {node_id} failed (attempt {state.attempts}/{policy.max_attempts}), retrying in {delay:.3f}s")
                waiting.add(node_id)
                spawn(wake_after(node_id, delay))
            else:
                failures[node_id] = result.error or "failed"
                logger.error(f"❌ Node {node_id} failed: {result.error}")
                cancel_descendants(node_id)
    finally:
        for task in list(tasks):
            task.cancel()

    result = WorkflowResult(
        instance_id=instance.instance_id,
        succeeded=all(s.status == NodeStatus.SUCCEEDED for s in states.values()),
        statuses={nid: s.status for nid, s in states.items()},
        failures=failures,
        outputs=outputs,
    )
    if result.succeeded:
        logger.success(f"✅ {instance.instance_id} complete: {len(nodes)}/{len(nodes)} succeeded")
    else:
        logger.warning(f"⚠️ {instance.instance_id} finished with {len(failures)} failed node(s)")
    return result
