"""Metrics snapshots over the event log and the feedback rule that adapts strategy."""
import math
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict

from config.settings import settings
from src.engine import ExecutionEvent, NodeStatus, StrategyParams, WorkflowInstance


class NodeMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: NodeStatus
    attempts: int
    latency_ms: Optional[float] = None


class MetricsSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    per_node: Dict[str, NodeMetrics]
    counts: Dict[str, int]
    p50_ms: Optional[float] = None
    p95_ms: Optional[float] = None
    failure_rate: float = 0.0
    window_failure_rate: float = 0.0
    concurrency_cap: int = 5
    event_count: int = 0


_STATUS_OF = {
    "scheduled": NodeStatus.READY,
    "started": NodeStatus.RUNNING,
    "succeeded": NodeStatus.SUCCEEDED,
    "failed": NodeStatus.FAILED,
    "cancelled": NodeStatus.CANCELLED,
    "retried": NodeStatus.READY,
}


def nearest_rank(values: Sequence[float], p: float) -> Optional[float]:
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize(node_ids: Sequence[str], events: Sequence[ExecutionEvent], concurrency_cap: int,
              window: Optional[int] = None) -> MetricsSummary:
    window = window or settings.optimizer_window
    status = {nid: NodeStatus.PENDING for nid in node_ids}
    attempts = {nid: 0 for nid in node_ids}
    latency: Dict[str, float] = {}
    completions: List[bool] = []

    for e in events:
        if e.node_id not in status or e.payload.get("scope") == "agent":
            continue
        if e.kind in _STATUS_OF:
            status[e.node_id] = _STATUS_OF[e.kind]
        if e.kind == "started":
            attempts[e.node_id] += 1
        if e.kind in ("succeeded", "failed"):
            completions.append(e.kind == "failed")
            if "latency_ms" in e.payload:
                latency[e.node_id] = float(e.payload["latency_ms"])

    counts = {s.value: 0 for s in NodeStatus}
    for s in status.values():
        counts[s.value] += 1
    latencies = [latency[n] for n in node_ids if n in latency and status[n] in (NodeStatus.SUCCEEDED, NodeStatus.FAILED)]
    trailing = completions[-window:]

    return MetricsSummary(
        per_node={n: NodeMetrics(status=status[n], attempts=attempts[n], latency_ms=latency.get(n)) for n in node_ids},
        counts=counts,
        p50_ms=nearest_rank(latencies, 50),
        p95_ms=nearest_rank(latencies, 95),
        failure_rate=counts[NodeStatus.FAILED.value] / len(node_ids) if node_ids else 0.0,
        window_failure_rate=sum(trailing) / len(trailing) if trailing else 0.0,
        concurrency_cap=concurrency_cap,
        event_count=len(events),
    )


def monitor_snapshot(instance: WorkflowInstance) -> MetricsSummary:
    """Pure function of the instance's events in the log."""
    return summarize(instance.spec.node_ids, instance.event_log.for_instance(instance.instance_id),
                     instance.spec.concurrency_cap)


def optimize(metrics: MetricsSummary, current: StrategyParams) -> StrategyParams:
    rate = metrics.window_failure_rate
    cap = metrics.concurrency_cap
    if rate > settings.optimizer_failure_high:
        return current.model_copy(update={
            "parallelism": max(1, current.parallelism // 2),
            "backoff_scale": min(current.backoff_scale * 2.0, settings.optimizer_backoff_cap),
        })
    if rate < settings.optimizer_failure_low and current.parallelism < cap:
        return current.model_copy(update={"parallelism": current.parallelism + 1})
    return current.model_copy(update={"parallelism": min(current.parallelism, cap)})
