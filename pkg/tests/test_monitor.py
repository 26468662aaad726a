from src.engine import EventLog, ExecutionEvent, StrategyParams, WorkflowInstance
from src.monitor import MetricsSummary, monitor_snapshot, nearest_rank, optimize, summarize
from src.workflow_model import TaskNode, WorkflowSpec


def event(seq, node_id, kind, **payload):
    return ExecutionEvent(seq=seq, ts=float(seq), node_id=node_id, kind=kind,
                          payload={k: str(v) for k, v in payload.items()})


def metrics(rate, cap=5):
    return MetricsSummary(per_node={}, counts={}, window_failure_rate=rate, concurrency_cap=cap)


def test_fresh_instance_is_all_pending():
    spec = WorkflowSpec(spec_id="m", nodes=(TaskNode(node_id="A", operator_kind="memory"),
                                            TaskNode(node_id="B", operator_kind="memory")))
    snapshot = monitor_snapshot(WorkflowInstance(spec))
    assert snapshot.counts["pending"] == 2
    assert snapshot.failure_rate == 0.0
    assert snapshot.p50_ms is None


def test_failure_rate_over_terminal_states():
    ids = [f"n{i}" for i in range(10)]
    events, seq = [], 0
    for i, nid in enumerate(ids):
        seq += 1
        events.append(event(seq, nid, "started"))
        seq += 1
        events.append(event(seq, nid, "failed" if i == 0 else "succeeded", latency_ms=1.0))
    summary = summarize(ids, events, concurrency_cap=5)
    assert summary.failure_rate == 0.1
    assert summary.counts["succeeded"] == 9


def test_nearest_rank_percentiles():
    values = list(range(1, 101))
    assert nearest_rank(values, 50) == 50
    assert nearest_rank(values, 95) == 95
    assert nearest_rank([], 50) is None


def test_latency_percentiles_from_events():
    ids = [f"n{i}" for i in range(1, 101)]
    events = [event(i, nid, "succeeded", latency_ms=i) for i, nid in enumerate(ids, start=1)]
    summary = summarize(ids, events, concurrency_cap=5)
    assert summary.p50_ms == 50.0
    assert summary.p95_ms == 95.0


def test_agent_scoped_events_do_not_change_status():
    events = [event(1, "A", "started"), event(2, "A", "retried", scope="agent"), event(3, "A", "succeeded")]
    summary = summarize(["A"], events, concurrency_cap=5)
    assert summary.per_node["A"].status.value == "succeeded"
    assert summary.per_node["A"].attempts == 1


def test_snapshot_reads_only_its_instance():
    spec = WorkflowSpec(spec_id="m", nodes=(TaskNode(node_id="A", operator_kind="memory"),))
    log = EventLog()
    log.append("A", "started", {"instance": "other"})
    instance = WorkflowInstance(spec, event_log=log, instance_id="mine")
    assert monitor_snapshot(instance).event_count == 0


def test_optimize_grows_parallelism_when_healthy():
    assert optimize(metrics(0.0), StrategyParams(parallelism=3)).parallelism == 4


def test_optimize_backs_off_on_failures():
    out = optimize(metrics(0.5), StrategyParams(parallelism=4, backoff_scale=1.0))
    assert out.parallelism == 2
    assert out.backoff_scale == 2.0


def test_optimize_leaves_the_band_alone():
    current = StrategyParams(parallelism=3, backoff_scale=1.5)
    assert optimize(metrics(0.1), current) == current


def test_optimize_respects_bounds():
    current = StrategyParams(parallelism=1, backoff_scale=8.0)
    for rate in (0.0, 0.1, 0.9):
        once = optimize(metrics(rate, cap=5), current)
        twice = optimize(metrics(rate, cap=5), once)
        for params in (once, twice):
            assert 1 <= params.parallelism <= 5
            assert 1.0 <= params.backoff_scale <= 8.0
