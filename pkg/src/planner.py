from typing import Dict, List, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.errors import CyclicSpec, InvalidWorkflowSpec
from src.workflow_model import WorkflowSpec, validate_workflow


class PlannerOutput(BaseModel):
    model_config = ConfigDict(frozen=True)

    stages: Tuple[Tuple[str, ...], ...]
    order_index: Dict[str, int]


def plan(spec: WorkflowSpec) -> PlannerOutput:
    """Minimal-depth stages: roots at 0, every other node one past its deepest dependency."""
    report = validate_workflow(spec)
    cycles = report.cycles()
    if cycles:
        raise CyclicSpec(cycles[0])
    if not report.ok:
        raise InvalidWorkflowSpec("; ".join(v.message for v in report.violations))

    deps = {n.node_id: n.depends_on for n in spec.nodes}
    order_index: Dict[str, int] = {}

    def depth(node_id: str) -> int:
        # iterative post-order so deep chains do not hit the recursion limit
        stack = [node_id]
        while stack:
            current = stack[-1]
            if current in order_index:
                stack.pop()
                continue
            pending = [d for d in deps[current] if d not in order_index]
            if pending:
                stack.extend(pending)
                continue
            order_index[current] = 1 + max((order_index[d] for d in deps[current]), default=-1)
            stack.pop()
        return order_index[node_id]

    for node_id in sorted(deps):
        depth(node_id)

    n_stages = 1 + max(order_index.values(), default=-1)
    buckets: List[List[str]] = [[] for _ in range(n_stages)]
    for node_id, stage in order_index.items():
        buckets[stage].append(node_id)
    stages = tuple(tuple(sorted(b)) for b in buckets)

    logger.debug(f"Planned {spec.spec_id}: {len(stages)} stage(s)")
    return PlannerOutput(stages=stages, order_index=order_index)
