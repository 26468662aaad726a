"""
Story pipeline: one HAWK workflow instance per chapter.

Each chapter instantiates the novel-generation template and runs it through
the workflow engine. Every node is served by a registered in-process story
agent found through capability discovery; the agents share one StorySession
passed in through Services.extras.
"""
import functools
import json
import re
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from config.settings import settings
from src.controller import parse_task_request
from src.dnf import DnfModel
from src.engine import EventLog, StrategyParams, WorkflowInstance, execute
from src.errors import ChapterRejected, NoViableCandidates, StoryWorkflowFailed, UsageError
from src.monitor import monitor_snapshot, optimize
from src.operators import ExecutionContext, OperatorDispatcher, Services, TaskPolicy, TaskResult, tune
from src.registry import INPROC, AgentRegistry, AgentSpecification
from src.resources import ResourceCatalog, ResourceDescriptor, ResourceHandle, ResourceKind, ResourceResolver
from src.security import Capability
from src.store import FileVersionStore, MemoryStore, VersionStore
from src.workflow_model import TaskNode, TaskRequest, TemplateCatalog, instantiate_workflow
from src.creagentive import agents
from src.creagentive.decision import Decision, decide
from src.creagentive.models import Chapter, EndingCheck, NovelResult, PredicateSpec, StoryState
from src.creagentive.project import WORLD, initialize, load_decision_model, load_predicates

STORY_KIND = "novel-generation"
STORY_PRINCIPAL = "creagentive"
STORY_AGENT_VERSION = "1.0.0"


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    project_dir: Path
    out_dir: Path
    n_candidates: int = Field(default_factory=lambda: settings.n_candidates, ge=1)
    max_chapters: int = Field(default_factory=lambda: settings.max_chapters, ge=1)
    seed: int = 0
    backends: Sequence[str] = ("mock-story",)
    keep_losers: bool = False
    concurrent_candidates: bool = True
    store_root: Optional[Path] = None


class StorySession:
    """Mutable story state shared by the story agents of one run."""

    def __init__(self, config: RunConfig, state: StoryState, store: VersionStore, memory: MemoryStore,
                 model: DnfModel, predicates: List[PredicateSpec]):
        self.config = config
        self.state = state
        self.store = store
        self.memory = memory
        self.model = model
        self.predicates = predicates
        self.chapters: List[Chapter] = []
        self.errors: Dict[str, BaseException] = {}
        self.reset()

    def reset(self) -> None:
        self.env_doc: dict = {}
        self.base_version: str = ""
        self.branches: List[agents.CandidateBranch] = []
        self.decision: Optional[Decision] = None
        self.chapter: Optional[Chapter] = None
        self.ending: Optional[EndingCheck] = None
        self.errors.clear()

    @property
    def next_chapter(self) -> int:
        return self.state.chapter_index + 1


# --- story agents -------------------------------------------------------------------

def _session(ctx: ExecutionContext) -> StorySession:
    return ctx.services.extras["session"]


def _story_agent(fn):
    @functools.wraps(fn)
    async def handler(node: TaskNode, ctx: ExecutionContext) -> Any:
        session = _session(ctx)
        try:
            return await fn(session, node, ctx)
        except Exception as e:
            session.errors[node.node_id] = e
            raise
    return handler


def _backend(node: TaskNode, ctx: ExecutionContext) -> ResourceHandle:
    resource_id = node.params["resource"]
    ctx.require(f"model/{resource_id}", "invoke")
    return ctx.services.resource(resource_id)


@_story_agent
async def load_environment(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    ctx.require(f"env/{WORLD}", "read")
    doc = session.store.env_get(WORLD)
    session.env_doc = json.loads(doc.body)
    session.base_version = doc.version.value
    return {"key": WORLD, "version": session.base_version}


@_story_agent
async def derive_goals(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    goals = agents.derive_long_term_goals(session.state.outline)
    unmet = agents.unmet_goals(goals, set(session.state.satisfied_milestones))
    return {"long_term": [g.milestone_id for g in goals], "unmet": [g.milestone_id for g in unmet]}


@_story_agent
async def generate_candidates(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    backend = _backend(node, ctx)
    session.branches = await agents.generate_candidates(
        session.state, session.env_doc, session.base_version,
        n_candidates=int(node.params.get("n_candidates", session.config.n_candidates)),
        backend=backend,
        seed=int(node.params.get("seed", session.config.seed)),
        memory=session.memory,
        predicates=session.predicates,
        emit=ctx.emit,
        concurrent=session.config.concurrent_candidates,
    )
    return {"candidates": [{"trajectory_id": b.trajectory.trajectory_id, "atoms": list(b.trajectory.atom_values)}
                           for b in session.branches]}


@_story_agent
async def select_trajectory(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    session.decision = decide(session.model, [b.trajectory for b in session.branches])
    return {"winner": session.decision.trajectory.trajectory_id, "accept_scores": session.decision.accept_scores}


@_story_agent
async def write_chapter(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    backend = _backend(node, ctx)
    session.chapter = await agents.write_chapter(
        session.decision.trajectory, session.env_doc, backend, session.next_chapter,
        character_names=session.state.character_names,
        title=session.state.outline.title,
        seed=session.config.seed,
        emit=ctx.emit,
    )
    return {"chapter": session.chapter.chapter_index, "word_count": session.chapter.word_count}


@_story_agent
async def commit_state(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    ctx.require(f"env/{WORLD}", "write")
    winner = session.branches[session.decision.index]
    session.state = await agents.commit_state(session.state, session.chapter, winner.trajectory,
                                              session.store, session.memory, staged=winner.memory)
    session.chapters.append(session.chapter)
    return {"key": WORLD, "version": session.state.world_version}


@_story_agent
async def evaluate_ending(session: StorySession, node: TaskNode, ctx: ExecutionContext) -> dict:
    backend = _backend(node, ctx)
    env = json.loads(session.store.env_get(WORLD).body)
    session.ending = await agents.check_ending(session.state, env, backend, seed=session.config.seed)
    session.state = session.state.model_copy(update={"satisfied_milestones": session.ending.satisfied_milestones})
    return {"done": session.ending.done, "satisfied": sorted(session.ending.satisfied_milestones)}


STORY_AGENTS = {
    "environment": {"load-environment": load_environment, "commit-state": commit_state},
    "goal": {"derive-goals": derive_goals},
    "candidate": {"generate-candidates": generate_candidates},
    "decision": {"select-trajectory": select_trajectory},
    "writer": {"write-chapter": write_chapter},
    "ending": {"evaluate-ending": evaluate_ending},
}


def _route(table):
    async def handler(node: TaskNode, ctx: ExecutionContext) -> Any:
        for capability in node.params["capabilities"]:
            if capability in table:
                return await table[capability](node, ctx)
        raise StoryWorkflowFailed(node.node_id, f"agent cannot serve {node.params['capabilities']}")
    return handler


async def register_story_agents(registry: AgentRegistry) -> None:
    """Publish and register every story agent at inproc://<name> (idempotent per registry)."""
    for name, table in STORY_AGENTS.items():
        spec = AgentSpecification(name=name, version=STORY_AGENT_VERSION, capabilities=tuple(table))
        if any(d.agent_id == spec.agent_id for d in registry.agents):
            continue
        registry.publish(spec)
        await registry.register(spec.agent_id, f"{INPROC}{name}", handler=_route(table))


def story_capabilities() -> tuple:
    return tuple(Capability(principal=STORY_PRINCIPAL, resource_pattern=pattern,
                            actions=frozenset({"read", "write", "invoke"}))
                 for pattern in ("agent/*", "env/*", "model/*"))


def story_catalog(project_dir) -> ResourceCatalog:
    """A mock model per fixtures/<name>.json, overridden by the project's resources.json."""
    project_dir = Path(project_dir)
    catalog = ResourceCatalog([])
    fixtures = project_dir / "fixtures"
    for path in sorted(fixtures.glob("*.json")):
        catalog.add(ResourceDescriptor(resource_id=path.stem, kind=ResourceKind.MODEL, uri=f"mock://{path.stem}",
                                       options={"fixtures_root": str(fixtures)}))
    overrides = project_dir / "resources.json"
    if overrides.exists():
        for descriptor in ResourceCatalog.load(overrides).descriptors.values():
            options = dict(descriptor.options)
            if descriptor.scheme == "mock":
                options.setdefault("fixtures_root", str(fixtures))
            catalog.add(descriptor.model_copy(update={"options": options}))
    return catalog


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "story"


def backend_history(instance: WorkflowInstance) -> List[TaskResult]:
    """Per-attempt outcomes of backend-bound nodes, read back from the event log."""
    backends = {n.node_id: n.params["resource"] for n in instance.spec.nodes if "resource" in n.params}
    history = []
    for event in instance.event_log.for_instance(instance.instance_id):
        if event.node_id in backends and event.kind in ("succeeded", "failed"):
            metrics = {"backend": backends[event.node_id]}
            if "error_class" in event.payload:
                metrics["error_class"] = event.payload["error_class"]
            history.append(TaskResult(status=event.kind, metrics=metrics))
    return history


class StoryRunner:
    def __init__(self, config: RunConfig, registry: Optional[AgentRegistry] = None,
                 resolver: Optional[ResourceResolver] = None, catalog: Optional[ResourceCatalog] = None,
                 templates: Optional[TemplateCatalog] = None, clock=None):
        self.config = config
        self.registry = registry or AgentRegistry()
        self.catalog = catalog or story_catalog(config.project_dir)
        resolver = resolver or ResourceResolver()
        self.handles: Dict[str, ResourceHandle] = {b: resolver.resolve(self.catalog.get(b)) for b in config.backends}
        self.templates = templates or TemplateCatalog.load(settings.templates_dir)
        self.clock = clock
        self.event_log = EventLog()
        self.story_id = _slug(Path(config.project_dir).resolve().name)
        self.history: List[TaskResult] = []

    def _fresh_store(self) -> FileVersionStore:
        """A run-owned store under out_dir is replaced; an explicit store_root must be empty."""
        if self.config.store_root is not None:
            store = FileVersionStore(self.config.store_root)
            if store.keys():
                raise UsageError(f"store root {self.config.store_root} already holds version chains "
                                 f"({', '.join(store.keys())}); point the run at an empty directory")
            return store
        for leftover in ("store", "chapters", "losers"):
            path = self.config.out_dir / leftover
            if path.exists():
                logger.info(f"♻️ Clearing {path} from a previous run")
                shutil.rmtree(path)
        return FileVersionStore(self.config.out_dir / "store")

    def _open_session(self) -> StorySession:
        store = self._fresh_store()
        memory = MemoryStore()
        state = initialize(self.config.project_dir, store, memory)
        predicates = load_predicates(self.config.project_dir)
        model = load_decision_model(self.config.project_dir, len(predicates))
        return StorySession(self.config, state, store, memory, model, predicates)

    def _chapter_instance(self, chapter_index: int, backend: str, strategy: Optional[StrategyParams]) -> WorkflowInstance:
        request = TaskRequest(raw_text=f"write novel chapter {chapter_index}", options={
            "kind": STORY_KIND,
            "chapter": str(chapter_index),
            "n_candidates": str(self.config.n_candidates),
            "seed": str(self.config.seed),
            "backend": backend,
        })
        spec = parse_task_request(request, self.templates)
        workflow = instantiate_workflow(spec, self.templates)
        return WorkflowInstance(workflow, strategy=strategy, event_log=self.event_log,
                                instance_id=f"{self.story_id}-ch{chapter_index}")

    def _raise_failure(self, session: StorySession, instance: WorkflowInstance, failures: Dict[str, str]) -> None:
        for node_id in instance.spec.node_ids:
            if node_id not in failures:
                continue
            error = session.errors.get(node_id)
            if isinstance(error, (NoViableCandidates, ChapterRejected)):
                raise error
            raise StoryWorkflowFailed(node_id, failures[node_id])

    def _write_losers(self, session: StorySession) -> None:
        losers = self.config.out_dir / "losers"
        losers.mkdir(parents=True, exist_ok=True)
        for j, branch in enumerate(session.branches):
            if j == session.decision.index:
                continue
            path = losers / f"{branch.trajectory.trajectory_id}.json"
            path.write_text(branch.trajectory.model_dump_json(indent=2), encoding="utf-8")

    def _write_outputs(self, session: StorySession) -> Path:
        out = self.config.out_dir
        (out / "chapters").mkdir(parents=True, exist_ok=True)
        parts = [f"# {session.state.outline.title}\n"]
        for chapter in session.chapters:
            body = f"## Chapter {chapter.chapter_index}\n\n{chapter.text}\n"
            (out / "chapters" / f"ch{chapter.chapter_index}.md").write_text(body, encoding="utf-8")
            parts.append(body)
        (out / "novel.md").write_text("\n".join(parts), encoding="utf-8")
        log_path = out / "run.events.ndjson"
        self.event_log.write(log_path)
        return log_path

    async def run(self) -> NovelResult:
        self.config.out_dir.mkdir(parents=True, exist_ok=True)
        await register_story_agents(self.registry)
        session = self._open_session()
        services = Services(store=session.store, memory=session.memory, registry=self.registry,
                            resources=self.handles, extras={"session": session})
        policy = TaskPolicy(preferred_backend=self.config.backends[0],
                            alternate_backends=tuple(self.config.backends[1:]),
                            timeout=settings.default_timeout * 4)
        strategy: Optional[StrategyParams] = None

        initial_env = json.loads(session.store.env_get(WORLD).body)
        ending = await agents.check_ending(session.state, initial_env, self.handles[policy.preferred_backend],
                                           seed=self.config.seed)
        session.state = session.state.model_copy(update={"satisfied_milestones": ending.satisfied_milestones})
        done = ending.done
        title = session.state.outline.title
        logger.info(f"📖 Writing '{title}' (up to {self.config.max_chapters} chapter(s), "
                    f"{self.config.n_candidates} candidate(s) each)")

        while not done and session.state.chapter_index < self.config.max_chapters:
            k = session.next_chapter
            session.reset()
            instance = self._chapter_instance(k, policy.preferred_backend, strategy)
            dispatcher = OperatorDispatcher(services, capabilities=story_capabilities(), principal=STORY_PRINCIPAL,
                                            agent_timeout=policy.timeout)
            result = await execute(instance, dispatcher, clock=self.clock, rng_seed=self.config.seed + k)
            if not result.succeeded:
                self._write_outputs(session)
                self._raise_failure(session, instance, result.failures)

            if self.config.keep_losers:
                self._write_losers(session)
            strategy = optimize(monitor_snapshot(instance), instance.strategy)
            self.history.extend(backend_history(instance))
            policy = tune(self.history, policy)
            done = session.ending.done
            logger.success(f"✅ Chapter {k} written ({session.chapter.word_count} words), "
                           f"milestones {sorted(session.state.satisfied_milestones)}")

        log_path = self._write_outputs(session)
        truncated = not done
        if truncated:
            logger.warning(f"⚠️ Stopped at max_chapters={self.config.max_chapters} before the ending condition held")
        return NovelResult(
            title=title,
            chapters=tuple(session.chapters),
            final_env_version=session.store.head(WORLD).value,
            event_log_path=str(log_path),
            truncated=truncated,
            satisfied_milestones=session.state.satisfied_milestones,
            status="truncated" if truncated else "done",
        )


async def run(config: RunConfig, **kwargs) -> NovelResult:
    return await StoryRunner(config, **kwargs).run()
