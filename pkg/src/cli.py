"""
`hawk` command line.

Exit codes: 0 success, 1 domain failure, 2 usage error, 3 environment error.
Human-readable text goes to stdout by default; --json prints one JSON document.
Logs go to stderr.
"""
import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import ValidationError

from config.logging_setup import setup_logging
from config.settings import settings
from src.controller import TaskParser
from src.dnf import DnfModel, TrainingHyper, accuracy, dataset_loss, extract_rules, load_dataset, train
from src.engine import EventLog, StrategyParams, WorkflowInstance, execute
from src.errors import HawkError, UsageError
from src.operators import OperatorDispatcher, Services, grant_all
from src.planner import plan
from src.registry import AgentRegistry, load_agent_spec
from src.resources import ResourceCatalog, ResourceResolver
from src.store import FileVersionStore, MemoryStore
from src.workflow_model import TaskRequest, TemplateCatalog, instantiate_workflow, load_workflow_spec, validate_workflow
from src.creagentive.pipeline import RunConfig, StoryRunner


def _emit(args, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        print(text)


def _options(pairs: List[str]) -> Dict[str, str]:
    options = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--option expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        options[key.strip()] = value
    return options


def _catalog(args) -> ResourceCatalog:
    if getattr(args, "resources", None):
        return ResourceCatalog.load(args.resources)
    return ResourceCatalog.from_settings()


# --- workflow commands --------------------------------------------------------------

async def _load_spec(args):
    if args.spec:
        return load_workflow_spec(args.spec)
    if not args.task:
        raise UsageError("one of --spec or --task is required")
    templates = TemplateCatalog.load(args.templates or settings.templates_dir)
    task = await TaskParser(templates).parse(TaskRequest(raw_text=args.task, options=_options(args.option)))
    if task.parameters.get("spec"):
        return load_workflow_spec(task.parameters["spec"])
    return instantiate_workflow(task, templates)


async def cmd_run(args) -> int:
    spec = await _load_spec(args)
    catalog = _catalog(args)
    resolver = ResourceResolver()
    wanted = sorted({n.params["resource"] for n in spec.nodes if "resource" in n.params})
    services = Services(
        store=FileVersionStore(args.root or settings.store_root),
        memory=MemoryStore(),
        registry=AgentRegistry.load(settings.registry_path) if Path(settings.registry_path).exists() else AgentRegistry(),
        resources={rid: resolver.resolve(catalog.get(rid)) for rid in wanted},
    )
    strategy = StrategyParams(parallelism=args.parallelism) if args.parallelism is not None else None
    instance = WorkflowInstance(spec, strategy=strategy, event_log=EventLog())
    dispatcher = OperatorDispatcher(services, capabilities=grant_all("cli"), principal="cli")
    result = await execute(instance, dispatcher, rng_seed=args.seed)
    if args.events:
        instance.event_log.write(args.events)

    statuses = {nid: s.value for nid, s in sorted(result.statuses.items())}
    lines = [f"{nid}: {status}" for nid, status in statuses.items()]
    lines += [f"  {nid} failed: {err}" for nid, err in sorted(result.failures.items())]
    _emit(args, {"spec_id": spec.spec_id, "succeeded": result.succeeded, "statuses": statuses,
                 "failures": result.failures}, "\n".join(lines))
    return 0 if result.succeeded else 1


async def cmd_plan(args) -> int:
    spec = await _load_spec(args)
    output = plan(spec)
    stages = [list(stage) for stage in output.stages]
    _emit(args, {"spec_id": spec.spec_id, "stages": stages}, json.dumps(stages))
    return 0


async def cmd_validate(args) -> int:
    spec = load_workflow_spec(args.spec)
    report = validate_workflow(spec)
    violations = [v.model_dump(mode="json") for v in report.violations]
    text = "ok" if report.ok else "\n".join(v.message for v in report.violations)
    _emit(args, {"spec_id": spec.spec_id, "ok": report.ok, "violations": violations}, text)
    return 0 if report.ok else 1


# --- agents ---------------------------------------------------------------------------

async def cmd_agents(args) -> int:
    registry = AgentRegistry.load(args.registry or settings.registry_path)
    if args.agents_command == "list":
        agents = registry.discover(args.capability or (), name_pattern=args.name) if (args.capability or args.name) \
            else list(registry.agents)
        rows = [d.model_dump(mode="json") for d in agents]
        text = "\n".join(f"{d.agent_id}\t{d.status.value}\t{d.health.value}\t{','.join(d.spec.capabilities)}"
                         for d in agents) or "(no agents)"
        _emit(args, {"agents": rows}, text)
    elif args.agents_command == "publish":
        descriptor = registry.publish(load_agent_spec(args.spec_file))
        _emit(args, descriptor.model_dump(mode="json"), f"published {descriptor.agent_id}")
    elif args.agents_command == "register":
        descriptor = await registry.register(args.agent_id, args.endpoint)
        _emit(args, descriptor.model_dump(mode="json"), f"registered {descriptor.agent_id} at {descriptor.endpoint}")
    elif args.agents_command == "retire":
        descriptor = registry.retire(args.agent_id)
        _emit(args, descriptor.model_dump(mode="json"), f"retired {descriptor.agent_id}")
    return 0


# --- dnf ------------------------------------------------------------------------------

async def cmd_dnf(args) -> int:
    if args.dnf_command == "train":
        names, dataset = load_dataset(args.data)
        n_labels = args.labels or (max(ex.label for ex in dataset) + 1)
        hyper = TrainingHyper(lr=args.lr, epochs=args.epochs, seed=args.seed)
        result = train(dataset, n_clauses=args.clauses, n_labels=max(n_labels, 2), hyper=hyper)
        result.model.save(args.out)
        summary = {"model": str(args.out), "final_loss": result.loss_curve[-1],
                   "accuracy": accuracy(result.model, dataset), "epochs": len(result.loss_curve)}
        _emit(args, summary, f"saved {args.out}: loss {summary['final_loss']:.6f}, accuracy {summary['accuracy']:.3f}")
    elif args.dnf_command == "eval":
        model = DnfModel.load(args.model)
        _, dataset = load_dataset(args.data)
        summary = {"accuracy": accuracy(model, dataset), "loss": dataset_loss(model, dataset)}
        _emit(args, summary, f"accuracy {summary['accuracy']:.3f}\nloss {summary['loss']:.6f}")
    elif args.dnf_command == "rules":
        model = DnfModel.load(args.model)
        names = load_dataset(args.data)[0] if args.data else None
        rules = extract_rules(model, args.threshold, names)
        rows = [{"label": y, "literals": sorted(clause)} for y, clause in rules]
        text = "\n".join(f"label {r['label']} <- {' & '.join(r['literals']) or 'true'}" for r in rows) or "(no rules)"
        _emit(args, {"rules": rows}, text)
    return 0


# --- creagentive & versions -------------------------------------------------------------

async def cmd_creagentive(args) -> int:
    config = RunConfig(
        project_dir=Path(args.project),
        out_dir=Path(args.out or Path(args.project) / "out"),
        n_candidates=args.candidates if args.candidates is not None else settings.n_candidates,
        max_chapters=args.max_chapters if args.max_chapters is not None else settings.max_chapters,
        seed=args.seed,
        backends=tuple(args.backend or ("mock-story",)),
        keep_losers=args.keep_losers,
        concurrent_candidates=not args.sequential,
    )
    result = await StoryRunner(config).run()
    text = "\n".join([
        f"'{result.title}': {len(result.chapters)} chapter(s), status {result.status}",
        f"world at {result.final_env_version}; milestones {sorted(result.satisfied_milestones)}",
        f"events: {result.event_log_path}",
    ])
    _emit(args, {"title": result.title, "chapters": len(result.chapters), "status": result.status,
                 "truncated": result.truncated, "final_env_version": result.final_env_version,
                 "satisfied_milestones": sorted(result.satisfied_milestones)}, text)
    return 0


async def cmd_versions(args) -> int:
    store = FileVersionStore(args.root or settings.store_root)
    rows = [{"version": e.version, "parent": e.parent, "ts": e.ts, "sha256": e.sha256}
            for e in store.env_history(args.key)]
    text = "\n".join(f"{r['version']}\tparent={r['parent'] or '-'}\t{r['ts']}\t{r['sha256'][:16]}" for r in rows)
    _emit(args, {"key": args.key, "versions": rows}, text)
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hawk", description="Hierarchical multi-agent workflow runner")
    parser.add_argument("--json", action="store_true", help="print one JSON document")
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL")
    # the same flags after any command; SUPPRESS keeps the top-level values when absent
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print one JSON document")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def spec_source(p):
        p.add_argument("--spec", help="workflow spec JSON file")
        p.add_argument("--task", help="free-text task request, instantiated from a template")
        p.add_argument("--option", action="append", default=[], help="task option key=value (repeatable)")
        p.add_argument("--templates", help="template catalog directory")

    p = sub.add_parser("run", parents=[common], help="execute a workflow")
    spec_source(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--resources", help="resource catalog JSON")
    p.add_argument("--root", help="version-store root")
    p.add_argument("--events", help="write the event log (NDJSON) here")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("plan", parents=[common], help="print execution stages")
    spec_source(p)
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("validate", parents=[common], help="check a workflow spec")
    p.add_argument("--spec", required=True)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("agents", parents=[common], help="agent registry administration")
    p.add_argument("--registry", help="registry JSON file")
    agents = p.add_subparsers(dest="agents_command", required=True)
    a = agents.add_parser("list", parents=[common])
    a.add_argument("--capability", action="append")
    a.add_argument("--name", help="fnmatch pattern on agent names")
    a = agents.add_parser("publish", parents=[common])
    a.add_argument("spec_file")
    a = agents.add_parser("register", parents=[common])
    a.add_argument("agent_id")
    a.add_argument("endpoint")
    a = agents.add_parser("retire", parents=[common])
    a.add_argument("agent_id")
    p.set_defaults(handler=cmd_agents)

    p = sub.add_parser("dnf", parents=[common], help="differentiable DNF decision model")
    dnf = p.add_subparsers(dest="dnf_command", required=True)
    d = dnf.add_parser("train", parents=[common])
    d.add_argument("--data", required=True)
    d.add_argument("--clauses", type=int, default=4)
    d.add_argument("--labels", type=int, default=None)
    d.add_argument("--lr", type=float, default=0.05)
    d.add_argument("--epochs", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d = dnf.add_parser("eval", parents=[common])
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d = dnf.add_parser("rules", parents=[common])
    d.add_argument("--model", required=True)
    d.add_argument("--data", help="dataset whose atom names label the literals")
    d.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(handler=cmd_dnf)

    p = sub.add_parser("creagentive", parents=[common], help="story generation")
    story = p.add_subparsers(dest="story_command", required=True)
    s = story.add_parser("run", parents=[common])
    s.add_argument("--project", required=True)
    s.add_argument("--out")
    s.add_argument("--candidates", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-chapters", type=int, default=None)
    s.add_argument("--backend", action="append", help="model resource id; repeat for failover order")
    s.add_argument("--keep-losers", action="store_true")
    s.add_argument("--sequential", action="store_true", help="generate candidates one at a time")
    p.set_defaults(handler=cmd_creagentive)

    p = sub.add_parser("versions", parents=[common], help="list a key's version chain")
    p.add_argument("key")
    p.add_argument("--root", help="version-store root")
    p.set_defaults(handler=cmd_versions)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level or settings.log_level, settings.log_file)
    try:
        return asyncio.run(args.handler(args))
    except HawkError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ invalid value: {e}")
        first = e.errors()[0]
        field = '.'.join(map(str, first['loc'])) or e.title
        print(f"error: invalid value for {field}: {first['msg']}", file=sys.stderr)
        return UsageError.exit_code
    except json.JSONDecodeError as e:
        logger.error(f"❌ malformed JSON: {e}")
        print(f"error: malformed JSON: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
