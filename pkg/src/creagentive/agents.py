"""
Story agents: goal/plan generation, candidate trajectories, chapter writing,
state commits and ending determination.

Agent-level retries report each malformed output as a violation event
followed by a retried event with scope=agent.
"""
import asyncio
import copy
import json
import re
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

from loguru import logger

from config.settings import settings
from src.dnf import truth_from_logits, truth_from_samples
from src.errors import (
    ChapterRejected,
    GoalGenerationFailed,
    HawkError,
    NoParseableAnswers,
    NoViableCandidates,
    UnparseableTrace,
)
from src.llm_clients import GenerationParams
from src.reasoning import ReasoningInput, reason
from src.resources import ResourceHandle, YesNoEvidence, ask_yes_no, generate
from src.security import OutputSchema, names_within, validate_output
from src.store import MemoryRecord, MemoryStore, StagedMemory, VersionStore, dump_body
from src.creagentive.models import (
    ActionPlan,
    CharacterProfile,
    Chapter,
    EndingCheck,
    EntityWrite,
    LongTermGoal,
    Milestone,
    Outline,
    PlanStep,
    PredicateSpec,
    ShortTermGoal,
    StoryState,
    Trajectory,
)
from src.creagentive.project import WORLD, character_key

Emit = Callable[[str, Optional[Dict[str, Any]]], None]
_WRITE = re.compile(r"@([\w-]+)\.([\w-]+)=(\S+)")
_GOAL = re.compile(r"^GOAL:\s*(.+?)\s*\|\s*PLAN:\s*(.+)$", re.DOTALL)


def _no_emit(kind: str, payload: Optional[Dict[str, Any]] = None) -> None:
    pass


def _agent_retry(emit: Emit, agent: str, attempt: int, code: str, message: str, will_retry: bool) -> None:
    emit("violation", {"scope": "agent", "agent": agent, "attempt": attempt, "code": code, "message": message})
    if will_retry:
        emit("retried", {"scope": "agent", "agent": agent, "attempt": attempt})


# --- goals ------------------------------------------------------------------------

def derive_long_term_goals(outline: Outline) -> List[LongTermGoal]:
    return [LongTermGoal(milestone_id=m.milestone_id, description=m.description) for m in outline.milestones]


def unmet_goals(goals: Sequence[LongTermGoal], satisfied: Set[str]) -> List[LongTermGoal]:
    return [g for g in goals if g.milestone_id not in satisfied]


def parse_goal_answer(answer: str) -> Tuple[str, List[PlanStep]]:
    """'GOAL: <text> | PLAN: <step>; <step>', steps may carry @entity.field=value writes."""
    match = _GOAL.match(answer.strip())
    if not match:
        raise UnparseableTrace(f"answer is not 'GOAL: ... | PLAN: ...': {answer[:80]!r}", raw=answer)
    steps = []
    for raw_step in match.group(2).split(";"):
        writes = tuple(EntityWrite(entity=e, field=f, value=v) for e, f, v in _WRITE.findall(raw_step))
        text = " ".join(_WRITE.sub("", raw_step).split())
        if text or writes:
            steps.append(PlanStep(step_text=text, affected_entities=writes))
    if not steps:
        raise UnparseableTrace("plan has no steps", raw=answer)
    return match.group(1).strip(), steps


def goal_prompt(character: CharacterProfile, env_doc: dict, memories: Sequence[MemoryRecord],
                goals: Sequence[LongTermGoal], chapter_index: int) -> str:
    memory_lines = [f"- [{m.kind}] {m.body}" for m in memories] or ["- (none)"]
    goal_lines = [f"- {g.milestone_id}: {g.description}" for g in goals] or ["- (all milestones met)"]
    return "\n".join([
        f"goal:{character.character_id}:ch{chapter_index}",
        f"You are {character.name} ({', '.join(character.traits)}), planning chapter {chapter_index}.",
        "Current environment:",
        json.dumps(env_doc, sort_keys=True),
        "Your recent memories:",
        *memory_lines,
        "Unmet story milestones:",
        *goal_lines,
        "Decide your short-term goal for this chapter and a step-by-step plan.",
        "Give the answer as 'GOAL: <goal> | PLAN: <step>; <step>'. A step may set state with @entity.field=value.",
    ])


async def generate_short_term_goal(character: CharacterProfile, env_doc: dict, memory,
                                   long_term_goals: Sequence[LongTermGoal], backend: ResourceHandle,
                                   chapter_index: int, seed: int = 0, emit: Emit = _no_emit,
                                   satisfied: Optional[Set[str]] = None) -> Tuple[ShortTermGoal, ActionPlan]:
    """CoT goal + plan for one character; both are appended to the character's memory."""
    unmet = unmet_goals(long_term_goals, satisfied or set())
    derived_from = tuple(g.milestone_id for g in (unmet or long_term_goals))
    if not derived_from:
        raise GoalGenerationFailed(character.character_id, "(outline has no milestones)")

    recent = memory.memory_query(character.character_id)[-settings.memory_window:]
    prompt = goal_prompt(character, env_doc, recent, unmet, chapter_index)
    params = GenerationParams(seed=seed)
    attempts = settings.goal_retry_budget + 1

    for attempt in range(1, attempts + 1):
        try:
            trace = await reason(ReasoningInput(question=prompt), backend, params, retries=0)
            goal_text, steps = parse_goal_answer(trace.answer)
            break
        except UnparseableTrace as e:
            _agent_retry(emit, f"goal:{character.character_id}", attempt, "unparseable_trace", str(e), attempt < attempts)
            logger.warning(f"⚠️ Goal for {character.character_id} ch{chapter_index} unparseable (attempt {attempt}/{attempts})")
    else:
        raise GoalGenerationFailed(character.character_id, f"after {attempts} attempt(s)")

    trace_ref = f"{character.character_id}:ch{chapter_index}:s{seed}"
    goal = ShortTermGoal(character_id=character.character_id, chapter_index=chapter_index, goal_text=goal_text,
                         derived_from=derived_from, reasoning_trace_ref=trace_ref)
    plan = ActionPlan(character_id=character.character_id, steps=tuple(steps), goal_ref=trace_ref)
    memory.memory_append(character.character_id, MemoryRecord(agent_id=character.character_id, kind="goal", body=goal_text))
    memory.memory_append(character.character_id, MemoryRecord(
        agent_id=character.character_id, kind="plan", body="; ".join(s.step_text for s in steps)))
    return goal, plan


# --- candidates ---------------------------------------------------------------------

def merge_plans(base_env: dict, plans: Sequence[ActionPlan]) -> dict:
    """Effects are appended in plan order; later writes to the same field win."""
    env = copy.deepcopy(base_env)
    effects = env.setdefault("effects", [])
    entities = env.setdefault("entities", {})
    flags = env.setdefault("flags", {})
    for plan in plans:
        for step in plan.steps:
            effects.append({"character": plan.character_id, "step": step.step_text})
            for w in step.affected_entities:
                if w.entity == "flags":
                    flags[w.field] = w.value
                else:
                    entities.setdefault(w.entity, {})[w.field] = w.value
    return env


def predicate_prompt(predicate: PredicateSpec, projected_env: dict, chapter_index: int, candidate_index: int,
                     outline: Outline, unmet: Sequence[LongTermGoal]) -> str:
    question = predicate.question_template.format(
        chapter=chapter_index,
        title=outline.title,
        milestone=unmet[0].description if unmet else "the ending",
    )
    return "\n".join([
        f"pred:{predicate.predicate_id}:{predicate.atom_id}:ch{chapter_index}:c{candidate_index}",
        question,
        "Projected environment:",
        json.dumps(projected_env, sort_keys=True),
    ])


def evidence_truth(evidence: YesNoEvidence) -> float:
    if evidence.kind == "logits":
        return truth_from_logits(evidence.v_yes, evidence.v_no)
    return truth_from_samples(evidence.m_yes, evidence.m_no)


async def evaluate_atoms(predicates: Sequence[PredicateSpec], projected_env: dict, backend: ResourceHandle,
                         chapter_index: int, candidate_index: int, seed: int, outline: Outline,
                         unmet: Sequence[LongTermGoal]) -> Tuple[float, ...]:
    params = GenerationParams(seed=seed, n_samples=settings.yes_no_samples)
    values = []
    for predicate in predicates:
        prompt = predicate_prompt(predicate, projected_env, chapter_index, candidate_index, outline, unmet)
        try:
            values.append(evidence_truth(await ask_yes_no(backend, prompt, params)))
        except NoParseableAnswers:
            logger.warning(f"⚠️ No parseable answers for {predicate.predicate_id}:{predicate.atom_id}, atom set to 0")
            values.append(0.0)
    return tuple(values)


def participants(state: StoryState, unmet: Sequence[LongTermGoal]) -> List[CharacterProfile]:
    """Characters named by the first unmet milestone, or everyone."""
    if unmet:
        milestone: Milestone = next(m for m in state.outline.milestones if m.milestone_id == unmet[0].milestone_id)
        if milestone.participants:
            chosen = [c for c in state.characters if c.character_id in milestone.participants]
            if chosen:
                return chosen
    return list(state.characters)


class CandidateBranch(NamedTuple):
    trajectory: Trajectory
    memory: StagedMemory


async def build_candidate(state: StoryState, env_doc: dict, base_version: str, candidate_index: int, seed: int,
                          backend: ResourceHandle, memory: MemoryStore, predicates: Sequence[PredicateSpec],
                          emit: Emit = _no_emit) -> CandidateBranch:
    chapter_index = state.chapter_index + 1
    long_term = derive_long_term_goals(state.outline)
    unmet = unmet_goals(long_term, set(state.satisfied_milestones))
    staged = memory.stage()
    goals, plans = [], []
    for character in participants(state, unmet):
        goal, plan = await generate_short_term_goal(character, env_doc, staged, long_term, backend, chapter_index,
                                                    seed=seed, emit=emit, satisfied=set(state.satisfied_milestones))
        goals.append(goal)
        plans.append(plan)
    projected = merge_plans(env_doc, plans)
    atoms = await evaluate_atoms(predicates, projected, backend, chapter_index, candidate_index, seed,
                                 state.outline, unmet)
    trajectory = Trajectory(
        trajectory_id=f"ch{chapter_index}-c{candidate_index}",
        candidate_index=candidate_index,
        seed=seed,
        base_env_version=base_version,
        goals=tuple(goals),
        plans=tuple(plans),
        projected_env=projected,
        atom_values=atoms,
    )
    return CandidateBranch(trajectory=trajectory, memory=staged)


async def generate_candidates(state: StoryState, env_doc: dict, base_version: str, n_candidates: int,
                              backend: ResourceHandle, seed: int, memory: MemoryStore,
                              predicates: Sequence[PredicateSpec], emit: Emit = _no_emit,
                              concurrent: bool = True) -> List[CandidateBranch]:
    """n candidates from one base version; candidate j uses seed + j and a private memory overlay."""
    if n_candidates < 1:
        raise ValueError("n_candidates must be at least 1")
    make = [lambda j=j: build_candidate(state, env_doc, base_version, j, seed + j, backend, memory, predicates, emit)
            for j in range(n_candidates)]
    if concurrent:
        outcomes = await asyncio.gather(*[m() for m in make], return_exceptions=True)
    else:
        outcomes = []
        for m in make:
            try:
                outcomes.append(await m())
            except GoalGenerationFailed as e:
                outcomes.append(e)

    branches = []
    for j, outcome in enumerate(outcomes):
        if isinstance(outcome, GoalGenerationFailed):
            logger.warning(f"⚠️ Candidate {j} dropped: {outcome}")
        elif isinstance(outcome, BaseException):
            raise outcome
        else:
            branches.append(outcome)
    if not branches:
        raise NoViableCandidates(f"all {n_candidates} candidate(s) failed goal generation")
    assert all(b.trajectory.base_env_version == base_version for b in branches)
    logger.info(f"🌿 {len(branches)}/{n_candidates} candidate trajectories for chapter {state.chapter_index + 1}")
    return branches


# --- writer -------------------------------------------------------------------------

CHAPTER_SCHEMA = OutputSchema(
    name="chapter",
    fields={"chapter_text": "string", "characters": "array"},
    required=("chapter_text",),
    rules=(names_within("characters"),),
)


def parse_writer_output(text: str) -> dict:
    """Prose followed by a final 'CHARACTERS: A, B' line."""
    lines = text.rstrip().splitlines()
    characters: List[str] = []
    if lines and lines[-1].strip().upper().startswith("CHARACTERS:"):
        names = lines.pop().split(":", 1)[1]
        characters = [n.strip() for n in names.split(",") if n.strip()]
    return {"chapter_text": "\n".join(lines).strip(), "characters": characters}


def writer_prompt(trajectory: Trajectory, env_doc: dict, chapter_index: int, title: str,
                  feedback: Optional[List[str]] = None) -> str:
    plan_lines = []
    for goal, plan in zip(trajectory.goals, trajectory.plans):
        plan_lines.append(f"- {plan.character_id} wants to {goal.goal_text}:")
        plan_lines.extend(f"    {i + 1}. {s.step_text}" for i, s in enumerate(plan.steps))
    parts = [
        f"write:ch{chapter_index}",
        f"Write chapter {chapter_index} of '{title}'.",
        "Environment before the chapter:",
        json.dumps(env_doc, sort_keys=True),
        "Selected character plans:",
        *plan_lines,
        "End with a line 'CHARACTERS: <name>, <name>' listing the characters who appear.",
    ]
    if feedback:
        parts.append("The previous draft was rejected:")
        parts.extend(f"- {v}" for v in feedback)
    return "\n".join(parts)


async def write_chapter(trajectory: Trajectory, env_doc: dict, backend: ResourceHandle, chapter_index: int,
                        character_names: Sequence[str], title: str = "", seed: int = 0,
                        emit: Emit = _no_emit) -> Chapter:
    attempts = settings.writer_max_retries + 1
    feedback: Optional[List[str]] = None
    violations: List[str] = []
    validation_env = {"character_names": list(character_names)}

    for attempt in range(1, attempts + 1):
        prompt = writer_prompt(trajectory, env_doc, chapter_index, title, feedback)
        completion = await generate(backend, prompt, GenerationParams(seed=seed))
        payload = parse_writer_output(completion.text)
        found = validate_output(CHAPTER_SCHEMA, payload, validation_env)
        if not found:
            emit("validated", {"scope": "agent", "agent": "writer", "schema": CHAPTER_SCHEMA.name, "attempt": attempt})
            text = payload["chapter_text"]
            return Chapter(
                chapter_index=chapter_index,
                trajectory_ref=trajectory.trajectory_id,
                text=text,
                characters=tuple(payload["characters"]),
                env_version_after=f"v{int(trajectory.base_env_version[1:]) + 1}",
                word_count=len(text.split()),
            )
        violations = [v.message for v in found]
        _agent_retry(emit, "writer", attempt, ",".join(sorted({v.code for v in found})), "; ".join(violations),
                     attempt < attempts)
        logger.warning(f"⚠️ Chapter {chapter_index} draft rejected (attempt {attempt}/{attempts}): {violations}")
        feedback = violations

    raise ChapterRejected(chapter_index, violations)


# --- commit & ending ------------------------------------------------------------------

async def commit_state(state: StoryState, chapter: Chapter, trajectory: Trajectory, store: VersionStore,
                       memory: MemoryStore, staged: Optional[StagedMemory] = None) -> StoryState:
    """World v(k+1) = projected env; winner memories flushed; one outcome record per participant."""
    new_version = await store.env_commit(WORLD, dump_body(trajectory.projected_env), trajectory.base_env_version)
    if new_version.value != chapter.env_version_after:
        raise HawkError(f"world advanced to {new_version.value}, chapter expected {chapter.env_version_after}")

    if staged is not None:
        staged.flush(new_version.value)
    entities = trajectory.projected_env.get("entities", {})
    by_id = {c.character_id: c for c in state.characters}
    for goal in trajectory.goals:
        cid = goal.character_id
        memory.memory_append(cid, MemoryRecord(agent_id=cid, kind="outcome", chapter_version=new_version.value,
                                               body=f"Chapter {chapter.chapter_index}: pursued '{goal.goal_text}'"))
        key = character_key(cid)
        doc = {**by_id[cid].model_dump(mode="json"), "state": entities.get(cid, {}),
               "last_chapter": chapter.chapter_index}
        await store.env_commit(key, dump_body(doc), store.head(key))

    logger.success(f"✅ Committed chapter {chapter.chapter_index} as {WORLD}@{new_version.value}")
    return state.model_copy(update={"chapter_index": chapter.chapter_index, "world_version": new_version.value})


def _rule_holds(predicate: Dict[str, Any], env: dict) -> bool:
    rule = predicate.get("rule")
    if rule == "entity_field_equals":
        value = env.get("entities", {}).get(predicate["entity"], {}).get(predicate["field"])
        return value is not None and str(value) == str(predicate["value"])
    if rule == "flag_set":
        return str(env.get("flags", {}).get(predicate["flag"], "")).lower() in ("true", "1", "yes")
    if rule == "effect_contains":
        needle = predicate["text"].lower()
        return any(needle in e.get("step", "").lower() for e in env.get("effects", []))
    raise HawkError(f"unknown completion rule '{rule}'")


async def milestone_satisfied(milestone: Milestone, env: dict, backend: Optional[ResourceHandle],
                              chapter_index: int, seed: int = 0) -> bool:
    predicate = milestone.completion_predicate
    if predicate.get("type", "rule") == "rule":
        return _rule_holds(predicate, env)
    if backend is None:
        raise HawkError(f"milestone {milestone.milestone_id} needs a model backend")
    prompt = "\n".join([
        f"end:{milestone.milestone_id}:ch{chapter_index}",
        predicate.get("question", f"Has this happened in the story: {milestone.description}?"),
        "Current environment:",
        json.dumps(env, sort_keys=True),
    ])
    evidence = await ask_yes_no(backend, prompt, GenerationParams(seed=seed, n_samples=settings.yes_no_samples))
    return evidence_truth(evidence) > 0.0


async def check_ending(state: StoryState, env_doc: dict, backend: Optional[ResourceHandle],
                       seed: int = 0) -> EndingCheck:
    """Sticky: milestones already satisfied are not re-evaluated."""
    satisfied = set(state.satisfied_milestones)
    for milestone in state.outline.milestones:
        if milestone.milestone_id in satisfied:
            continue
        if await milestone_satisfied(milestone, env_doc, backend, state.chapter_index, seed):
            logger.info(f"🏁 Milestone {milestone.milestone_id} satisfied after chapter {state.chapter_index}")
            satisfied.add(milestone.milestone_id)
    done = set(state.outline.ending_condition) <= satisfied
    return EndingCheck(done=done, satisfied_milestones=frozenset(satisfied))
