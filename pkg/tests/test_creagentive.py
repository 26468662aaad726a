import json

import pytest

from src.creagentive import agents
from src.creagentive.decision import decide
from src.creagentive.models import (
    ActionPlan,
    CharacterProfile,
    EntityWrite,
    LongTermGoal,
    Milestone,
    Outline,
    PlanStep,
    ShortTermGoal,
    StoryState,
    Trajectory,
)
from src.creagentive.pipeline import story_catalog
from src.creagentive.project import WORLD, initialize, load_decision_model, load_predicates
from src.dnf import default_decision_model
from src.errors import ChapterRejected, GoalGenerationFailed, MissingFile, NoCandidates, SchemaError, UnparseableTrace
from src.resources import ResourceResolver
from src.store import InMemoryVersionStore, MemoryRecord, MemoryStore
from tests.conftest import mock_handle

ALICE = CharacterProfile(character_id="alice", name="Alice", traits=("curious",))


class Events:
    def __init__(self):
        self.seen = []

    def __call__(self, kind, payload=None):
        self.seen.append((kind, dict(payload or {})))

    @property
    def kinds(self):
        return [k for k, _ in self.seen]


def demo_backend(project):
    return ResourceResolver().resolve(story_catalog(project).get("mock-story"))


def simple_trajectory(base="v0"):
    goal = ShortTermGoal(character_id="alice", chapter_index=1, goal_text="reach the tower", derived_from=("m1",),
                         reasoning_trace_ref="alice:ch1:s0")
    plan = ActionPlan(character_id="alice", steps=(PlanStep(step_text="climb"),), goal_ref="alice:ch1:s0")
    return Trajectory(trajectory_id="ch1-c0", candidate_index=0, seed=0, base_env_version=base, goals=(goal,),
                      plans=(plan,), projected_env={"entities": {"alice": {"location": "tower"}}, "flags": {},
                                                    "effects": []})


def test_initialize_commits_world_and_characters(demo_project):
    store, memory = InMemoryVersionStore(), MemoryStore()
    state = initialize(demo_project, store, memory)
    assert state.outline.title == "The Tower at Dawn"
    assert [c.character_id for c in state.characters] == ["alice", "bob"]
    assert store.keys() == ["char/alice", "char/bob", WORLD]
    assert all(store.head(k).value == "v0" for k in store.keys())
    assert store.env_get(WORLD).json()["entities"]["alice"]["location"] == "village"


def test_missing_outline(demo_project):
    (demo_project / "outline.json").unlink()
    with pytest.raises(MissingFile):
        initialize(demo_project, InMemoryVersionStore())


def test_outline_with_unknown_ending_milestone(demo_project):
    outline = json.loads((demo_project / "outline.json").read_text())
    outline["ending_condition"].append("m9")
    (demo_project / "outline.json").write_text(json.dumps(outline))
    with pytest.raises(SchemaError) as exc:
        initialize(demo_project, InMemoryVersionStore())
    assert exc.value.file == "outline.json"


def test_decision_model_must_match_predicates(demo_project):
    predicates = load_predicates(demo_project)
    assert load_decision_model(demo_project, len(predicates)).n_atoms == 2
    with pytest.raises(SchemaError):
        load_decision_model(demo_project, 3)


def test_goal_answer_grammar():
    goal, steps = agents.parse_goal_answer("GOAL: reach the tower | PLAN: climb the path @alice.location=tower; rest")
    assert goal == "reach the tower"
    assert steps == [
        PlanStep(step_text="climb the path", affected_entities=(EntityWrite(entity="alice", field="location",
                                                                            value="tower"),)),
        PlanStep(step_text="rest"),
    ]
    with pytest.raises(UnparseableTrace):
        agents.parse_goal_answer("I would like to climb")


@pytest.mark.asyncio
async def test_goal_and_plan_enter_memory():
    handle = mock_handle({"goal:alice:ch1": {"text": "1. It is time.\nANSWER: GOAL: climb | PLAN: take rope; climb"}})
    memory = MemoryStore()
    goal, plan = await agents.generate_short_term_goal(
        ALICE, {}, memory, [LongTermGoal(milestone_id="m1", description="reach the tower")], handle, 1)
    assert goal.derived_from == ("m1",)
    assert [s.step_text for s in plan.steps] == ["take rope", "climb"]
    assert [(r.kind, r.body) for r in memory.memory_query("alice")] == [("goal", "climb"), ("plan", "take rope; climb")]


@pytest.mark.asyncio
async def test_unparseable_goal_twice_fails():
    handle = mock_handle({"goal:alice:ch1": {"text": "ANSWER: I have no idea"}})
    events = Events()
    with pytest.raises(GoalGenerationFailed):
        await agents.generate_short_term_goal(ALICE, {}, MemoryStore(),
                                              [LongTermGoal(milestone_id="m1", description="d")], handle, 1,
                                              emit=events)
    assert events.kinds == ["violation", "retried", "violation"]
    assert all(p["scope"] == "agent" for _, p in events.seen)


@pytest.mark.asyncio
async def test_goal_prompt_sees_only_recent_memories():
    handle = mock_handle({"goal:alice:ch1": {"text": "ANSWER: GOAL: wait | PLAN: sit"}})
    memory = MemoryStore()
    for i in range(1, 16):
        memory.memory_append("alice", MemoryRecord(agent_id="alice", kind="observation", body=f"obs {i:02d}"))
    await agents.generate_short_term_goal(ALICE, {}, memory, [LongTermGoal(milestone_id="m1", description="d")],
                                          handle, 1)
    prompt = handle.provider.captured_prompts[0]
    assert "obs 06" in prompt and "obs 15" in prompt
    assert "obs 05" not in prompt


def test_merge_plans_applies_writes_in_order():
    plans = [
        ActionPlan(character_id="alice", goal_ref="g", steps=(
            PlanStep(step_text="go", affected_entities=(EntityWrite(entity="alice", field="location", value="tower"),)),)),
        ActionPlan(character_id="bob", goal_ref="g", steps=(
            PlanStep(step_text="open", affected_entities=(EntityWrite(entity="flags", field="gate_open", value="true"),
                                                          EntityWrite(entity="alice", field="location",
                                                                      value="hall"))),)),
    ]
    base = {"entities": {"alice": {"location": "village"}}, "flags": {}, "effects": []}
    env = agents.merge_plans(base, plans)
    assert env["entities"]["alice"]["location"] == "hall"
    assert env["flags"] == {"gate_open": "true"}
    assert env["effects"] == [{"character": "alice", "step": "go"}, {"character": "bob", "step": "open"}]
    assert base["entities"]["alice"]["location"] == "village"


@pytest.mark.asyncio
async def test_candidates_share_a_base_and_keep_memory_private(demo_project):
    store, memory = InMemoryVersionStore(), MemoryStore()
    state = initialize(demo_project, store, memory)
    env = store.env_get(WORLD).json()
    branches = await agents.generate_candidates(state, env, "v0", 3, demo_backend(demo_project), seed=0,
                                                memory=memory, predicates=load_predicates(demo_project))

    trajectories = [b.trajectory for b in branches]
    assert [t.trajectory_id for t in trajectories] == ["ch1-c0", "ch1-c1", "ch1-c2"]
    assert [t.seed for t in trajectories] == [0, 1, 2]
    assert {t.base_env_version for t in trajectories} == {"v0"}
    assert [t.atom_values for t in trajectories] == [(-0.5, 1.0), (1.0, 0.5), (0.0, 1.0)]
    assert all(t.projected_env["entities"]["alice"]["location"] == "tower" for t in trajectories)
    assert [g.character_id for g in trajectories[0].goals] == ["alice"]
    assert memory.memory_query("alice") == []

    decision = decide(load_decision_model(demo_project, 2), trajectories)
    assert decision.index == 1


@pytest.mark.asyncio
async def test_goal_failures_drop_only_their_candidate():
    outline = Outline(title="T", milestones=(Milestone(milestone_id="m1", description="d"),))
    state = StoryState(outline=outline, characters=(ALICE,))
    handle = mock_handle({"goal:alice:ch1": {"variants": ["ANSWER: GOAL: go | PLAN: walk", "ANSWER: nonsense"]}})
    branches = await agents.generate_candidates(state, {}, "v0", 2, handle, seed=0, memory=MemoryStore(),
                                                predicates=[])
    assert [b.trajectory.trajectory_id for b in branches] == ["ch1-c0"]


def test_decide_without_candidates():
    with pytest.raises(NoCandidates):
        decide(default_decision_model(2), [])


@pytest.mark.asyncio
async def test_writer_retries_with_feedback():
    handle = mock_handle({"write:ch1": {"responses": ["A stranger came.\nCHARACTERS: Mallory",
                                                      "Alice climbed.\nCHARACTERS: Alice"]}})
    events = Events()
    chapter = await agents.write_chapter(simple_trajectory(), {}, handle, 1, ["Alice", "Bob"], emit=events)

    assert chapter.text == "Alice climbed."
    assert chapter.characters == ("Alice",)
    assert chapter.env_version_after == "v1"
    assert chapter.word_count == 2
    assert events.kinds == ["violation", "retried", "validated"]
    assert events.seen[0][1]["code"] == "unknown_character"
    assert "Mallory" in handle.provider.captured_prompts[1]


@pytest.mark.asyncio
async def test_writer_gives_up_after_retries():
    handle = mock_handle({"write:ch1": {"text": "CHARACTERS: Alice"}})
    events = Events()
    with pytest.raises(ChapterRejected) as exc:
        await agents.write_chapter(simple_trajectory(), {}, handle, 1, ["Alice"], emit=events)
    assert exc.value.chapter_index == 1
    assert events.kinds.count("violation") == 3
    assert events.kinds.count("retried") == 2


@pytest.mark.asyncio
async def test_commit_advances_world_and_flushes_winner_memory(demo_project):
    store, memory = InMemoryVersionStore(), MemoryStore()
    state = initialize(demo_project, store, memory)
    staged = memory.stage()
    staged.memory_append("alice", MemoryRecord(agent_id="alice", kind="goal", body="reach the tower"))
    trajectory = simple_trajectory()
    chapter = await agents.write_chapter(trajectory, {}, mock_handle({"write:ch1": {"text": "Alice went.\nCHARACTERS: Alice"}}),
                                         1, state.character_names)

    new_state = await agents.commit_state(state, chapter, trajectory, store, memory, staged=staged)

    assert new_state.chapter_index == 1 and new_state.world_version == "v1"
    assert store.env_get(WORLD).json() == trajectory.projected_env
    assert store.env_get("char/alice").json()["state"] == {"location": "tower"}
    assert store.head("char/bob").value == "v0"
    assert [(r.kind, r.chapter_version) for r in memory.memory_query("alice")] == [("goal", "v1"), ("outcome", "v1")]


@pytest.mark.asyncio
async def test_ending_is_sticky_and_needs_every_milestone(demo_project):
    state = initialize(demo_project, InMemoryVersionStore())
    env = {"entities": {"alice": {"location": "tower"}, "bob": {"has_key": "false"}}, "flags": {}, "effects": []}
    first = await agents.check_ending(state, env, None)
    assert first.satisfied_milestones == {"m1"}
    assert not first.done

    state = state.model_copy(update={"satisfied_milestones": first.satisfied_milestones})
    env = {"entities": {"alice": {"location": "hall"}, "bob": {"has_key": "true"}}, "flags": {"gate_open": "true"},
           "effects": []}
    second = await agents.check_ending(state, env, None)
    assert second.satisfied_milestones == {"m1", "m2", "m3"}
    assert second.done


@pytest.mark.asyncio
async def test_model_judged_milestone():
    milestone = Milestone(milestone_id="m9", description="the sea rises", completion_predicate={"type": "llm"})
    yes = mock_handle({"end:m9:ch2": {"samples": ["Yes", "Yes", "No", "Yes"]}})
    no = mock_handle({"end:m9:ch2": {"samples": ["No"]}})
    assert await agents.milestone_satisfied(milestone, {}, yes, 2)
    assert not await agents.milestone_satisfied(milestone, {}, no, 2)
