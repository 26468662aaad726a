from typing import Any, Dict, FrozenSet, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Milestone(BaseModel):
    model_config = ConfigDict(frozen=True)

    milestone_id: str
    description: str
    completion_predicate: Dict[str, Any] = Field(default_factory=dict)
    participants: Optional[Tuple[str, ...]] = None  # character ids planning toward this milestone; None = all


class Outline(BaseModel):
    model_config = ConfigDict(frozen=True)

    title: str
    milestones: Tuple[Milestone, ...] = ()
    ending_condition: Tuple[str, ...] = ()

    @model_validator(mode="after")
    def _consistent(self):
        ids = [m.milestone_id for m in self.milestones]
        problems = []
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            problems.append(f"duplicate milestone ids {duplicates}")
        unknown = sorted(set(self.ending_condition) - set(ids))
        if unknown:
            problems.append(f"ending_condition references unknown milestones {unknown}")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class CharacterProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    character_id: str
    name: str
    traits: Tuple[str, ...] = ()
    initial_state: Dict[str, Any] = Field(default_factory=dict)


class PredicateSpec(BaseModel):
    """Binds one truth atom to a yes/no question."""

    model_config = ConfigDict(frozen=True)

    predicate_id: str
    atom_id: str
    question_template: str


class LongTermGoal(BaseModel):
    model_config = ConfigDict(frozen=True)

    milestone_id: str
    description: str


class ShortTermGoal(BaseModel):
    model_config = ConfigDict(frozen=True)

    character_id: str
    chapter_index: int
    goal_text: str
    derived_from: Tuple[str, ...] = Field(min_length=1)
    reasoning_trace_ref: str


class EntityWrite(BaseModel):
    model_config = ConfigDict(frozen=True)

    entity: str
    field: str
    value: str


class PlanStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    step_text: str
    affected_entities: Tuple[EntityWrite, ...] = ()


class ActionPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    character_id: str
    steps: Tuple[PlanStep, ...] = Field(min_length=1)
    goal_ref: str


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True)

    trajectory_id: str
    candidate_index: int
    seed: int
    base_env_version: str
    goals: Tuple[ShortTermGoal, ...]
    plans: Tuple[ActionPlan, ...]
    projected_env: Dict[str, Any]
    atom_values: Tuple[float, ...] = ()


class Chapter(BaseModel):
    model_config = ConfigDict(frozen=True)

    chapter_index: int
    trajectory_ref: str
    text: str
    characters: Tuple[str, ...] = ()
    env_version_after: str
    word_count: int


class StoryState(BaseModel):
    model_config = ConfigDict(frozen=True)

    outline: Outline
    characters: Tuple[CharacterProfile, ...]
    chapter_index: int = 0
    world_version: str = "v0"
    satisfied_milestones: FrozenSet[str] = frozenset()

    @property
    def character_names(self) -> List[str]:
        return [c.name for c in self.characters]


class EndingCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    done: bool
    satisfied_milestones: FrozenSet[str]


class NovelResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    title: str
    chapters: Tuple[Chapter, ...]
    final_env_version: str
    event_log_path: Optional[str] = None
    truncated: bool
    satisfied_milestones: FrozenSet[str] = frozenset()
    status: Literal["done", "truncated"] = "done"
