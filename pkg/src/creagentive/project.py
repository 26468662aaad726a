"""Story project loading and initialization (world and character chains at v0)."""
import json
from pathlib import Path
from typing import Any, List, Optional, Tuple, Type, TypeVar

from loguru import logger
from pydantic import BaseModel, ValidationError

from src.dnf import DnfModel, default_decision_model
from src.errors import MissingFile, SchemaError
from src.store import MemoryRecord, MemoryStore, VersionStore, dump_body
from src.creagentive.models import CharacterProfile, Outline, PredicateSpec, StoryState

WORLD = "world"
M = TypeVar("M", bound=BaseModel)


def character_key(character_id: str) -> str:
    return f"char/{character_id}"


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise MissingFile(f"missing {path.name} in {path.parent}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(path.name, [f"invalid JSON: {e}"])


def _model(cls: Type[M], path: Path, data: Any) -> M:
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise SchemaError(path.name, [err["msg"] for err in e.errors()])


def load_outline(project_dir) -> Outline:
    path = Path(project_dir) / "outline.json"
    return _model(Outline, path, _read_json(path))


def load_environment(project_dir) -> dict:
    path = Path(project_dir) / "environment.json"
    env = _read_json(path)
    if not isinstance(env, dict):
        raise SchemaError(path.name, ["environment must be a JSON object"])
    env.setdefault("entities", {})
    env.setdefault("flags", {})
    env.setdefault("effects", [])
    return env


def load_characters(project_dir) -> Tuple[CharacterProfile, ...]:
    directory = Path(project_dir) / "characters"
    if not directory.is_dir():
        raise MissingFile(f"missing characters/ in {project_dir}")
    characters = tuple(_model(CharacterProfile, p, _read_json(p)) for p in sorted(directory.glob("*.json")))
    ids = [c.character_id for c in characters]
    if len(set(ids)) != len(ids):
        raise SchemaError("characters/", [f"duplicate character ids in {ids}"])
    return characters


def load_predicates(project_dir) -> List[PredicateSpec]:
    path = Path(project_dir) / "predicates.json"
    if not path.exists():
        return []
    data = _read_json(path)
    return [_model(PredicateSpec, path, item) for item in data]


def load_decision_model(project_dir, n_atoms: int) -> DnfModel:
    path = Path(project_dir) / "decision_model.json"
    if path.exists():
        model = DnfModel.load(path)
        if model.n_atoms != n_atoms:
            raise SchemaError(path.name, [f"model has {model.n_atoms} atoms, predicate manifest has {n_atoms}"])
        return model
    return default_decision_model(n_atoms)


def initialize(project_dir, store: VersionStore, memory: Optional[MemoryStore] = None) -> StoryState:
    """Load the project and commit world and every character at v0."""
    project_dir = Path(project_dir)
    outline = load_outline(project_dir)
    env = load_environment(project_dir)
    characters = load_characters(project_dir)

    store.env_init(WORLD, dump_body(env))
    for character in characters:
        store.env_init(character_key(character.character_id), dump_body(character.model_dump(mode="json")))

    archives = project_dir / "memories"
    if memory is not None and archives.is_dir():
        for character in characters:
            path = archives / f"{character.character_id}.json"
            if path.exists():
                for item in _read_json(path):
                    memory.memory_append(character.character_id,
                                         MemoryRecord(agent_id=character.character_id, kind=item.get("kind", "observation"),
                                                      body=item["body"], chapter_version="v0"))

    logger.info(f"📖 Initialized '{outline.title}': {len(outline.milestones)} milestone(s), {len(characters)} character(s)")
    return StoryState(outline=outline, characters=characters)
