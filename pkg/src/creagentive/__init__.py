"""CreAgentive: multi-character story generation on top of HAWK."""
from src.creagentive.pipeline import RunConfig, StoryRunner, run

__all__ = ["RunConfig", "StoryRunner", "run"]
