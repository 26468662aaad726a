from typing import List, NamedTuple, Sequence

from loguru import logger

from src.dnf import ACCEPT, DnfModel, select_trajectory
from src.errors import NoCandidates
from src.creagentive.models import Trajectory


class Decision(NamedTuple):
    index: int
    trajectory: Trajectory
    accept_scores: List[float]


def decide(model: DnfModel, trajectories: Sequence[Trajectory]) -> Decision:
    """Winner = argmax of the accept score over candidates' atom vectors (lowest index on ties)."""
    if not trajectories:
        raise NoCandidates("no trajectories to decide between")
    index, zs = select_trajectory(model, [t.atom_values for t in trajectories])
    scores = [float(z[ACCEPT]) for z in zs]
    winner = trajectories[index]
    logger.info(f"⚖️ Selected {winner.trajectory_id} (accept={scores[index]:.3f} of {[round(s, 3) for s in scores]})")
    return Decision(index=index, trajectory=winner, accept_scores=scores)
