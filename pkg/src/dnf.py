"""
Differentiable DNF decision layer.

Atoms arrive as truth values mu in [-1, 1] and are mapped to x = (mu + 1) / 2.
Every clause is a soft AND (product t-norm) over 2A gated literals (x and 1 - x),
every label a soft OR (probabilistic sum) over gated clauses, and the label
scores go through softmax(alpha * s). Gates are sigmoids of raw weights, so
saturating them recovers a classical DNF.
"""
import json
import math
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config.settings import settings
from src.errors import DimensionMismatch, EmptyDataset, NoCandidates, NoSamples, NonFiniteInput

SCHEMA_VERSION = 1
SATURATED_RAW = 40.0
ALPHA_FLOOR = 1e-3
ACCEPT, REJECT = 0, 1
DECISION_LABELS = ("accept", "reject")


# --- truth values ----------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def truth_from_logits(v_yes: float, v_no: float) -> float:
    """2 * sigmoid(v_yes - v_no) - 1, written as tanh of half the gap."""
    if not (math.isfinite(v_yes) and math.isfinite(v_no)):
        raise NonFiniteInput(f"logits must be finite, got ({v_yes}, {v_no})")
    return math.tanh((v_yes - v_no) / 2.0)


def truth_from_samples(m_yes: int, m_no: int) -> float:
    if m_yes < 0 or m_no < 0:
        raise ValueError("sample counts must be non-negative")
    if m_yes + m_no == 0:
        raise NoSamples("no parseable Yes/No samples")
    return 2.0 * m_yes / (m_yes + m_no) - 1.0


class AtomTruth(BaseModel):
    model_config = ConfigDict(frozen=True)

    predicate_index: int
    atom_index: int
    mu: float

    @field_validator("mu")
    @classmethod
    def _clamp(cls, v):
        return min(1.0, max(-1.0, float(v)))


# --- model -------------------------------------------------------------------------

class DnfModel:
    def __init__(self, conj_weights, disj_weights, alpha: float, seed: Optional[int] = None):
        self.conj_weights = np.array(conj_weights, dtype=np.float64)
        self.disj_weights = np.array(disj_weights, dtype=np.float64)
        self.alpha = float(alpha)
        self.seed = seed
        if self.conj_weights.ndim != 2 or self.conj_weights.shape[1] % 2:
            raise DimensionMismatch(f"conj_weights must be C x 2A, got {self.conj_weights.shape}")
        if self.disj_weights.ndim != 2 or self.disj_weights.shape[1] != self.conj_weights.shape[0]:
            raise DimensionMismatch(f"disj_weights must be Y x C, got {self.disj_weights.shape}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def n_atoms(self) -> int:
        return self.conj_weights.shape[1] // 2

    @property
    def n_clauses(self) -> int:
        return self.conj_weights.shape[0]

    @property
    def n_labels(self) -> int:
        return self.disj_weights.shape[0]

    @property
    def conj_gates(self) -> np.ndarray:
        return sigmoid(self.conj_weights)

    @property
    def disj_gates(self) -> np.ndarray:
        return sigmoid(self.disj_weights)

    @classmethod
    def initialize(cls, n_atoms: int, n_clauses: int, n_labels: int, seed: int = 0,
                   low: float = -2.2, high: float = -1.8, alpha: Optional[float] = None) -> "DnfModel":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(low, high, size=(n_clauses, 2 * n_atoms)),
                   rng.uniform(low, high, size=(n_labels, n_clauses)),
                   settings.dnf_alpha_init if alpha is None else alpha, seed=seed)

    @classmethod
    def from_gates(cls, conj_gates, disj_gates, alpha: float = 5.0) -> "DnfModel":
        """Hand-set model; gates of exactly 0 or 1 become saturated raw weights."""
        def raw(g):
            g = np.asarray(g, dtype=np.float64)
            inner = np.log(np.clip(g, 1e-300, None)) - np.log(np.clip(1 - g, 1e-300, None))
            return np.where(g <= 0, -SATURATED_RAW, np.where(g >= 1, SATURATED_RAW, inner))
        return cls(raw(conj_gates), raw(disj_gates), alpha)

    def copy(self) -> "DnfModel":
        return DnfModel(self.conj_weights.copy(), self.disj_weights.copy(), self.alpha, self.seed)

    def to_dict(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "n_clauses": self.n_clauses,
            "n_labels": self.n_labels,
            "alpha": self.alpha,
            "conj_weights": self.conj_weights.ravel().tolist(),
            "disj_weights": self.disj_weights.ravel().tolist(),
            "seed": self.seed,
            "schema_version": SCHEMA_VERSION,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DnfModel":
        a, c, y = data["n_atoms"], data["n_clauses"], data["n_labels"]
        conj = np.asarray(data["conj_weights"], dtype=np.float64)
        disj = np.asarray(data["disj_weights"], dtype=np.float64)
        if conj.size != c * 2 * a or disj.size != y * c:
            raise DimensionMismatch("stored weights do not match the declared dimensions")
        return cls(conj.reshape(c, 2 * a), disj.reshape(y, c), data["alpha"], data.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DnfModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_decision_model(n_atoms: int, alpha: Optional[float] = None) -> DnfModel:
    """accept = soft OR of every positive atom; reject has no clauses."""
    conj = np.zeros((n_atoms, 2 * n_atoms))
    conj[np.arange(n_atoms), np.arange(n_atoms)] = 1.0
    disj = np.zeros((2, n_atoms))
    disj[ACCEPT, :] = 1.0
    return DnfModel.from_gates(conj, disj, settings.dnf_alpha_init if alpha is None else alpha)


# --- forward / loss / backward ----------------------------------------------------

class LabelScores(NamedTuple):
    conj: np.ndarray
    s: np.ndarray
    z: np.ndarray


class Gradient(NamedTuple):
    conj_weights: np.ndarray
    disj_weights: np.ndarray
    alpha: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.conj_weights.ravel(), self.disj_weights.ravel(), [self.alpha]])


def _check_atoms(model: DnfModel, atoms) -> np.ndarray:
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.shape != (model.n_atoms,):
        raise DimensionMismatch(f"expected {model.n_atoms} atoms, got shape {atoms.shape}")
    if not np.all(np.isfinite(atoms)):
        raise NonFiniteInput("atom values must be finite")
    return np.clip(atoms, -1.0, 1.0)


def literals(atoms: np.ndarray) -> np.ndarray:
    x = (atoms + 1.0) / 2.0
    return np.concatenate([x, 1.0 - x])


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


def forward(model: DnfModel, atoms) -> LabelScores:
    lit = literals(_check_atoms(model, atoms))
    terms = 1.0 - model.conj_gates * (1.0 - lit)[None, :]
    conj = np.prod(terms, axis=1)
    s = 1.0 - np.prod(1.0 - model.disj_gates * conj[None, :], axis=1)
    return LabelScores(conj=conj, s=s, z=softmax(model.alpha * s))


def loss(scores: LabelScores, label: int) -> float:
    if not 0 <= label < len(scores.z):
        raise DimensionMismatch(f"label {label} out of range for {len(scores.z)} labels")
    return float(-np.log(scores.z[label]))


def prod_except(a: np.ndarray) -> np.ndarray:
    """Product of every entry but one along the last axis, from prefix and suffix products."""
    ones = np.ones(a.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, a[..., :-1]], axis=-1), axis=-1)
    suffix = np.flip(np.cumprod(np.concatenate([ones, np.flip(a, axis=-1)[..., :-1]], axis=-1), axis=-1), axis=-1)
    return prefix * suffix


def backward(model: DnfModel, atoms, label: int) -> Gradient:
    lit = literals(_check_atoms(model, atoms))
    if not 0 <= label < model.n_labels:
        raise DimensionMismatch(f"label {label} out of range for {model.n_labels} labels")
    g, h = model.conj_gates, model.disj_gates
    miss = 1.0 - lit                                   # (2A,)
    terms = 1.0 - g * miss[None, :]                    # (C, 2A)
    conj = np.prod(terms, axis=1)                      # (C,)
    q = 1.0 - h * conj[None, :]                        # (Y, C)
    s = 1.0 - np.prod(q, axis=1)                       # (Y,)
    z = softmax(model.alpha * s)

    err = z.copy()
    err[label] -= 1.0
    d_s = model.alpha * err                            # (Y,)
    d_alpha = float(np.dot(s, err))

    q_others = prod_except(q)                          # (Y, C)
    d_h = d_s[:, None] * conj[None, :] * q_others
    d_conj = np.sum(d_s[:, None] * h * q_others, axis=0)
    d_g = -d_conj[:, None] * miss[None, :] * prod_except(terms)

    return Gradient(conj_weights=d_g * g * (1.0 - g), disj_weights=d_h * h * (1.0 - h), alpha=d_alpha)


def numeric_gradient(model: DnfModel, atoms, label: int, step: float = 1e-5) -> Gradient:
    """Central finite differences over every raw parameter."""
    def at(m: DnfModel) -> float:
        return loss(forward(m, atoms), label)

    def diff(array_name: str) -> np.ndarray:
        base = getattr(model, array_name)
        out = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = model.copy(), model.copy()
            getattr(plus, array_name)[idx] += step
            getattr(minus, array_name)[idx] -= step
            out[idx] = (at(plus) - at(minus)) / (2 * step)
        return out

    plus, minus = model.copy(), model.copy()
    plus.alpha += step
    minus.alpha -= step
    return Gradient(conj_weights=diff("conj_weights"), disj_weights=diff("disj_weights"),
                    alpha=(at(plus) - at(minus)) / (2 * step))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


# --- training ------------------------------------------------------------------------

class TrainingExample(BaseModel):
    model_config = ConfigDict(frozen=True)

    atoms: Tuple[float, ...]
    label: int = Field(ge=0)


class TrainingHyper(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=0.05, gt=0)
    epochs: int = Field(default=2000, ge=1)
    seed: int = 0
    l1_gate_penalty: float = Field(default=0.0, ge=0)


class TrainResult(NamedTuple):
    model: DnfModel
    loss_curve: List[float]


def dataset_loss(model: DnfModel, dataset: Sequence[TrainingExample]) -> float:
    return float(np.mean([loss(forward(model, ex.atoms), ex.label) for ex in dataset]))


def accuracy(model: DnfModel, dataset: Sequence[TrainingExample]) -> float:
    hits = sum(int(np.argmax(forward(model, ex.atoms).z) == ex.label) for ex in dataset)
    return hits / len(dataset)


def train(dataset: Sequence[TrainingExample], n_clauses: int, n_labels: int,
          hyper: Optional[TrainingHyper] = None) -> TrainResult:
    """Full-batch gradient descent on the summed loss; the curve records the mean loss per epoch."""
    hyper = hyper or TrainingHyper()
    if not dataset:
        raise EmptyDataset("training needs at least one example")
    n_atoms = len(dataset[0].atoms)
    for ex in dataset:
        if len(ex.atoms) != n_atoms:
            raise DimensionMismatch("examples have different atom counts")
        if ex.label >= n_labels:
            raise DimensionMismatch(f"label {ex.label} out of range for {n_labels} labels")

    model = DnfModel.initialize(n_atoms, n_clauses, n_labels, seed=hyper.seed)
    curve: List[float] = []
    logger.info(f"🚀 Training DNF model: A={n_atoms}, C={n_clauses}, Y={n_labels}, {len(dataset)} example(s)")

    for epoch in range(hyper.epochs):
        d_conj = np.zeros_like(model.conj_weights)
        d_disj = np.zeros_like(model.disj_weights)
        d_alpha = 0.0
        total = 0.0
        for ex in dataset:
            total += loss(forward(model, ex.atoms), ex.label)
            grad = backward(model, ex.atoms, ex.label)
            d_conj += grad.conj_weights
            d_disj += grad.disj_weights
            d_alpha += grad.alpha
        curve.append(total / len(dataset))

        if hyper.l1_gate_penalty:
            g, h = model.conj_gates, model.disj_gates
            d_conj += hyper.l1_gate_penalty * g * (1.0 - g)
            d_disj += hyper.l1_gate_penalty * h * (1.0 - h)

        model.conj_weights -= hyper.lr * d_conj
        model.disj_weights -= hyper.lr * d_disj
        model.alpha = max(ALPHA_FLOOR, model.alpha - hyper.lr * d_alpha)

        if (epoch + 1) % 500 == 0:
            logger.debug(f"epoch {epoch + 1}: loss={curve[-1]:.5f}")

    model.seed = hyper.seed
    logger.success(f"✅ Training done: final loss {curve[-1]:.5f}")
    return TrainResult(model=model, loss_curve=curve)


# --- readout & selection ----------------------------------------------------------

Rule = Tuple[int, FrozenSet[str]]


def literal_names(atom_names: Optional[Sequence[str]], n_atoms: int) -> List[str]:
    names = list(atom_names) if atom_names else [f"x{k}" for k in range(n_atoms)]
    return names + [f"~{n}" for n in names]


def extract_rules(model: DnfModel, gate_threshold: float = 0.5,
                  atom_names: Optional[Sequence[str]] = None) -> List[Rule]:
    """(label, literal set) for every clause whose disjunction gate passes the threshold."""
    names = literal_names(atom_names, model.n_atoms)
    g, h = model.conj_gates, model.disj_gates
    rules: List[Rule] = []
    for y in range(model.n_labels):
        for c in range(model.n_clauses):
            if h[y, c] > gate_threshold:
                rules.append((y, frozenset(names[l] for l in range(2 * model.n_atoms) if g[c, l] > gate_threshold)))
    return rules


def evaluate_rules(rules: Sequence[Rule], label: int, assignment: Dict[str, bool]) -> bool:
    """Classical evaluation of the extracted DNF for one label."""
    def holds(lit: str) -> bool:
        return not assignment[lit[1:]] if lit.startswith("~") else assignment[lit]
    return any(all(holds(lit) for lit in clause) for y, clause in rules if y == label)


def select_trajectory(model: DnfModel, candidates: Sequence[Sequence[float]],
                      accept_label: int = ACCEPT) -> Tuple[int, List[np.ndarray]]:
    """Argmax of z[accept] over candidates; ties go to the lowest index."""
    if not candidates:
        raise NoCandidates("no candidates to select from")
    zs = [forward(model, atoms).z for atoms in candidates]
    best = 0
    for i, z in enumerate(zs):
        if z[accept_label] > zs[best][accept_label]:
            best = i
    return best, zs


# --- datasets -------------------------------------------------------------------------

def truth_table(n_atoms: int, formula: Callable[..., bool]) -> List[TrainingExample]:
    """Every Boolean assignment; label 1 when the formula holds."""
    rows = []
    for bits in range(2 ** n_atoms):
        values = [bool((bits >> (n_atoms - 1 - k)) & 1) for k in range(n_atoms)]
        rows.append(TrainingExample(atoms=tuple(1.0 if v else -1.0 for v in values), label=int(formula(*values))))
    return rows


def load_dataset(path) -> Tuple[List[str], List[TrainingExample]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    examples = [TrainingExample.model_validate(r) for r in data["rows"]]
    if not examples:
        raise EmptyDataset(f"{path} has no rows")
    names = data.get("atoms") or [f"x{k}" for k in range(len(examples[0].atoms))]
    return names, examples
