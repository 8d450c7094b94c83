"""Domain types shared by the search, mining, filtering and refinement stages.

Everything here is a plain dataclass with ``to_dict``/``from_dict`` so records
can be written one JSON object per line.  Value types are frozen; ``Node`` is
the one mutable type and is only written by the search engine.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Literal

NO_CORRECTIONS = "No corrections needed."

PathSource = Literal["search_tree", "rollout", "actor_direct", "refined"]
Provenance = Literal["positive", "negative_mined"]

PATH_SOURCES = ("search_tree", "rollout", "actor_direct", "refined")
PROVENANCES = ("positive", "negative_mined")


def count_tokens(text: str) -> int:
    """Whitespace word count, used when a backend reports no token count."""
    return len(text.split())


def stable_hash(obj: Any, length: int = 16) -> str:
    payload = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:length]


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    ground_truth: str
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("question id must be non-empty")
        if not self.text:
            raise ValueError(f"question {self.id!r} has empty text")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "image_ref": self.image_ref,
            "ground_truth": self.ground_truth,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Question:
        return cls(
            id=str(data["id"]),
            text=data["text"],
            ground_truth=str(data["ground_truth"]),
            image_ref=data.get("image_ref"),
        )


@dataclass(frozen=True)
class Step:
    text: str
    token_count: int
    is_terminal: bool = False

    def __post_init__(self) -> None:
        if self.token_count < 0:
            raise ValueError("token_count must be nonnegative")
        if not self.text and not self.is_terminal:
            raise ValueError("non-terminal step must have text")

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "token_count": self.token_count, "is_terminal": self.is_terminal}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Step:
        return cls(
            text=data["text"],
            token_count=int(data["token_count"]),
            is_terminal=bool(data.get("is_terminal", False)),
        )


def step_texts(steps) -> list[str]:
    return [s.text for s in steps]


@dataclass(frozen=True)
class ReasoningPath:
    question_id: str
    steps: tuple[Step, ...]
    final_answer: str | None = None
    source: PathSource = "search_tree"

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.source not in PATH_SOURCES:
            raise ValueError(f"unknown path source {self.source!r}")
        if self.final_answer is not None and (not self.steps or not self.steps[-1].is_terminal):
            raise ValueError("a path with a final answer must end in a terminal step")

    @property
    def token_count(self) -> int:
        return sum(s.token_count for s in self.steps)

    @property
    def text(self) -> str:
        return "\n".join(s.text for s in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ReasoningPath:
        return cls(
            question_id=str(data["question_id"]),
            steps=tuple(Step.from_dict(s) for s in data["steps"]),
            final_answer=data.get("final_answer"),
            source=data.get("source", "search_tree"),
        )


@dataclass
class Node:
    """One search-tree node.

    The root carries no step and stands for the question itself.  ``value``
    is kept as an incremental mean of ``propagation_log``.
    """

    node_id: int
    parent_id: int | None = None
    step: Step | None = None
    children: list[int] = field(default_factory=list)
    visit_count: int = 0
    value: float = 0.0
    propagation_log: list[float] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent_id is None

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "parent_id": self.parent_id,
            "step": None if self.step is None else self.step.to_dict(),
            "children": list(self.children),
            "visit_count": self.visit_count,
            "value": self.value,
            "propagation_log": list(self.propagation_log),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Node:
        step = data.get("step")
        return cls(
            node_id=int(data["node_id"]),
            parent_id=data.get("parent_id"),
            step=None if step is None else Step.from_dict(step),
            children=[int(c) for c in data.get("children", [])],
            visit_count=int(data.get("visit_count", 0)),
            value=float(data.get("value", 0.0)),
            propagation_log=[float(v) for v in data.get("propagation_log", [])],
        )


@dataclass(frozen=True)
class DivergencePair:
    question_id: str
    shared_prefix: tuple[Step, ...]
    branch_a: tuple[Step, ...]
    branch_b: tuple[Step, ...]
    lca_node_id: int | None = None

    def __post_init__(self) -> None:
        for name in ("shared_prefix", "branch_a", "branch_b"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.branch_a or not self.branch_b:
            raise ValueError("both branches of a divergence pair must be non-empty")
        if self.branch_a[0].text == self.branch_b[0].text:
            raise ValueError("branches share their first step; prefix is not maximal")

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "shared_prefix": [s.to_dict() for s in self.shared_prefix],
            "branch_a": [s.to_dict() for s in self.branch_a],
            "branch_b": [s.to_dict() for s in self.branch_b],
            "lca_node_id": self.lca_node_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DivergencePair:
        return cls(
            question_id=str(data["question_id"]),
            shared_prefix=tuple(Step.from_dict(s) for s in data["shared_prefix"]),
            branch_a=tuple(Step.from_dict(s) for s in data["branch_a"]),
            branch_b=tuple(Step.from_dict(s) for s in data["branch_b"]),
            lca_node_id=data.get("lca_node_id"),
        )


@dataclass(frozen=True)
class FilterStats:
    successes: int
    attempts: int

    def to_dict(self) -> dict[str, int]:
        return {"successes": self.successes, "attempts": self.attempts}


@dataclass(frozen=True)
class CritiqueSample:
    """A mined training record: question, reasoning path, 0/1 label, critique."""

    question: Question
    answer_path: ReasoningPath
    correctness: int
    critique: str
    provenance: Provenance
    filter_stats: FilterStats | None = None

    def __post_init__(self) -> None:
        if self.correctness not in (0, 1):
            raise ValueError("correctness must be 0 or 1")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.correctness == 1 and self.critique != NO_CORRECTIONS:
            raise ValueError(f"correct samples must carry the critique {NO_CORRECTIONS!r}")
        if self.provenance == "negative_mined" and self.correctness != 0:
            raise ValueError("mined negatives must have correctness 0")

    @property
    def sample_id(self) -> str:
        return stable_hash([self.question.id, step_texts(self.answer_path.steps), self.provenance])

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question.to_dict(),
            "answer_path": self.answer_path.to_dict(),
            "correctness": self.correctness,
            "critique": self.critique,
            "provenance": self.provenance,
            "filter_stats": None if self.filter_stats is None else self.filter_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CritiqueSample:
        stats = data.get("filter_stats")
        return cls(
            question=Question.from_dict(data["question"]),
            answer_path=ReasoningPath.from_dict(data["answer_path"]),
            correctness=int(data["correctness"]),
            critique=data["critique"],
            provenance=data["provenance"],
            filter_stats=None if stats is None else FilterStats(**stats),
        )


@dataclass(frozen=True)
class SearchConfig:
    """Every tunable of a run.  ``n_expand``, ``m_rollouts`` and
    ``search_iterations`` have no published values; the defaults here are
    sized for desk-scale runs."""

    n_expand: int = 3
    m_rollouts: int = 4
    step_token_cap: int = 30
    max_path_tokens: int = 1024
    search_iterations: int = 16
    temperature: float = 0.7
    seed: int = 0
    refine_attempts: int = 10
    keep_threshold: int = 3
    score_threshold: float = 0.5
    max_refine_iters: int = 5
    loss_weight: float = 1.0
    # engine switches
    use_ucb: bool = False
    ucb_c: float = 1.0
    mine_rollouts: bool = True
    all_positives: bool = False

    def validate(self) -> list[str]:
        return validate(self)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SearchConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        return stable_hash(self.to_dict())

    def with_overrides(self, **kwargs: Any) -> SearchConfig:
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def validate(config: SearchConfig) -> list[str]:
    """Return every violated constraint; an empty list means the config is usable."""
    errors = []
    if config.n_expand < 1:
        errors.append("n_expand must be ≥ 1")
    if config.m_rollouts < 1:
        errors.append("m_rollouts must be ≥ 1")
    if config.step_token_cap < 1:
        errors.append("step_token_cap must be ≥ 1")
    if config.max_path_tokens < 1:
        errors.append("max_path_tokens must be ≥ 1")
    if config.search_iterations < 0:
        errors.append("search_iterations must be ≥ 0")
    if config.temperature < 0:
        errors.append("temperature must be ≥ 0")
    if config.refine_attempts < 1:
        errors.append("refine_attempts must be ≥ 1")
    if config.keep_threshold < 1:
        errors.append("keep_threshold must be ≥ 1")
    if config.keep_threshold > config.refine_attempts:
        errors.append("keep_threshold exceeds refine_attempts")
    if not 0.0 <= config.score_threshold <= 1.0:
        errors.append("score_threshold must lie in [0, 1]")
    if config.max_refine_iters < 1:
        errors.append("max_refine_iters must be ≥ 1")
    if config.loss_weight < 0:
        errors.append("loss_weight must be ≥ 0")
    return errors
