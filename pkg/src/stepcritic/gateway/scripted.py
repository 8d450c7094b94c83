"""Deterministic scripted backend.

A script is a set of records, one JSON object per line::

    {"question_id": "q1", "kind": "steps", "prefix_hash": "<hash>", "outputs": ["...", "..."]}

``kind`` is one of ``steps``, ``rollout``, ``answer``, ``critique``,
``refine``, ``annotate``.  ``prefix_hash`` is :func:`prefix_hash` of the step
texts the call is conditioned on (the partial path for ``steps``/``rollout``,
the answer being judged for ``critique``/``refine``, the incorrect path for
``annotate``).  Either field may be ``"*"`` to match anything.  Records may
give ``"prefix": [...]`` instead of a hash.

Output *i* is used for sample index *i* (wrapping around), so lookups depend
only on the key and the sample index.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Literal

from ..types import NO_CORRECTIONS, DivergencePair, Question, ReasoningPath, Step, stable_hash
from .base import Completion, CriticVerdict, GenerationRequest, ModelGateway, ScriptMissError

KINDS = ("steps", "rollout", "answer", "critique", "refine", "annotate")
WILDCARD = "*"


def prefix_hash(texts: Iterable[str]) -> str:
    return stable_hash(list(texts))


def _texts(steps) -> list[str]:
    return [s.text for s in steps]


class ScriptedPolicy:
    """Lookup table behind :class:`ScriptedGateway`."""

    def __init__(self, default_behavior: Literal["echo", "fail"] = "echo") -> None:
        if default_behavior not in ("echo", "fail"):
            raise ValueError("default_behavior must be 'echo' or 'fail'")
        self.default_behavior = default_behavior
        self._table: dict[tuple[str, str, str], list[Any]] = defaultdict(list)

    def add(self, question_id: str, kind: str, prefix: Iterable[str] | str, outputs: list[Any]) -> ScriptedPolicy:
        if kind not in KINDS:
            raise ValueError(f"unknown script kind {kind!r}")
        key_hash = prefix if isinstance(prefix, str) else prefix_hash(prefix)
        self._table[(question_id, kind, key_hash)].extend(outputs)
        return self

    def lookup(self, question_id: str, kind: str, prefix: Iterable[str]) -> list[Any] | None:
        h = prefix_hash(prefix)
        for key in ((question_id, kind, h), (question_id, kind, WILDCARD),
                    (WILDCARD, kind, h), (WILDCARD, kind, WILDCARD)):
            outputs = self._table.get(key)
            if outputs:
                return outputs
        return None

    def records(self) -> list[dict[str, Any]]:
        return [{"question_id": q, "kind": k, "prefix_hash": h, "outputs": list(v)}
                for (q, k, h), v in sorted(self._table.items())]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]], default_behavior: str = "echo") -> ScriptedPolicy:
        policy = cls(default_behavior)  # type: ignore[arg-type]
        for rec in records:
            prefix = rec.get("prefix_hash")
            if prefix is None:
                prefix = prefix_hash(rec.get("prefix", []))
            policy.add(str(rec["question_id"]), rec["kind"], prefix, list(rec["outputs"]))
        return policy

    @classmethod
    def load(cls, path: str | Path, default_behavior: str = "echo") -> ScriptedPolicy:
        with open(path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls.from_records(records, default_behavior)


def _completion(item: Any) -> Completion:
    if isinstance(item, Completion):
        return item
    if isinstance(item, dict):
        return Completion(item["text"], item.get("token_count"), bool(item.get("eos", False)))
    return Completion(str(item))


class ScriptedGateway(ModelGateway):
    """Gateway whose every reply comes from a :class:`ScriptedPolicy`.

    With ``default_behavior="echo"`` unscripted calls get a harmless
    placeholder: numbered steps, empty rollouts, an approving critique,
    the unchanged answer on refine.  With ``"fail"`` they raise
    :class:`ScriptMissError`.
    """

    def __init__(self, policy: ScriptedPolicy | None = None, **kwargs: Any) -> None:
        super().__init__(**kwargs)
        self.policy = policy or ScriptedPolicy()

    def _lookup(self, question_id: str, kind: str, prefix: Iterable[str]) -> list[Any] | None:
        outputs = self.policy.lookup(question_id, kind, list(prefix))
        if outputs is None and self.policy.default_behavior == "fail":
            raise ScriptMissError(f"no script entry for {kind} on {question_id}")
        return outputs

    def _sample_steps(self, req: GenerationRequest) -> list[Completion]:
        outputs = self._lookup(req.question.id, "steps", _texts(req.prior_steps))
        if outputs is None:
            depth = len(req.prior_steps) + 1
            return [Completion(f"Step {depth}, option {i + 1}.") for i in range(req.n_samples)]
        return [_completion(outputs[i % len(outputs)]) for i in range(req.n_samples)]

    def _complete(self, question: Question, prior_steps: tuple[Step, ...], budget: int, *,
                  temperature: float, seed: int, sample_index: int) -> Completion:
        outputs = self._lookup(question.id, "rollout", _texts(prior_steps))
        if outputs is None:
            return Completion("", eos=True)
        return _completion(outputs[sample_index % len(outputs)])

    def _answer(self, question: Question, budget: int, *, temperature: float, seed: int) -> Completion:
        outputs = self._lookup(question.id, "answer", [])
        if outputs is None:
            return Completion("", eos=True)
        return _completion(outputs[0])

    def _critique(self, question: Question, answer: ReasoningPath, *, seed: int,
                  sample_index: int) -> CriticVerdict | str:
        outputs = self._lookup(question.id, "critique", _texts(answer.steps))
        if outputs is None:
            return CriticVerdict(NO_CORRECTIONS, 1.0)
        item = outputs[sample_index % len(outputs)]
        if isinstance(item, CriticVerdict):
            return item
        if isinstance(item, dict):
            return CriticVerdict(item["critique"], float(item["score"]))
        if isinstance(item, (list, tuple)):
            return CriticVerdict(item[0], float(item[1]))
        return str(item)

    def _refine(self, question: Question, answer: ReasoningPath, critique: str, budget: int, *,
                temperature: float, seed: int, sample_index: int) -> Completion:
        outputs = self._lookup(question.id, "refine", _texts(answer.steps))
        if outputs is None:
            return Completion(answer.text)
        return _completion(outputs[sample_index % len(outputs)])

    def _annotate(self, question: Question, pair: DivergencePair) -> str:
        outputs = self._lookup(question.id, "annotate", _texts(pair.shared_prefix + pair.branch_b))
        if outputs is None:
            return f"Step {len(pair.shared_prefix) + 1} of the second path goes wrong; re-examine it."
        return str(outputs[0])
