"""A self-contained, seeded simulation of actor, critic and annotator.

Steps are drawn from three styles: careful (raises the chance of a correct
final answer), rough (neutral) and hasty (lowers it).  The chance that a
completed path ends in the ground truth is ``0.5 + 0.2 * (careful - hasty)``
clipped to ``[0.05, 0.95]``.  Every random draw is keyed on the question, the
conditioning text and the sample index, so replies are reproducible and
independent of call order or concurrency.
"""

from __future__ import annotations

import hashlib
import json
import random
from decimal import Decimal, InvalidOperation
from typing import Any

from ..types import NO_CORRECTIONS, DivergencePair, Question, ReasoningPath, Step
from .base import Completion, CriticVerdict, GenerationRequest, ModelGateway, is_no_corrections

STYLES = {
    "careful": ("Step {k}: read the relevant values carefully.",
                "Step {k}: check each quantity carefully against the figure."),
    "rough": ("Step {k}: estimate the quantities roughly.",),
    "hasty": ("Step {k}: assume the values hastily without checking.",),
}
STYLE_WEIGHTS = {"careful": 0.4, "rough": 0.3, "hasty": 0.3}
VAGUE_CRITIQUE = "Something may be off in the reasoning; look at it again."


def keyed_rng(*parts: Any) -> random.Random:
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _text_key(steps) -> str:
    return hashlib.sha256("\n".join(s.text for s in steps).encode()).hexdigest()[:16]


def wrong_answer(ground_truth: str, rng: random.Random) -> str:
    try:
        value = Decimal(ground_truth.strip())
        offset = rng.choice([1, 2, 3, -1, -2])
        return format((value + offset).normalize(), "f")
    except InvalidOperation:
        pass
    letters = ["A", "B", "C", "D"]
    if ground_truth.strip().upper() in letters:
        return rng.choice([c for c in letters if c != ground_truth.strip().upper()])
    return f"{ground_truth} (misread)"


def path_quality(texts) -> float:
    careful = sum("carefully" in t for t in texts)
    hasty = sum("hastily" in t for t in texts)
    return min(0.95, max(0.05, 0.5 + 0.2 * (careful - hasty)))


class SyntheticGateway(ModelGateway):
    """Seeded stand-in for a real actor/critic pair.

    The critic flags a wrong answer with probability ``critic_recall`` and a
    correct one with probability ``1 - critic_specificity``; flagged answers
    score in ``[0.05, 0.45]``, unflagged ones in ``[0.55, 0.95]``.  Refining a
    wrong answer under a specific critique succeeds with probability
    ``refine_success`` (``refine_success_vague`` for a vague critique); correct
    answers are never broken by refinement.
    """

    def __init__(self, *, seed: int = 0, depth: int = 3, actor_accuracy: float | None = None,
                 critic_recall: float = 0.9, critic_specificity: float = 0.95,
                 refine_success: float = 0.4, refine_success_vague: float = 0.05,
                 annotator_quality: float = 0.75, **kwargs: Any) -> None:
        super().__init__(**kwargs)
        self.seed = seed
        self.depth = depth
        self.actor_accuracy = actor_accuracy
        self.critic_recall = critic_recall
        self.critic_specificity = critic_specificity
        self.refine_success = refine_success
        self.refine_success_vague = refine_success_vague
        self.annotator_quality = annotator_quality

    def _style_step(self, k: int, rng: random.Random) -> str:
        style = rng.choices(list(STYLE_WEIGHTS), weights=list(STYLE_WEIGHTS.values()))[0]
        return rng.choice(STYLES[style]).format(k=k)

    def _final_step(self, k: int, question: Question, texts: list[str], rng: random.Random) -> str:
        correct = rng.random() < path_quality(texts)
        answer = question.ground_truth if correct else wrong_answer(question.ground_truth, rng)
        return f"Step {k}: combine the results. Final answer: {answer}."

    def _continue(self, question: Question, texts: list[str], rng: random.Random) -> list[str]:
        out = list(texts)
        while len(out) < self.depth - 1:
            out.append(self._style_step(len(out) + 1, rng))
        out.append(self._final_step(len(out) + 1, question, out, rng))
        return out[len(texts):]

    def _sample_steps(self, req: GenerationRequest) -> list[Completion]:
        texts = [s.text for s in req.prior_steps]
        prefix = _text_key(req.prior_steps)
        out = []
        for i in range(req.n_samples):
            rng = keyed_rng(self.seed, req.question.id, prefix, "steps", i, req.seed)
            k = len(texts) + 1
            if k >= self.depth:
                out.append(Completion(self._final_step(k, req.question, texts, rng), eos=True))
            else:
                out.append(Completion(self._style_step(k, rng)))
        return out

    def _complete(self, question: Question, prior_steps: tuple[Step, ...], budget: int, *,
                  temperature: float, seed: int, sample_index: int) -> Completion:
        rng = keyed_rng(self.seed, question.id, _text_key(prior_steps), "rollout", sample_index, seed)
        rest = self._continue(question, [s.text for s in prior_steps], rng)
        return Completion("\n".join(rest), eos=True)

    def _answer(self, question: Question, budget: int, *, temperature: float, seed: int) -> Completion:
        rng = keyed_rng(self.seed, question.id, "answer", seed)
        if self.actor_accuracy is None:
            return Completion("\n".join(self._continue(question, [], rng)), eos=True)
        correct = rng.random() < self.actor_accuracy
        answer = question.ground_truth if correct else wrong_answer(question.ground_truth, rng)
        first = STYLES["careful" if correct else "hasty"][0].format(k=1)
        return Completion(f"{first}\nStep 2: combine the results. Final answer: {answer}.", eos=True)

    def _is_correct(self, question: Question, answer: ReasoningPath) -> bool:
        return self.grade(answer.final_answer, question.ground_truth)

    def _critique(self, question: Question, answer: ReasoningPath, *, seed: int,
                  sample_index: int) -> CriticVerdict:
        rng = keyed_rng(self.seed, question.id, "critic", _text_key(answer.steps), sample_index, seed)
        correct = self._is_correct(question, answer)
        flagged = rng.random() < (1.0 - self.critic_specificity if correct else self.critic_recall)
        if not flagged:
            return CriticVerdict(NO_CORRECTIONS, round(rng.uniform(0.55, 0.95), 6))
        suspect = next((i for i, s in enumerate(answer.steps) if "hastily" in s.text),
                       len(answer.steps) - 1)
        critique = (f"Step {suspect + 1} looks unreliable: the values it uses are not checked "
                    "against the figure. Re-read them before combining the results.")
        return CriticVerdict(critique, round(rng.uniform(0.05, 0.45), 6))

    def _refine(self, question: Question, answer: ReasoningPath, critique: str, budget: int, *,
                temperature: float, seed: int, sample_index: int) -> Completion:
        if self._is_correct(question, answer) or is_no_corrections(critique):
            return Completion(answer.text, eos=True)
        rng = keyed_rng(self.seed, question.id, "refine", _text_key(answer.steps), critique,
                        sample_index, seed)
        p = self.refine_success_vague if critique == VAGUE_CRITIQUE else self.refine_success
        if rng.random() < p:
            final = question.ground_truth
            first = "Step 1: re-read the relevant values carefully."
        else:
            final = answer.final_answer or wrong_answer(question.ground_truth, rng)
            first = "Step 1: revisit the values, still hastily."
        return Completion(f"{first}\nStep 2: combine the results again. Final answer: {final}.", eos=True)

    def _annotate(self, question: Question, pair: DivergencePair) -> str:
        rng = keyed_rng(self.seed, question.id, "annotate", _text_key(pair.shared_prefix + pair.branch_b))
        if rng.random() >= self.annotator_quality:
            return VAGUE_CRITIQUE
        k = len(pair.shared_prefix) + 1
        return (f"Step {k} of the second path (\"{pair.branch_b[0].text}\") is where it goes wrong: "
                "it does not verify the quantities it relies on, unlike the first path. "
                "Re-check those values before combining them.")
