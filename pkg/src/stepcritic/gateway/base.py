"""Backend-independent half of the model gateway.

Concrete backends implement the ``_sample_steps``/``_complete``/... hooks and
return raw text.  Everything that must hold for *any* backend (step
truncation, answer extraction, critique parsing, answer redaction, retries)
lives here so a misbehaving backend cannot bypass it.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, TypeVar

from ..types import NO_CORRECTIONS, DivergencePair, Question, ReasoningPath, Step, count_tokens
from .grading import FINAL_ANSWER_PATTERN, extract_answer, extract_from_text, grade
from .prompts import PromptTemplates, load_templates

logger = logging.getLogger(__name__)

T = TypeVar("T")

REDACTION_TOKEN = "[REDACTED]"

# a step ends at a sentence terminator followed by a line break
_BOUNDARY_RE = re.compile(r"(?<=[.!?])[ \t]*\n\s*")
_WORD_RE = re.compile(r"\S+")
_SCORE_RE = re.compile(r"^[ \t]*\**score\**[ \t]*[:=][ \t]*([-+]?\d*\.?\d+(?:e[-+]?\d+)?)[ \t]*$",
                       re.IGNORECASE | re.MULTILINE)
_CRITIQUE_HEADER_RE = re.compile(r"^\s*\**critique\**\s*[:：]\s*", re.IGNORECASE)


class GatewayError(Exception):
    """Base class for model-gateway failures."""


class TransportError(GatewayError):
    """Backend unreachable, timed out or returned a server error.  Retryable."""


class ScriptMissError(GatewayError):
    """A scripted backend has no entry for the requested key."""


class CritiqueParseError(GatewayError):
    """A critic reply carried no critique text."""


class EmptyResponseError(GatewayError):
    """A backend returned nothing usable."""


@dataclass(frozen=True)
class Completion:
    """Raw backend output.  ``token_count`` is the backend's own count when it
    reports one; ``eos`` is true when generation ended on end-of-sequence."""

    text: str
    token_count: int | None = None
    eos: bool = False


@dataclass(frozen=True)
class GenerationRequest:
    question: Question
    prior_steps: tuple[Step, ...]
    max_new_tokens: int
    temperature: float = 0.7
    n_samples: int = 1
    stop_at_step_boundary: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "prior_steps", tuple(self.prior_steps))
        if self.n_samples < 1:
            raise ValueError("n_samples must be ≥ 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be ≥ 1")


@dataclass(frozen=True)
class CriticVerdict:
    critique: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"critic score {self.score} outside [0, 1]")

    @property
    def approves(self) -> bool:
        return is_no_corrections(self.critique)

    def to_dict(self) -> dict[str, Any]:
        return {"critique": self.critique, "score": self.score}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CriticVerdict:
        return cls(critique=data["critique"], score=float(data["score"]))


def is_no_corrections(critique: str) -> bool:
    return critique.strip().rstrip(".").casefold() == NO_CORRECTIONS.rstrip(".").casefold()


def truncate_tokens(text: str, cap: int) -> tuple[str, bool]:
    """Keep the first ``cap`` whitespace tokens.  Returns ``(prefix, was_cut)``;
    the prefix is a literal prefix of ``text`` minus trailing whitespace."""
    words = list(_WORD_RE.finditer(text))
    if len(words) <= cap:
        return text.rstrip(), False
    if cap <= 0:
        return "", True
    return text[: words[cap - 1].end()], True


def cut_step(text: str, cap: int, stop_at_boundary: bool = True) -> tuple[str, bool]:
    cut = False
    if stop_at_boundary:
        m = _BOUNDARY_RE.search(text)
        if m is not None:
            text, cut = text[: m.start()], True
    text, capped = truncate_tokens(text.lstrip(), cap)
    return text, cut or capped


def make_step(completion: Completion, cap: int, *, stop_at_boundary: bool = True,
              marker: re.Pattern[str] | None = None) -> Step | None:
    """One step from a raw continuation, or None if nothing usable remains."""
    marker = marker or re.compile(FINAL_ANSWER_PATTERN, re.IGNORECASE)
    text, cut = cut_step(completion.text, cap, stop_at_boundary)
    terminal = marker.search(text) is not None or (completion.eos and not cut)
    if not text and not terminal:
        return None
    n = count_tokens(text)
    if completion.token_count is not None and not cut and completion.token_count <= cap:
        n = completion.token_count
    return Step(text=text, token_count=min(n, cap), is_terminal=terminal)


def _chunks(piece: str, cap: int, marker: re.Pattern[str]) -> list[str]:
    if count_tokens(piece) <= cap:
        return [piece]
    parts = [piece]
    m = marker.search(piece)
    if m is not None and m.start() > 0:
        parts = [piece[: m.start()], piece[m.start():]]
    out = []
    for part in parts:
        words = list(_WORD_RE.finditer(part))
        for i in range(0, len(words), cap):
            window = words[i: i + cap]
            out.append(part[window[0].start(): window[-1].end()])
    return out


def segment(text: str, cap: int, budget: int | None = None, *,
            marker: re.Pattern[str] | None = None, eos: bool = False) -> tuple[list[Step], bool]:
    """Split a free-running completion into steps of at most ``cap`` tokens.

    Stops after the first step carrying the final-answer marker, or when the
    token budget is spent.  Returns ``(steps, terminated)``.
    """
    marker = marker or re.compile(FINAL_ANSWER_PATTERN, re.IGNORECASE)
    steps: list[Step] = []
    used = 0
    pieces = [p.strip() for p in _BOUNDARY_RE.split(text)]
    pieces = [p for p in pieces if p]
    for pi, piece in enumerate(pieces):
        chunks = _chunks(piece, cap, marker)
        for ci, chunk in enumerate(chunks):
            n = count_tokens(chunk)
            if budget is not None and used + n > budget:
                chunk, _ = truncate_tokens(chunk, budget - used)
                if chunk:
                    steps.append(Step(chunk, count_tokens(chunk), marker.search(chunk) is not None))
                return steps, bool(steps) and steps[-1].is_terminal
            last = pi == len(pieces) - 1 and ci == len(chunks) - 1
            terminal = marker.search(chunk) is not None or (eos and last)
            steps.append(Step(chunk, n, terminal))
            used += n
            if terminal:
                return steps, True
    return steps, False


def redact(text: str, answer: str | None) -> str:
    """Mask verbatim, standalone occurrences of ``answer``."""
    if not answer:
        return text
    pattern = r"(?<!\w)(?<!\d\.)" + re.escape(answer) + r"(?!\w)(?!\.\d)"
    return re.sub(pattern, REDACTION_TOKEN, text)


def parse_critique(reply: str, fallback: float | None = None) -> CriticVerdict:
    """Split a critic reply into critique text and score.

    The score comes from a ``SCORE: x`` line.  Without one, ``fallback`` is
    used if set, otherwise 1.0 for an approving critique and 0.0 for any other.
    """
    matches = list(_SCORE_RE.finditer(reply))
    score: float | None = None
    if matches:
        score = min(1.0, max(0.0, float(matches[-1].group(1))))
        reply = _SCORE_RE.sub("", reply)
    critique = _CRITIQUE_HEADER_RE.sub("", reply.strip()).strip()
    if not critique:
        raise CritiqueParseError("critic reply has no critique section")
    if is_no_corrections(critique):
        critique = NO_CORRECTIONS
    if score is None:
        if fallback is not None:
            score = fallback
        else:
            score = 1.0 if critique == NO_CORRECTIONS else 0.0
    return CriticVerdict(critique=critique, score=score)


def render_reasoning(steps) -> str:
    return "\n".join(s.text for s in steps)


@dataclass
class CallLog:
    counts: Counter = field(default_factory=Counter)
    entries: list[tuple[str, str]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, kind: str, question_id: str) -> None:
        with self._lock:
            self.counts[kind] += 1
            self.entries.append((kind, question_id))

    def reset(self) -> None:
        with self._lock:
            self.counts.clear()
            self.entries.clear()


class ModelGateway:
    """Uniform interface for the actor, critic and annotator roles."""

    def __init__(self, *, step_token_cap: int = 30, max_path_tokens: int = 1024,
                 retries: int = 3, backoff: float = 0.5, score_fallback: float | None = None,
                 answer_pattern: str = FINAL_ANSWER_PATTERN, templates: PromptTemplates | None = None,
                 grader: Callable[[str | None, str], bool] = grade) -> None:
        self.step_token_cap = step_token_cap
        self.max_path_tokens = max_path_tokens
        self.retries = retries
        self.backoff = backoff
        self.score_fallback = score_fallback
        self.marker = re.compile(answer_pattern, re.IGNORECASE)
        self.templates = templates or load_templates()
        self.grader = grader
        self.calls = CallLog()

    # -- backend hooks -------------------------------------------------
    def _sample_steps(self, req: GenerationRequest) -> list[Completion]:
        raise NotImplementedError

    def _complete(self, question: Question, prior_steps: tuple[Step, ...], budget: int, *,
                  temperature: float, seed: int, sample_index: int) -> Completion:
        raise NotImplementedError

    def _answer(self, question: Question, budget: int, *, temperature: float, seed: int) -> Completion:
        return self._complete(question, (), budget, temperature=temperature, seed=seed, sample_index=0)

    def _critique(self, question: Question, answer: ReasoningPath, *, seed: int,
                  sample_index: int) -> CriticVerdict | str:
        raise NotImplementedError

    def _refine(self, question: Question, answer: ReasoningPath, critique: str, budget: int, *,
                temperature: float, seed: int, sample_index: int) -> Completion:
        raise NotImplementedError

    def _annotate(self, question: Question, pair: DivergencePair) -> str:
        raise NotImplementedError

    # -- plumbing ------------------------------------------------------
    def _retry(self, fn: Callable[[], T]) -> T:
        for attempt in range(self.retries + 1):
            try:
                return fn()
            except TransportError as exc:
                if attempt == self.retries:
                    raise
                delay = self.backoff * (2 ** attempt)
                logger.warning("transport error (%s); retry %d/%d in %.2fs",
                               exc, attempt + 1, self.retries, delay)
                if delay > 0:
                    time.sleep(delay)
        raise AssertionError("unreachable")

    def _path(self, question: Question, prior: tuple[Step, ...], completion: Completion,
              budget: int, source: str) -> ReasoningPath:
        new_steps, _ = segment(completion.text, self.step_token_cap, budget,
                               marker=self.marker, eos=completion.eos)
        path = ReasoningPath(question.id, tuple(prior) + tuple(new_steps), None, source)
        answer = extract_answer(path, self.marker)
        return ReasoningPath(question.id, path.steps, answer, source)

    # -- operations ----------------------------------------------------
    def generate_steps(self, req: GenerationRequest) -> list[Step]:
        """Sample ``req.n_samples`` candidate next steps, each capped at
        ``req.max_new_tokens`` tokens.  Empty continuations are dropped."""
        self.calls.record("generate_steps", req.question.id)
        raw = self._retry(lambda: self._sample_steps(req))
        steps = []
        for completion in raw[: req.n_samples]:
            step = make_step(completion, req.max_new_tokens,
                             stop_at_boundary=req.stop_at_step_boundary, marker=self.marker)
            if step is None:
                logger.info("dropping empty continuation for %s", req.question.id)
                continue
            steps.append(step)
        return steps

    def rollout(self, question: Question, prior_steps, budget: int, *, temperature: float = 0.7,
                seed: int = 0, sample_index: int = 0) -> ReasoningPath:
        """Complete a partial path until a final answer or ``budget`` new tokens."""
        if budget < 1:
            raise ValueError("rollout budget must be ≥ 1")
        prior = tuple(prior_steps)
        self.calls.record("rollout", question.id)
        if prior and prior[-1].is_terminal:
            path = ReasoningPath(question.id, prior, None, "rollout")
            return ReasoningPath(question.id, prior, extract_answer(path, self.marker), "rollout")
        completion = self._retry(lambda: self._complete(
            question, prior, budget, temperature=temperature, seed=seed, sample_index=sample_index))
        return self._path(question, prior, completion, budget, "rollout")

    def answer(self, question: Question, *, temperature: float = 0.7, seed: int = 0,
               budget: int | None = None) -> ReasoningPath:
        """The actor's unaided step-by-step answer."""
        budget = budget or self.max_path_tokens
        self.calls.record("answer", question.id)
        completion = self._retry(lambda: self._answer(question, budget, temperature=temperature, seed=seed))
        return self._path(question, (), completion, budget, "actor_direct")

    def critique(self, question: Question, answer: ReasoningPath, *, seed: int = 0,
                 sample_index: int = 0) -> CriticVerdict:
        if not answer.steps:
            raise ValueError("cannot critique an empty answer")
        self.calls.record("critique", question.id)
        raw = self._retry(lambda: self._critique(question, answer, seed=seed, sample_index=sample_index))
        if isinstance(raw, CriticVerdict):
            return raw
        return parse_critique(raw, self.score_fallback)

    def refine(self, question: Question, answer: ReasoningPath, critique: str, *,
               temperature: float = 0.7, seed: int = 0, sample_index: int = 0,
               budget: int | None = None) -> ReasoningPath:
        if not critique:
            raise ValueError("refine needs a non-empty critique")
        budget = budget or self.max_path_tokens
        self.calls.record("refine", question.id)
        completion = self._retry(lambda: self._refine(
            question, answer, critique, budget, temperature=temperature, seed=seed,
            sample_index=sample_index))
        return self._path(question, (), completion, budget, "refined")

    def annotate(self, question: Question, pair: DivergencePair) -> str:
        """Critique of branch B written against branch A, with A's final
        answer masked wherever it appears verbatim."""
        self.calls.record("annotate", question.id)
        text = self._retry(lambda: self._annotate(question, pair))
        reference_answer = extract_from_text(pair.branch_a[-1].text, self.marker)
        text = redact(text or "", reference_answer).strip()
        if not text:
            raise EmptyResponseError(f"annotator returned no critique for {question.id}")
        return text

    def grade(self, predicted: str | None, ground_truth: str) -> bool:
        return self.grader(predicted, ground_truth)
