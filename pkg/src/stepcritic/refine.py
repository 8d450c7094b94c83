"""Iterative actor-critic inference and its per-iteration evaluation."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

from .gateway import CriticVerdict, GatewayError, ModelGateway
from .mcts import derive_seed
from .types import Question, ReasoningPath, SearchConfig, validate

logger = logging.getLogger(__name__)

StopReason = Literal["score_exceeded", "max_iters", "error"]


@dataclass(frozen=True)
class Round:
    answer: ReasoningPath
    verdict: CriticVerdict

    def to_dict(self) -> dict[str, Any]:
        return {"answer": self.answer.to_dict(), "verdict": self.verdict.to_dict()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Round:
        return cls(ReasoningPath.from_dict(data["answer"]), CriticVerdict.from_dict(data["verdict"]))


@dataclass(frozen=True)
class RefinementTrace:
    question_id: str
    rounds: tuple[Round, ...]
    stop_reason: StopReason
    final_answer: str | None
    error: str | None = None

    @property
    def final_path(self) -> ReasoningPath | None:
        return self.rounds[-1].answer if self.rounds else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "rounds": [r.to_dict() for r in self.rounds],
            "stop_reason": self.stop_reason,
            "final_answer": self.final_answer,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RefinementTrace:
        return cls(str(data["question_id"]), tuple(Round.from_dict(r) for r in data["rounds"]),
                   data["stop_reason"], data.get("final_answer"), data.get("error"))


def run(question: Question, config: SearchConfig, gateway: ModelGateway) -> RefinementTrace:
    """Answer, then alternate critique and refinement until the critic's score
    exceeds ``score_threshold`` or ``max_refine_iters`` critiques were made.

    The returned answer is the last one produced.  There is no refinement
    after the final critique.
    """
    gamma, T = config.score_threshold, config.max_refine_iters
    rounds: list[Round] = []

    def stop(reason: StopReason, answer: ReasoningPath | None, error: str | None = None) -> RefinementTrace:
        final = answer.final_answer if answer is not None else None
        return RefinementTrace(question.id, tuple(rounds), reason, final, error)

    try:
        answer = gateway.answer(question, temperature=config.temperature,
                                seed=derive_seed(config.seed, question.id, "actor"))
    except GatewayError as exc:
        logger.error("actor failed on %s: %s", question.id, exc)
        return stop("error", None, str(exc))

    for t in range(1, T + 1):
        try:
            verdict = gateway.critique(question, answer, seed=derive_seed(config.seed, question.id, "critic", t),
                                       sample_index=t - 1)
        except GatewayError as exc:
            logger.error("critic failed on %s round %d: %s", question.id, t, exc)
            return stop("error", answer, str(exc))
        rounds.append(Round(answer, verdict))
        if verdict.score > gamma:
            return stop("score_exceeded", answer)
        if t == T:
            break
        try:
            answer = gateway.refine(question, answer, verdict.critique, temperature=config.temperature,
                                    seed=derive_seed(config.seed, question.id, "refine", t), sample_index=t - 1)
        except GatewayError as exc:
            logger.error("refine failed on %s round %d: %s", question.id, t, exc)
            return stop("error", rounds[-1].answer, str(exc))
    return stop("max_iters", answer)


@dataclass
class EvalRow:
    iteration: int
    accuracy: float
    n_refine: int | None

    def to_dict(self) -> dict[str, Any]:
        # iteration counts refinements applied (0 = no feedback); answer_index
        # is the same state in 1-based A_t numbering
        return {"iter": self.iteration, "answer_index": self.iteration + 1,
                "acc": self.accuracy, "n_refine": self.n_refine}


@dataclass
class EvalReport:
    n_questions: int
    n_errors: int
    rows: list[EvalRow] = field(default_factory=list)
    stop_reasons: dict[str, int] = field(default_factory=dict)

    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rows]

    def n_refine(self) -> list[int | None]:
        return [r.n_refine for r in self.rows]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_questions": self.n_questions,
            "n_errors": self.n_errors,
            "stop_reasons": dict(sorted(self.stop_reasons.items())),
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_table(self) -> str:
        lines = ["iter\tanswer_index\tacc\tn_refine"]
        for r in self.rows:
            n = "-" if r.n_refine is None else str(r.n_refine)
            lines.append(f"{r.iteration}\t{r.iteration + 1}\t{100 * r.accuracy:.2f}\t{n}")
        return "\n".join(lines) + "\n"


def answer_after(trace: RefinementTrace, t: int) -> ReasoningPath:
    """Answer held after ``t`` refinement opportunities."""
    return trace.rounds[min(t, len(trace.rounds) - 1)].answer


def summarize(traces: list[RefinementTrace], questions: list[Question], config: SearchConfig,
              gateway: ModelGateway) -> EvalReport:
    by_id = {q.id: q for q in questions}
    valid = [tr for tr in traces if tr.stop_reason != "error" and tr.rounds]
    report = EvalReport(n_questions=len(traces), n_errors=len(traces) - len(valid),
                        stop_reasons=dict(Counter(tr.stop_reason for tr in traces)))
    gamma = config.score_threshold
    for t in range(config.max_refine_iters + 1):
        if valid:
            correct = sum(gateway.grade(answer_after(tr, t).final_answer, by_id[tr.question_id].ground_truth)
                          for tr in valid)
            acc = correct / len(valid)
        else:
            acc = 0.0
        n_refine = None if t == 0 else sum(
            1 for tr in valid if len(tr.rounds) >= t and tr.rounds[t - 1].verdict.score <= gamma)
        report.rows.append(EvalRow(t, acc, n_refine))
    return report


def batch_eval(questions: list[Question], config: SearchConfig, gateway: ModelGateway, *,
               parallelism: int = 1) -> tuple[list[RefinementTrace], EvalReport]:
    """Run every question and tabulate accuracy and refinement demand per
    iteration.  Row ``t`` holds the accuracy after ``t`` refinement
    opportunities and the number of round-``t`` verdicts at or below the
    threshold; the last row's demands are not acted on."""
    problems = validate(config)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    missing = [q.id for q in questions if not q.ground_truth]
    if missing:
        raise ValueError(f"questions without ground truth: {', '.join(missing)}")
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            traces = list(pool.map(lambda q: run(q, config, gateway), questions))
    else:
        traces = [run(q, config, gateway) for q in questions]
    return traces, summarize(traces, questions, config, gateway)
